//! Points, triangle meshes, nearest-neighbor search and containment queries.
//!
//! All shapes live in the working cube `[-0.5, 0.5]^3`.

mod containment;
mod distance;
pub mod io;
mod kdtree;
mod mesh;

pub use containment::{point_in_mesh, MeshContainment};
pub use distance::{closest_point_on_triangle, MeshDistance, SurfaceQuery};
pub use kdtree::{brute_force_nearest, NearestNeighborIndex};
pub use mesh::TriangleMesh;
pub use nalgebra::{Point3, Vector3};

use crate::error::Result;

/// Half-width of the working cube.
pub const CUBE_HALF: f64 = 0.5;

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn cube() -> Self {
        Bounds {
            min: [-CUBE_HALF; 3],
            max: [CUBE_HALF; 3],
        }
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|a| self.max[a] - self.min[a]).product()
    }

    pub fn union(&self, other: &Bounds) -> Bounds {
        let mut b = *self;
        for a in 0..3 {
            b.min[a] = b.min[a].min(other.min[a]);
            b.max[a] = b.max[a].max(other.max[a]);
        }
        b
    }

    pub fn padded(&self, pad: f64) -> Bounds {
        Bounds {
            min: self.min.map(|v| v - pad),
            max: self.max.map(|v| v + pad),
        }
    }

    pub fn intersect(&self, other: &Bounds) -> Bounds {
        let mut b = *self;
        for a in 0..3 {
            b.min[a] = b.min[a].max(other.min[a]);
            b.max[a] = b.max[a].min(other.max[a]);
        }
        b
    }

    pub fn of_points(points: &[Point3<f64>]) -> Option<Bounds> {
        let first = points.first()?;
        let mut b = Bounds {
            min: [first.x, first.y, first.z],
            max: [first.x, first.y, first.z],
        };
        for p in points {
            for a in 0..3 {
                b.min[a] = b.min[a].min(p[a]);
                b.max[a] = b.max[a].max(p[a]);
            }
        }
        Some(b)
    }
}

/// Convenience: nearest point of an index to `q`.
pub fn nearest(index: &NearestNeighborIndex, q: &Point3<f64>) -> (Point3<f64>, f64) {
    index.nearest(q)
}

pub fn build_nn_index(points: &[Point3<f64>]) -> Result<NearestNeighborIndex> {
    NearestNeighborIndex::build(points)
}
