use nalgebra::Point3;

use super::kdtree::NearestNeighborIndex;
use super::mesh::TriangleMesh;
use crate::error::{Error, Result};

/// Closest point on triangle `abc` to `p` (region-based, after Ericson).
pub fn closest_point_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Point3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Something a query point can be projected onto.
pub trait SurfaceQuery {
    /// Closest surface point and its distance.
    fn closest(&self, q: &Point3<f64>) -> (Point3<f64>, f64);

    fn distance(&self, q: &Point3<f64>) -> f64 {
        self.closest(q).1
    }
}

impl SurfaceQuery for NearestNeighborIndex {
    fn closest(&self, q: &Point3<f64>) -> (Point3<f64>, f64) {
        self.nearest(q)
    }
}

/// Exact point-to-surface distance for a triangle mesh, accelerated with a
/// kd-tree over face centroids.
#[derive(Debug, Clone)]
pub struct MeshDistance {
    triangles: Vec<[Point3<f64>; 3]>,
    centroids: NearestNeighborIndex,
    max_reach: f64,
}

impl MeshDistance {
    pub fn new(mesh: &TriangleMesh) -> Result<Self> {
        if mesh.faces.is_empty() {
            return Err(Error::Empty("mesh"));
        }
        let triangles: Vec<_> = (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
        let centroids: Vec<_> = triangles
            .iter()
            .map(|t| Point3::from((t[0].coords + t[1].coords + t[2].coords) / 3.0))
            .collect();
        let max_reach = triangles
            .iter()
            .zip(&centroids)
            .flat_map(|(t, c)| t.iter().map(move |v| (v - c).norm()))
            .fold(0.0, f64::max);
        Ok(MeshDistance {
            triangles,
            centroids: NearestNeighborIndex::build(&centroids)?,
            max_reach,
        })
    }
}

impl SurfaceQuery for MeshDistance {
    fn closest(&self, q: &Point3<f64>) -> (Point3<f64>, f64) {
        let (seed, _) = self.centroids.nearest_index(q);
        let t = &self.triangles[seed];
        let mut best_p = closest_point_on_triangle(q, &t[0], &t[1], &t[2]);
        let mut best = (best_p - q).norm();
        // any face closer than `best` has its centroid within best + max_reach
        for i in self.centroids.within_radius(q, best + self.max_reach) {
            let t = &self.triangles[i];
            let p = closest_point_on_triangle(q, &t[0], &t[1], &t[2]);
            let d = (p - q).norm();
            if d < best {
                best = d;
                best_p = p;
            }
        }
        (best_p, best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(mesh: &TriangleMesh, q: &Point3<f64>) -> f64 {
        (0..mesh.faces.len())
            .map(|f| {
                let [a, b, c] = mesh.triangle(f);
                (closest_point_on_triangle(q, &a, &b, &c) - q).norm()
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn triangle_regions() {
        let a = Point3::new(0.0, 0.0, 0.0);
        let b = Point3::new(1.0, 0.0, 0.0);
        let c = Point3::new(0.0, 1.0, 0.0);
        let cp = |p: Point3<f64>| closest_point_on_triangle(&p, &a, &b, &c);
        assert!((cp(Point3::new(0.2, 0.2, 1.0)) - Point3::new(0.2, 0.2, 0.0)).norm() < 1e-15);
        assert_eq!(cp(Point3::new(-1.0, -1.0, 0.0)), a);
        assert_eq!(cp(Point3::new(2.0, -0.5, 0.0)), b);
        assert_eq!(cp(Point3::new(0.5, -1.0, 0.3)), Point3::new(0.5, 0.0, 0.0));
        let h = cp(Point3::new(1.0, 1.0, 0.0));
        assert!((h - Point3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn mesh_distance_matches_brute_force() {
        let mesh = TriangleMesh::icosphere(Point3::new(0.0, 0.1, 0.0), 0.3, 2);
        let md = MeshDistance::new(&mesh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let q = Point3::new(
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
            );
            assert!((md.distance(&q) - brute(&mesh, &q)).abs() < 1e-14);
        }
    }
}
