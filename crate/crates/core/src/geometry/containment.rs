use std::sync::OnceLock;

use nalgebra::{Point3, Vector3};

use super::mesh::TriangleMesh;
use crate::error::{Error, Result};

/// Ray directions tried in order; later entries are used when a cast grazes an
/// edge or vertex or runs parallel to a face.
const RAY_DIRECTIONS: [[f64; 3]; 8] = [
    [0.5773, 0.6124, 0.5401],
    [-0.7072, 0.3820, 0.5950],
    [0.2361, -0.8090, 0.5383],
    [0.8313, 0.1458, -0.5363],
    [-0.3090, -0.6180, -0.7236],
    [0.1234, 0.9876, -0.0975],
    [-0.9511, -0.1123, 0.2876],
    [0.4472, -0.3333, -0.8305],
];

const EDGE_EPS: f64 = 1e-10;

enum Cast {
    Count(usize),
    OnSurface,
    Degenerate,
}

/// Triangles bucketed by their projection onto the plane orthogonal to one
/// ray direction, so a cast only tests triangles whose shadow covers the query.
#[derive(Debug, Clone)]
struct RayBuckets {
    u: Vector3<f64>,
    v: Vector3<f64>,
    origin: [f64; 2],
    cell: [f64; 2],
    dims: [usize; 2],
    cells: Vec<Vec<u32>>,
}

impl RayBuckets {
    fn new(triangles: &[[Point3<f64>; 3]], dir: &Vector3<f64>) -> Self {
        let helper = if dir.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        let u = dir.cross(&helper).normalize();
        let v = dir.cross(&u);
        let proj = |p: &Point3<f64>| [p.coords.dot(&u), p.coords.dot(&v)];
        let boxes: Vec<([f64; 2], [f64; 2])> = triangles
            .iter()
            .map(|t| {
                let mut lo = [f64::INFINITY; 2];
                let mut hi = [f64::NEG_INFINITY; 2];
                for p in t {
                    let q = proj(p);
                    for a in 0..2 {
                        lo[a] = lo[a].min(q[a] - 1e-9);
                        hi[a] = hi[a].max(q[a] + 1e-9);
                    }
                }
                (lo, hi)
            })
            .collect();
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for (a, b) in &boxes {
            for k in 0..2 {
                lo[k] = lo[k].min(a[k]);
                hi[k] = hi[k].max(b[k]);
            }
        }
        let side = ((triangles.len() as f64).sqrt().ceil() as usize).clamp(1, 512);
        let cell = [0, 1].map(|k| ((hi[k] - lo[k]) / side as f64).max(1e-12));
        let mut cells = vec![Vec::new(); side * side];
        for (i, (a, b)) in boxes.iter().enumerate() {
            let c0 = [0, 1]
                .map(|k| (((a[k] - lo[k]) / cell[k]).floor().max(0.0) as usize).min(side - 1));
            let c1 = [0, 1]
                .map(|k| (((b[k] - lo[k]) / cell[k]).floor().max(0.0) as usize).min(side - 1));
            for y in c0[1]..=c1[1] {
                for x in c0[0]..=c1[0] {
                    cells[y * side + x].push(i as u32);
                }
            }
        }
        RayBuckets {
            u,
            v,
            origin: lo,
            cell,
            dims: [side, side],
            cells,
        }
    }

    fn candidates(&self, q: &Point3<f64>) -> &[u32] {
        let p = [q.coords.dot(&self.u), q.coords.dot(&self.v)];
        let mut c = [0usize; 2];
        for k in 0..2 {
            let x = ((p[k] - self.origin[k]) / self.cell[k]).floor();
            if x < 0.0 || x >= self.dims[k] as f64 {
                return &[];
            }
            c[k] = x as usize;
        }
        &self.cells[c[1] * self.dims[0] + c[0]]
    }
}

/// Precomputed triangle data for repeated parity queries against one mesh.
#[derive(Debug, Clone)]
pub struct MeshContainment {
    triangles: Vec<[Point3<f64>; 3]>,
    lo: Point3<f64>,
    hi: Point3<f64>,
    buckets: Vec<OnceLock<RayBuckets>>,
}

impl MeshContainment {
    pub fn new(mesh: &TriangleMesh) -> Self {
        let triangles: Vec<_> = (0..mesh.faces.len()).map(|f| mesh.triangle(f)).collect();
        let (lo, hi) = mesh
            .bounding_box()
            .unwrap_or((Point3::origin(), Point3::origin()));
        MeshContainment {
            triangles,
            lo,
            hi,
            buckets: (0..RAY_DIRECTIONS.len()).map(|_| OnceLock::new()).collect(),
        }
    }

    fn direction(k: usize) -> Vector3<f64> {
        let d = RAY_DIRECTIONS[k];
        Vector3::new(d[0], d[1], d[2]).normalize()
    }

    pub fn contains(&self, q: &Point3<f64>) -> Result<bool> {
        if !q.coords.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("containment query".into()));
        }
        if self.triangles.is_empty() || (0..3).any(|a| q[a] < self.lo[a] || q[a] > self.hi[a]) {
            return Ok(false);
        }
        for k in 0..RAY_DIRECTIONS.len() {
            let dir = Self::direction(k);
            let buckets = self.buckets[k].get_or_init(|| RayBuckets::new(&self.triangles, &dir));
            match self.cast(
                q,
                &dir,
                buckets
                    .candidates(q)
                    .iter()
                    .map(|&i| &self.triangles[i as usize]),
            ) {
                Cast::Count(n) => return Ok(n % 2 == 1),
                Cast::OnSurface => return Ok(true),
                Cast::Degenerate => continue,
            }
        }
        // every direction grazed something; fall back to majority-free parity of the first ray
        let dir = Vector3::new(
            RAY_DIRECTIONS[0][0],
            RAY_DIRECTIONS[0][1],
            RAY_DIRECTIONS[0][2],
        );
        Ok(self.count_loose(q, &dir.normalize()) % 2 == 1)
    }

    /// Parity along one caller-supplied direction, without degeneracy handling.
    pub fn parity_along(&self, q: &Point3<f64>, dir: &Vector3<f64>) -> Option<bool> {
        match self.cast(q, &dir.normalize(), self.triangles.iter()) {
            Cast::Count(n) => Some(n % 2 == 1),
            Cast::OnSurface => Some(true),
            Cast::Degenerate => None,
        }
    }

    fn cast<'a>(
        &self,
        q: &Point3<f64>,
        dir: &Vector3<f64>,
        triangles: impl Iterator<Item = &'a [Point3<f64>; 3]>,
    ) -> Cast {
        let mut hits = 0;
        for tri in triangles {
            let e1 = tri[1] - tri[0];
            let e2 = tri[2] - tri[0];
            let p = dir.cross(&e2);
            let det = e1.dot(&p);
            let scale = e1.norm() * e2.norm();
            let s = q - tri[0];
            if det.abs() <= 1e-12 * scale {
                // parallel: degenerate only if the ray lies in the triangle's plane
                let n = e1.cross(&e2);
                if n.norm() > 0.0 && (s.dot(&n) / n.norm()).abs() < EDGE_EPS {
                    return Cast::Degenerate;
                }
                continue;
            }
            let inv = 1.0 / det;
            let u = s.dot(&p) * inv;
            if !(-EDGE_EPS..=1.0 + EDGE_EPS).contains(&u) {
                continue;
            }
            let qv = s.cross(&e1);
            let v = dir.dot(&qv) * inv;
            if v < -EDGE_EPS || u + v > 1.0 + EDGE_EPS {
                continue;
            }
            let t = e2.dot(&qv) * inv;
            if t.abs() < EDGE_EPS {
                return Cast::OnSurface;
            }
            if t < 0.0 {
                continue;
            }
            if u < EDGE_EPS || v < EDGE_EPS || u + v > 1.0 - EDGE_EPS {
                return Cast::Degenerate;
            }
            hits += 1;
        }
        Cast::Count(hits)
    }

    fn count_loose(&self, q: &Point3<f64>, dir: &Vector3<f64>) -> usize {
        self.triangles
            .iter()
            .filter(|tri| {
                let e1 = tri[1] - tri[0];
                let e2 = tri[2] - tri[0];
                let p = dir.cross(&e2);
                let det = e1.dot(&p);
                if det.abs() < 1e-300 {
                    return false;
                }
                let s = q - tri[0];
                let u = s.dot(&p) / det;
                let qv = s.cross(&e1);
                let v = dir.dot(&qv) / det;
                let t = e2.dot(&qv) / det;
                u >= 0.0 && v >= 0.0 && u + v < 1.0 && t > 0.0
            })
            .count()
    }
}

/// Ray-parity containment test; builds the triangle cache on every call, so
/// prefer [`MeshContainment`] for batches.
pub fn point_in_mesh(mesh: &TriangleMesh, q: &Point3<f64>) -> Result<bool> {
    MeshContainment::new(mesh).contains(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn icosphere_center_and_far_point() {
        let m = TriangleMesh::icosphere(Point3::origin(), 0.4, 3);
        assert!(point_in_mesh(&m, &Point3::origin()).unwrap());
        assert!(!point_in_mesh(&m, &Point3::new(0.9, 0.0, 0.0)).unwrap());
        assert!(point_in_mesh(&m, &Point3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn vertex_aligned_query_recasts() {
        // the origin sees icosahedron vertices along axis-aligned directions;
        // the result must still be inside
        let m = TriangleMesh::icosphere(Point3::origin(), 0.4, 0);
        let c = MeshContainment::new(&m);
        assert!(c.contains(&Point3::origin()).unwrap());
        assert!(c.contains(&Point3::new(0.0, 0.1, 0.0)).unwrap());
    }

    #[test]
    fn independent_of_ray_direction() {
        let m = TriangleMesh::icosphere(Point3::new(0.05, -0.02, 0.0), 0.35, 3);
        let c = MeshContainment::new(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let q = Point3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let answers: Vec<bool> = RAY_DIRECTIONS
                .iter()
                .filter_map(|d| c.parity_along(&q, &Vector3::new(d[0], d[1], d[2])))
                .collect();
            assert!(!answers.is_empty());
            assert!(
                answers.iter().all(|&a| a == answers[0]),
                "direction-dependent answer at {q}"
            );
        }
    }

    #[test]
    fn bucketed_casts_match_full_scan() {
        let m = TriangleMesh::icosphere(Point3::new(0.02, 0.01, -0.03), 0.3, 4);
        let c = MeshContainment::new(&m);
        let d = RAY_DIRECTIONS[0];
        let dir = Vector3::new(d[0], d[1], d[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let q = Point3::new(
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
            );
            if let Some(full) = c.parity_along(&q, &dir) {
                assert_eq!(c.contains(&q).unwrap(), full);
            }
        }
    }
}
