use nalgebra::{Point3, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let mesh = TriangleMesh { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (i, v) in self.vertices.iter().enumerate() {
            if !v.coords.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidMesh(format!("vertex {i} is not finite")));
            }
        }
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&k| k as usize >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {i} indexes past {n} vertices"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {i} repeats a vertex")));
            }
        }
        Ok(())
    }

    pub fn triangle(&self, face: usize) -> [Point3<f64>; 3] {
        let f = self.faces[face];
        [
            self.vertices[f[0] as usize],
            self.vertices[f[1] as usize],
            self.vertices[f[2] as usize],
        ]
    }

    /// Unnormalized face normal, `(b - a) x (c - a)`.
    pub fn face_normal(&self, face: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangle(face);
        (b - a).cross(&(c - a))
    }

    pub fn face_area(&self, face: usize) -> f64 {
        0.5 * self.face_normal(face).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Signed enclosed volume; positive for closed meshes with outward faces.
    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                a.coords.dot(&b.coords.cross(&c.coords)) / 6.0
            })
            .sum()
    }

    pub fn bounding_box(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        let first = *self.vertices.first()?;
        Some(
            self.vertices
                .iter()
                .fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))),
        )
    }

    /// Area-weighted uniform samples on the surface.
    pub fn sample_surface<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<Point3<f64>>> {
        if self.faces.is_empty() {
            return Err(Error::Empty("mesh"));
        }
        let mut cumulative = Vec::with_capacity(self.faces.len());
        let mut total = 0.0;
        for f in 0..self.faces.len() {
            total += self.face_area(f);
            cumulative.push(total);
        }
        if total <= 0.0 {
            return Err(Error::InvalidMesh("zero surface area".into()));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let r = rng.gen::<f64>() * total;
            let face = cumulative
                .partition_point(|&c| c <= r)
                .min(self.faces.len() - 1);
            let [a, b, c] = self.triangle(face);
            let (mut u, mut v): (f64, f64) = (rng.gen(), rng.gen());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            out.push(a + (b - a) * u + (c - a) * v);
        }
        Ok(out)
    }

    /// Edge -> number of incident faces; used for watertightness checks.
    pub fn edge_incidence(&self) -> std::collections::HashMap<(u32, u32), usize> {
        let mut map = std::collections::HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *map.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        map
    }

    pub fn is_watertight(&self) -> bool {
        !self.faces.is_empty() && self.edge_incidence().values().all(|&c| c == 2)
    }

    /// Drops vertices no face references, keeping the order of the rest.
    pub fn without_unused_vertices(&self) -> TriangleMesh {
        let mut remap = vec![u32::MAX; self.vertices.len()];
        for f in &self.faces {
            for &v in f {
                remap[v as usize] = 0;
            }
        }
        let mut vertices = Vec::new();
        for (i, r) in remap.iter_mut().enumerate() {
            if *r == 0 {
                *r = vertices.len() as u32;
                vertices.push(self.vertices[i]);
            }
        }
        let faces = self
            .faces
            .iter()
            .map(|f| f.map(|v| remap[v as usize]))
            .collect();
        TriangleMesh { vertices, faces }
    }

    /// Vertices sorted lexicographically, faces remapped, rotated so the
    /// smallest index leads (orientation kept) and sorted.
    pub fn canonicalized(&self) -> TriangleMesh {
        let mut order: Vec<usize> = (0..self.vertices.len()).collect();
        order.sort_by(|&a, &b| {
            let (p, q) = (self.vertices[a], self.vertices[b]);
            p.x.total_cmp(&q.x)
                .then(p.y.total_cmp(&q.y))
                .then(p.z.total_cmp(&q.z))
        });
        let mut remap = vec![0u32; order.len()];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new as u32;
        }
        let vertices = order.iter().map(|&i| self.vertices[i]).collect();
        let mut faces: Vec<[u32; 3]> = self
            .faces
            .iter()
            .map(|f| {
                let g = [
                    remap[f[0] as usize],
                    remap[f[1] as usize],
                    remap[f[2] as usize],
                ];
                let k = (0..3).min_by_key(|&k| g[k]).unwrap_or(0);
                [g[k], g[(k + 1) % 3], g[(k + 2) % 3]]
            })
            .collect();
        faces.sort_unstable();
        TriangleMesh { vertices, faces }
    }

    /// Icosphere from recursive subdivision of an icosahedron.
    pub fn icosphere(center: Point3<f64>, radius: f64, subdivisions: usize) -> TriangleMesh {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<Vector3<f64>> = [
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ]
        .iter()
        .map(|v| Vector3::new(v[0], v[1], v[2]).normalize())
        .collect();
        let mut faces: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut midpoints = std::collections::HashMap::new();
            let mut next = Vec::with_capacity(faces.len() * 4);
            let mut mid = |a: u32, b: u32, verts: &mut Vec<Vector3<f64>>| -> u32 {
                *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    verts.push((verts[a as usize] + verts[b as usize]).normalize());
                    (verts.len() - 1) as u32
                })
            };
            for f in &faces {
                let ab = mid(f[0], f[1], &mut verts);
                let bc = mid(f[1], f[2], &mut verts);
                let ca = mid(f[2], f[0], &mut verts);
                next.extend_from_slice(&[
                    [f[0], ab, ca],
                    [f[1], bc, ab],
                    [f[2], ca, bc],
                    [ab, bc, ca],
                ]);
            }
            faces = next;
        }
        TriangleMesh {
            vertices: verts.into_iter().map(|v| center + v * radius).collect(),
            faces,
        }
    }

    pub fn translated(&self, offset: Vector3<f64>) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|v| v + offset).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Same surface with every face orientation reversed.
    pub fn flipped(&self) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.clone(),
            faces: self.faces.iter().map(|f| [f[0], f[2], f[1]]).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn validation_catches_bad_faces() {
        let v = vec![
            Point3::origin(),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        assert!(TriangleMesh::new(v.clone(), vec![[0, 1, 2]]).is_ok());
        assert!(TriangleMesh::new(v.clone(), vec![[0, 1, 3]]).is_err());
        assert!(TriangleMesh::new(v.clone(), vec![[0, 1, 1]]).is_err());
        let mut bad = v;
        bad[0].x = f64::NAN;
        assert!(TriangleMesh::new(bad, vec![[0, 1, 2]]).is_err());
    }

    #[test]
    fn icosphere_is_closed_and_outward() {
        let m = TriangleMesh::icosphere(Point3::origin(), 0.4, 3);
        assert!(m.is_watertight());
        let vol = m.signed_volume();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.4f64.powi(3);
        assert!(vol > 0.0 && (vol - exact).abs() / exact < 0.02);
    }

    #[test]
    fn surface_samples_lie_on_faces() {
        let m = TriangleMesh::icosphere(Point3::new(0.1, 0.0, 0.0), 0.3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in m.sample_surface(200, &mut rng).unwrap() {
            let r = (p - Point3::new(0.1, 0.0, 0.0)).norm();
            assert!(r <= 0.3 + 1e-12 && r > 0.28);
        }
    }

    #[test]
    fn canonical_form_ignores_vertex_order() {
        let m = TriangleMesh::icosphere(Point3::origin(), 1.0, 1);
        let n = m.vertices.len() as u32;
        let perm = |i: u32| (i * 5 + 3) % n;
        let mut shuffled = TriangleMesh {
            vertices: vec![Point3::origin(); n as usize],
            faces: m
                .faces
                .iter()
                .map(|f| [perm(f[1]), perm(f[2]), perm(f[0])])
                .collect(),
        };
        for i in 0..n {
            shuffled.vertices[perm(i) as usize] = m.vertices[i as usize];
        }
        assert_eq!(m.canonicalized(), shuffled.canonicalized());
        assert_ne!(m.canonicalized(), m.flipped().canonicalized());
    }
}
