use nalgebra::Point3;

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree over a fixed point set.
///
/// Nearest queries break distance ties towards the lowest insertion index, so
/// results are reproducible and agree exactly with an exhaustive scan that uses
/// the same rule.
#[derive(Debug, Clone)]
pub struct NearestNeighborIndex {
    points: Vec<Point3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl NearestNeighborIndex {
    pub fn build(points: &[Point3<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        if let Some(i) = points
            .iter()
            .position(|p| !p.coords.iter().all(|c| c.is_finite()))
        {
            return Err(Error::NonFinite(format!(
                "point {i} of nearest-neighbor index"
            )));
        }
        let mut index = NearestNeighborIndex {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1),
        };
        index.build_node(0, points.len());
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] - lo[axis] == 0.0 {
            // all points coincide
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    /// Index of the nearest indexed point and its Euclidean distance.
    pub fn nearest_index(&self, q: &Point3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        (best.0, best.1.sqrt())
    }

    pub fn nearest(&self, q: &Point3<f64>) -> (Point3<f64>, f64) {
        let (i, d) = self.nearest_index(q);
        (self.points[i], d)
    }

    fn search(&self, node: usize, q: &Point3<f64>, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = (self.points[i] - q).norm_squared();
                    if d2 < best.1 || (d2 == best.1 && i < best.0) {
                        *best = (i, d2);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, best);
                // `<=` keeps equal-distance candidates with lower indices reachable
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }

    /// Indices of all points within `radius` of `q` (unordered).
    pub fn within_radius(&self, q: &Point3<f64>, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        let r2 = radius * radius;
        let mut stack = vec![0usize];
        while let Some(node) = stack.pop() {
            match self.nodes[node] {
                Node::Leaf { start, end } => {
                    out.extend(
                        self.order[start..end]
                            .iter()
                            .copied()
                            .filter(|&i| (self.points[i] - q).norm_squared() <= r2),
                    );
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    let diff = q[axis] - value;
                    if diff - radius <= 0.0 {
                        stack.push(left);
                    }
                    if diff + radius >= 0.0 {
                        stack.push(right);
                    }
                }
            }
        }
        out
    }
}

/// Exhaustive nearest search with the same lowest-index tie rule.
pub fn brute_force_nearest(points: &[Point3<f64>], q: &Point3<f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - q).norm_squared();
        if best.is_none_or(|(_, b)| d2 < b) {
            best = Some((i, d2));
        }
    }
    best.map(|(i, d2)| (i, d2.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_input_is_rejected() {
        let err = NearestNeighborIndex::build(&[]).unwrap_err();
        assert_eq!(err.to_string(), "empty point set");
    }

    #[test]
    fn single_point() {
        let idx = NearestNeighborIndex::build(&[Point3::origin()]).unwrap();
        let (p, d) = idx.nearest(&Point3::new(1.0, 1.0, 1.0));
        assert_eq!(p, Point3::origin());
        assert!((d - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cube_corner_tie_picks_lowest_index() {
        let mut corners = Vec::new();
        for i in 0..8 {
            corners.push(Point3::new(
                (i & 1) as f64,
                ((i >> 1) & 1) as f64,
                ((i >> 2) & 1) as f64,
            ));
        }
        let idx = NearestNeighborIndex::build(&corners).unwrap();
        let (i, d) = idx.nearest_index(&Point3::new(0.5, 0.5, 0.5));
        assert_eq!(i, 0);
        assert!((d - 3f64.sqrt() / 2.0).abs() < 1e-12);
        let (i, d) = idx.nearest_index(&corners[5]);
        assert_eq!((i, d), (5, 0.0));
    }

    #[test]
    fn duplicates_return_lowest_index() {
        let p = Point3::new(0.1, 0.2, 0.3);
        let pts = vec![Point3::new(0.9, 0.9, 0.9), p, p, p];
        let idx = NearestNeighborIndex::build(&pts).unwrap();
        let (i, d) = idx.nearest_index(&Point3::new(0.1, 0.2, 0.35));
        assert_eq!(i, 1);
        assert!((d - 0.05).abs() < 1e-12);
    }

    #[test]
    fn matches_exhaustive_scan_on_uniform_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<_> = (0..1000)
            .map(|_| Point3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let idx = NearestNeighborIndex::build(&pts).unwrap();
        for _ in 0..100 {
            let q = Point3::new(rng.gen(), rng.gen(), rng.gen());
            let (i, d) = idx.nearest_index(&q);
            let (bi, bd) = brute_force_nearest(&pts, &q).unwrap();
            assert_eq!(i, bi);
            assert_eq!(d, bd);
        }
    }

    #[test]
    fn radius_query_matches_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<_> = (0..500)
            .map(|_| Point3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let idx = NearestNeighborIndex::build(&pts).unwrap();
        let q = Point3::new(0.5, 0.4, 0.6);
        let mut got = idx.within_radius(&q, 0.2);
        got.sort_unstable();
        let want: Vec<usize> = (0..pts.len())
            .filter(|&i| (pts[i] - q).norm() <= 0.2)
            .collect();
        assert_eq!(got, want);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn nearest_equals_exhaustive(
            pts in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..2000),
            qs in prop::collection::vec((-1.5f64..1.5, -1.5f64..1.5, -1.5f64..1.5), 1..20),
        ) {
            let pts: Vec<_> = pts.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect();
            let idx = NearestNeighborIndex::build(&pts).unwrap();
            for (x, y, z) in qs {
                let q = Point3::new(x, y, z);
                prop_assert_eq!(idx.nearest_index(&q), brute_force_nearest(&pts, &q).unwrap());
            }
        }
    }
}
