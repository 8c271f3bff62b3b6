//! Occupancy grids, multiresolution refinement around the iso-surface and
//! marching cubes.

use std::collections::HashMap;
use std::sync::OnceLock;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Bounds, TriangleMesh};
use crate::model::SequenceModel;
use crate::synthetic::PointCloudSequence;

/// Faces with area at or below this are dropped.
pub const MIN_FACE_AREA: f64 = 1e-12;

/// Scalar values at the `(res + 1)^3` vertices of a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    /// Cells per axis.
    pub resolution: usize,
    pub bounds: Bounds,
    /// Vertex values, x fastest.
    pub values: Vec<f64>,
    pub tau: f64,
}

impl OccupancyGrid {
    pub fn new(resolution: usize, bounds: Bounds, values: Vec<f64>, tau: f64) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::InvalidArgument(
                "grid resolution must be at least 2".into(),
            ));
        }
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidArgument("tau must lie in (0, 1)".into()));
        }
        if values.len() != (resolution + 1).pow(3) {
            return Err(Error::mismatch(
                "occupancy grid",
                format!("{} values for resolution {resolution}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("occupancy grid values".into()));
        }
        Ok(OccupancyGrid {
            resolution,
            bounds,
            values,
            tau,
        })
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        grid_index(self.resolution, i, j, k)
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn position(&self, i: usize, j: usize, k: usize) -> Point3<f64> {
        grid_position(&self.bounds, self.resolution, i, j, k)
    }

    pub fn cell_size(&self) -> [f64; 3] {
        let r = self.resolution as f64;
        [0, 1, 2].map(|a| (self.bounds.max[a] - self.bounds.min[a]) / r)
    }

    /// `1 - values` at level `1 - tau`: same surface, opposite inside.
    pub fn complement(&self) -> OccupancyGrid {
        OccupancyGrid {
            values: self.values.iter().map(|v| 1.0 - v).collect(),
            tau: 1.0 - self.tau,
            ..self.clone()
        }
    }
}

fn grid_index(res: usize, i: usize, j: usize, k: usize) -> usize {
    let n = res + 1;
    (k * n + j) * n + i
}

fn grid_position(bounds: &Bounds, res: usize, i: usize, j: usize, k: usize) -> Point3<f64> {
    let r = res as f64;
    let c = [i, j, k];
    Point3::from(
        [0, 1, 2].map(|a| bounds.min[a] + (bounds.max[a] - bounds.min[a]) * c[a] as f64 / r),
    )
}

/// Batched field evaluation.
pub trait Field {
    fn evaluate(&mut self, points: &[Point3<f64>]) -> Result<Vec<f64>>;
}

impl<F: FnMut(&[Point3<f64>]) -> Result<Vec<f64>>> Field for F {
    fn evaluate(&mut self, points: &[Point3<f64>]) -> Result<Vec<f64>> {
        self(points)
    }
}

fn evaluate_checked(field: &mut dyn Field, points: &[Point3<f64>]) -> Result<Vec<f64>> {
    let v = field.evaluate(points)?;
    if v.len() != points.len() {
        return Err(Error::mismatch(
            "occupancy field",
            format!("{} values for {} points", v.len(), points.len()),
        ));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("occupancy field value".into()));
    }
    Ok(v)
}

/// Evaluates the field at every vertex of a `res^3` grid.
pub fn dense_evaluate(
    field: &mut dyn Field,
    res: usize,
    bounds: Bounds,
    tau: f64,
) -> Result<OccupancyGrid> {
    let n = res + 1;
    let mut points = Vec::with_capacity(n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                points.push(grid_position(&bounds, res, i, j, k));
            }
        }
    }
    let values = evaluate_checked(field, &points)?;
    OccupancyGrid::new(res, bounds, values, tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiseConfig {
    pub start_res: usize,
    pub upsample_steps: usize,
    pub tau: f64,
}

impl Default for MiseConfig {
    fn default() -> Self {
        MiseConfig {
            start_res: 32,
            upsample_steps: 2,
            tau: 0.5,
        }
    }
}

impl MiseConfig {
    pub fn effective_resolution(&self) -> usize {
        self.start_res << self.upsample_steps
    }

    /// Parses `"<start>x<steps>"`, e.g. `32x2`.
    pub fn parse_resolution(s: &str) -> Result<(usize, usize)> {
        let bad = || {
            Error::InvalidArgument(format!(
                "resolution `{s}` is not of the form <start>x<steps>"
            ))
        };
        let (a, b) = s.split_once('x').ok_or_else(bad)?;
        Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
    }
}

/// Per-level refinement counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MiseStats {
    /// Cells straddling the level at each resolution, before the halo.
    pub boundary_cells: Vec<usize>,
    /// Field evaluations at each resolution.
    pub evaluations: Vec<usize>,
}

struct FineGrid {
    res: usize,
    bounds: Bounds,
    tau: f64,
    values: Vec<f64>,
    exact: Vec<bool>,
}

impl FineGrid {
    fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        grid_index(self.res, i, j, k)
    }

    fn inside(&self, i: usize, j: usize, k: usize) -> bool {
        self.values[self.idx(i, j, k)] > self.tau
    }

    /// Corner vertex indices of the cell at `(ci, cj, ck)` with edge `s`.
    fn corners(&self, ci: usize, cj: usize, ck: usize, s: usize) -> [(usize, usize, usize); 8] {
        std::array::from_fn(|c| {
            (
                ci * s + (c & 1) * s,
                cj * s + ((c >> 1) & 1) * s,
                ck * s + ((c >> 2) & 1) * s,
            )
        })
    }

    fn straddles(&self, ci: usize, cj: usize, ck: usize, s: usize) -> bool {
        let corners = self.corners(ci, cj, ck, s);
        let first = self.inside(corners[0].0, corners[0].1, corners[0].2);
        corners
            .iter()
            .any(|&(i, j, k)| self.inside(i, j, k) != first)
    }

    /// Evaluates every not-yet-exact vertex of stride `s / 2` inside the given cells.
    fn refine(
        &mut self,
        field: &mut dyn Field,
        cells: &[(usize, usize, usize)],
        s: usize,
    ) -> Result<usize> {
        let h = (s / 2).max(1);
        let mut todo = Vec::new();
        let mut queued = vec![false; self.values.len()];
        for &(ci, cj, ck) in cells {
            for dk in 0..=s / h {
                for dj in 0..=s / h {
                    for di in 0..=s / h {
                        let (i, j, k) = (ci * s + di * h, cj * s + dj * h, ck * s + dk * h);
                        let id = self.idx(i, j, k);
                        if !self.exact[id] && !queued[id] {
                            queued[id] = true;
                            todo.push((i, j, k));
                        }
                    }
                }
            }
        }
        self.evaluate_vertices(field, &todo)?;
        Ok(todo.len())
    }

    fn evaluate_vertices(
        &mut self,
        field: &mut dyn Field,
        verts: &[(usize, usize, usize)],
    ) -> Result<()> {
        if verts.is_empty() {
            return Ok(());
        }
        let points: Vec<_> = verts
            .iter()
            .map(|&(i, j, k)| grid_position(&self.bounds, self.res, i, j, k))
            .collect();
        let vals = evaluate_checked(field, &points)?;
        for (&(i, j, k), v) in verts.iter().zip(vals) {
            let id = self.idx(i, j, k);
            self.values[id] = v;
            self.exact[id] = true;
        }
        Ok(())
    }

    /// Fills the stride-`s/2` vertices of a cell that were not evaluated by
    /// trilinear interpolation of its corners, which keeps them on the same
    /// side of the level as the corners.
    fn fill(&mut self, ci: usize, cj: usize, ck: usize, s: usize) {
        let h = s / 2;
        let corners = self.corners(ci, cj, ck, s);
        let cv: Vec<f64> = corners
            .iter()
            .map(|&(i, j, k)| self.values[self.idx(i, j, k)])
            .collect();
        for dk in 0..=2 {
            for dj in 0..=2 {
                for di in 0..=2 {
                    let (i, j, k) = (ci * s + di * h, cj * s + dj * h, ck * s + dk * h);
                    let id = self.idx(i, j, k);
                    if self.exact[id] {
                        continue;
                    }
                    let (u, v, w) = (di as f64 / 2.0, dj as f64 / 2.0, dk as f64 / 2.0);
                    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
                    let x: Vec<f64> = (0..4).map(|c| lerp(cv[2 * c], cv[2 * c + 1], u)).collect();
                    let val = lerp(lerp(x[0], x[1], v), lerp(x[2], x[3], v), w);
                    self.values[id] = val;
                }
            }
        }
    }

    /// Evaluates the unresolved corners of straddling cells at stride `s`
    /// until every straddling cell has exact corners.
    fn settle(&mut self, field: &mut dyn Field, s: usize) -> Result<usize> {
        let cells = self.res / s;
        let mut total = 0;
        loop {
            let mut todo = Vec::new();
            let mut queued = vec![false; self.values.len()];
            for ck in 0..cells {
                for cj in 0..cells {
                    for ci in 0..cells {
                        if !self.straddles(ci, cj, ck, s) {
                            continue;
                        }
                        for (i, j, k) in self.corners(ci, cj, ck, s) {
                            let id = self.idx(i, j, k);
                            if !self.exact[id] && !queued[id] {
                                queued[id] = true;
                                todo.push((i, j, k));
                            }
                        }
                    }
                }
            }
            if todo.is_empty() {
                return Ok(total);
            }
            total += todo.len();
            self.evaluate_vertices(field, &todo)?;
        }
    }
}

/// Multiresolution evaluation: the coarse `start_res` grid is evaluated in
/// full, then only cells straddling `tau` plus a one-cell halo are subdivided,
/// until the resolution reaches `start_res * 2^steps`. Elsewhere vertex values
/// are interpolated from the enclosing coarse cell.
pub fn mise_evaluate(
    field: &mut dyn Field,
    config: &MiseConfig,
    bounds: Bounds,
) -> Result<(OccupancyGrid, MiseStats)> {
    if config.start_res < 8 {
        return Err(Error::InvalidArgument(
            "MISE start resolution must be at least 8".into(),
        ));
    }
    if !(config.tau > 0.0 && config.tau < 1.0) {
        return Err(Error::InvalidArgument("tau must lie in (0, 1)".into()));
    }
    let res = config.effective_resolution();
    let n = res + 1;
    let mut grid = FineGrid {
        res,
        bounds,
        tau: config.tau,
        values: vec![0.0; n * n * n],
        exact: vec![false; n * n * n],
    };
    let mut stats = MiseStats::default();
    let mut s = 1 << config.upsample_steps;
    let coarse: Vec<_> = (0..=config.start_res)
        .flat_map(|k| {
            (0..=config.start_res).flat_map(move |j| (0..=config.start_res).map(move |i| (i, j, k)))
        })
        .map(|(i, j, k)| (i * s, j * s, k * s))
        .collect();
    grid.evaluate_vertices(field, &coarse)?;
    stats.evaluations.push(coarse.len());
    loop {
        let cells = res / s;
        let mut active = vec![false; cells * cells * cells];
        let mut boundary = 0;
        for ck in 0..cells {
            for cj in 0..cells {
                for ci in 0..cells {
                    if !grid.straddles(ci, cj, ck, s) {
                        continue;
                    }
                    boundary += 1;
                    for dk in -1i64..=1 {
                        for dj in -1i64..=1 {
                            for di in -1i64..=1 {
                                let (a, b, c) = (ci as i64 + di, cj as i64 + dj, ck as i64 + dk);
                                let r = 0..cells as i64;
                                if r.contains(&a) && r.contains(&b) && r.contains(&c) {
                                    active
                                        [(c as usize * cells + b as usize) * cells + a as usize] =
                                        true;
                                }
                            }
                        }
                    }
                }
            }
        }
        stats.boundary_cells.push(boundary);
        if s == 1 {
            break;
        }
        let active_cells: Vec<_> = (0..cells * cells * cells)
            .filter(|&c| active[c])
            .map(|c| (c % cells, (c / cells) % cells, c / (cells * cells)))
            .collect();
        let mut evaluated = grid.refine(field, &active_cells, s)?;
        for c in 0..cells * cells * cells {
            if !active[c] {
                grid.fill(c % cells, (c / cells) % cells, c / (cells * cells), s);
            }
        }
        s /= 2;
        evaluated += grid.settle(field, s)?;
        stats.evaluations.push(evaluated);
    }
    let grid_out = OccupancyGrid::new(res, bounds, grid.values, config.tau)?;
    Ok((grid_out, stats))
}

/// Triangle loops of every corner configuration, as lists of cube edges.
struct CaseTable {
    cases: Vec<Vec<[usize; 3]>>,
}

/// Corner `c` sits at `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Cube faces with corners in counter-clockwise order seen from outside.
const FACES: [[usize; 4]; 6] = [
    [0, 4, 6, 2], // x = 0
    [1, 3, 7, 5], // x = 1
    [0, 1, 5, 4], // y = 0
    [2, 6, 7, 3], // y = 1
    [0, 2, 3, 1], // z = 0
    [4, 5, 7, 6], // z = 1
];

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|&(p, q)| (p, q) == (a, b) || (p, q) == (b, a))
        .expect("adjacent corners")
}

/// Builds the 256 cases. On every cube face each crossing where the boundary
/// enters the inside region is joined to the next crossing where it leaves,
/// walking counter-clockwise; ambiguous faces therefore always separate
/// their inside corners, which keeps neighbouring cells consistent. The
/// face segments chain into closed loops that are fanned into triangles.
fn build_cases() -> CaseTable {
    let mut cases = Vec::with_capacity(256);
    for mask in 0..256usize {
        let inside = |c: usize| mask >> c & 1 == 1;
        let mut next: HashMap<usize, usize> = HashMap::new();
        for face in FACES {
            let crossings: Vec<(usize, bool)> = (0..4)
                .filter_map(|i| {
                    let (a, b) = (face[i], face[(i + 1) % 4]);
                    (inside(a) != inside(b)).then(|| (edge_between(a, b), inside(b)))
                })
                .collect();
            for (p, &(edge, entering)) in crossings.iter().enumerate() {
                if !entering {
                    continue;
                }
                let leave = (1..crossings.len())
                    .map(|d| crossings[(p + d) % crossings.len()])
                    .find(|c| !c.1)
                    .expect("every entering crossing has a leaving one");
                next.insert(edge, leave.0);
            }
        }
        let mut tris = Vec::new();
        let mut edges: Vec<usize> = next.keys().copied().collect();
        edges.sort_unstable();
        let mut used = [false; 12];
        for start in edges {
            if used[start] {
                continue;
            }
            let mut lp = vec![start];
            used[start] = true;
            let mut e = next[&start];
            while e != start {
                used[e] = true;
                lp.push(e);
                e = next[&e];
            }
            for i in 1..lp.len() - 1 {
                tris.push([lp[0], lp[i], lp[i + 1]]);
            }
        }
        cases.push(tris);
    }
    CaseTable { cases }
}

fn case_table() -> &'static CaseTable {
    static TABLE: OnceLock<CaseTable> = OnceLock::new();
    TABLE.get_or_init(build_cases)
}

/// Number of triangles the lookup table emits for a corner configuration.
pub fn case_triangle_count(mask: u8) -> usize {
    case_table().cases[mask as usize].len()
}

/// Iso-surface of the grid at level `tau`. A vertex is inside when its value
/// exceeds `tau`; face normals point towards decreasing values.
pub fn marching_cubes(grid: &OccupancyGrid) -> TriangleMesh {
    let res = grid.resolution;
    let table = case_table();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut vertex_of: HashMap<(usize, usize), u32> = HashMap::new();
    let offsets: [(usize, usize, usize); 8] =
        std::array::from_fn(|c| (c & 1, (c >> 1) & 1, (c >> 2) & 1));
    for k in 0..res {
        for j in 0..res {
            for i in 0..res {
                let corner = |c: usize| (i + offsets[c].0, j + offsets[c].1, k + offsets[c].2);
                let mut mask = 0usize;
                for c in 0..8 {
                    let (a, b, d) = corner(c);
                    if grid.value(a, b, d) > grid.tau {
                        mask |= 1 << c;
                    }
                }
                let tris = &table.cases[mask];
                if tris.is_empty() {
                    continue;
                }
                let mut vertex = |e: usize| -> u32 {
                    let (ca, cb) = EDGES[e];
                    let (pa, pb) = (corner(ca), corner(cb));
                    let (ia, ib) = (grid.index(pa.0, pa.1, pa.2), grid.index(pb.0, pb.1, pb.2));
                    let key = (ia.min(ib), ia.max(ib));
                    *vertex_of.entry(key).or_insert_with(|| {
                        let (va, vb) = (grid.values[ia], grid.values[ib]);
                        let t = ((grid.tau - va) / (vb - va)).clamp(0.0, 1.0);
                        let xa = grid.position(pa.0, pa.1, pa.2);
                        let xb = grid.position(pb.0, pb.1, pb.2);
                        vertices.push(xa + (xb - xa) * t);
                        (vertices.len() - 1) as u32
                    })
                };
                for tri in tris {
                    faces.push([vertex(tri[0]), vertex(tri[1]), vertex(tri[2])]);
                }
            }
        }
    }
    let mesh = TriangleMesh { vertices, faces };
    let keep: Vec<[u32; 3]> = (0..mesh.faces.len())
        .filter(|&f| mesh.face_area(f) > MIN_FACE_AREA)
        .map(|f| mesh.faces[f])
        .collect();
    TriangleMesh {
        vertices: mesh.vertices,
        faces: keep,
    }
    .without_unused_vertices()
}

/// Meshes of every frame with any warnings raised along the way.
#[derive(Debug, Clone)]
pub struct SequenceExtraction {
    pub meshes: Vec<TriangleMesh>,
    pub warnings: Vec<String>,
}

/// One mesh per frame from that frame's code and pooled flow features.
pub fn extract_sequence<M: SequenceModel>(
    model: &M,
    seq: &PointCloudSequence,
    config: &MiseConfig,
) -> Result<SequenceExtraction> {
    let prepared = model.prepare(seq)?;
    let mut meshes = Vec::with_capacity(seq.frames.len());
    let mut warnings = Vec::new();
    for t in 0..seq.frames.len() {
        let mut field = |p: &[Point3<f64>]| model.occupancy(&prepared, t, p);
        let (grid, _) = mise_evaluate(&mut field, config, Bounds::cube())?;
        let (lo, hi) = grid
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        if hi - lo < 1e-12 {
            let w = format!(
                "frame {t}: occupancy field is constant ({lo}); the model looks untrained and the mesh is empty"
            );
            log::warn!("{w}");
            warnings.push(w);
        }
        let mesh = marching_cubes(&grid);
        if mesh.is_empty() && hi - lo >= 1e-12 {
            let w = format!("frame {t}: no surface at level {}", config.tau);
            log::warn!("{w}");
            warnings.push(w);
        }
        meshes.push(mesh);
    }
    Ok(SequenceExtraction { meshes, warnings })
}
