//! Volumetric IoU, mesh Chamfer distance and correspondence error, per-sequence
//! reports, validation summaries and the point-count / frame-timing study.

use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    Bounds, MeshContainment, MeshDistance, NearestNeighborIndex, SurfaceQuery, TriangleMesh,
};
use crate::mesh_extraction::{extract_sequence, marching_cubes, mise_evaluate, MiseConfig};
use crate::model::SequenceModel;
use crate::nn::sigmoid;
use crate::synthetic::{sample_surface_sequence, DeformingShape, PointCloudSequence, TemporalMode};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mise: MiseConfig,
    /// Samples per metric and frame.
    pub n_samples: usize,
    pub seed: u64,
    /// Effective grid resolution of the ground-truth meshes.
    pub gt_resolution: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mise: MiseConfig::default(),
            n_samples: 10_000,
            seed: 0,
            gt_resolution: 128,
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Batched inside/outside predicate.
pub type Indicator<'a> = dyn FnMut(&[Point3<f64>]) -> Result<Vec<bool>> + 'a;

/// Monte-Carlo IoU of two solids over uniform samples in `bounds`. Two empty
/// solids have IoU 1.
pub fn volumetric_iou(
    pred: &mut Indicator<'_>,
    gt: &mut Indicator<'_>,
    bounds: &Bounds,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples < 1000 {
        return Err(Error::InvalidArgument(
            "IoU needs at least 1000 samples".into(),
        ));
    }
    let mut rng = rng_for(seed, 0);
    let points: Vec<Point3<f64>> = (0..n_samples)
        .map(|_| Point3::from([0, 1, 2].map(|a| rng.gen_range(bounds.min[a]..=bounds.max[a]))))
        .collect();
    let a = pred(&points)?;
    let b = gt(&points)?;
    if a.len() != n_samples || b.len() != n_samples {
        return Err(Error::mismatch(
            "volumetric IoU",
            "indicator returned the wrong number of labels",
        ));
    }
    let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Mean of accuracy (prediction samples to the ground-truth surface) and
/// completeness (ground-truth samples to the predicted surface). Both meshes
/// are sampled with the same seed; distances are exact point-to-surface.
pub fn chamfer_metric(
    pred: &TriangleMesh,
    gt: &TriangleMesh,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty prediction".into()));
    }
    if gt.is_empty() {
        return Err(Error::InvalidArgument("empty ground truth".into()));
    }
    let ps = pred.sample_surface(n_samples, &mut rng_for(seed, 1))?;
    let gs = gt.sample_surface(n_samples, &mut rng_for(seed, 1))?;
    let to_gt = MeshDistance::new(gt)?;
    let to_pred = MeshDistance::new(pred)?;
    let accuracy = ps.iter().map(|p| to_gt.distance(p)).sum::<f64>() / ps.len() as f64;
    let completeness = gs.iter().map(|p| to_pred.distance(p)).sum::<f64>() / gs.len() as f64;
    Ok(0.5 * (accuracy + completeness))
}

/// `n` mesh vertices drawn uniformly with replacement.
pub fn sample_vertices(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<Point3<f64>>> {
    if mesh.vertices.is_empty() {
        return Err(Error::InvalidArgument("empty prediction".into()));
    }
    let mut rng = rng_for(seed, 2);
    Ok((0..n)
        .map(|_| mesh.vertices[rng.gen_range(0..mesh.vertices.len())])
        .collect())
}

/// Flow at arbitrary points, taken from the nearest input point.
pub fn flow_at_points(
    points: &[Point3<f64>],
    input_points: &[Point3<f64>],
    input_flow: &[Vector3<f64>],
) -> Result<Vec<Vector3<f64>>> {
    if input_points.len() != input_flow.len() {
        return Err(Error::mismatch(
            "flow lookup",
            format!(
                "{} points vs {} flow vectors",
                input_points.len(),
                input_flow.len()
            ),
        ));
    }
    let index = NearestNeighborIndex::build(input_points)?;
    Ok(points
        .iter()
        .map(|p| input_flow[index.nearest_index(p).0])
        .collect())
}

/// Mean distance from `points + flow` to the next frame's surface.
pub fn correspondence_l2(
    points: &[Point3<f64>],
    flow: &[Vector3<f64>],
    gt_next: &dyn SurfaceQuery,
) -> Result<f64> {
    if points.len() != flow.len() {
        return Err(Error::mismatch(
            "correspondence",
            format!("{} points vs {} flow vectors", points.len(), flow.len()),
        ));
    }
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    Ok(points
        .iter()
        .zip(flow)
        .map(|(p, v)| gt_next.distance(&(p + v)))
        .sum::<f64>()
        / points.len() as f64)
}

/// Surface of the analytic shape at time `t`, extracted from a smoothed
/// indicator whose transition band matches the grid spacing.
pub fn ground_truth_mesh(
    shape: &DeformingShape,
    t: f64,
    resolution: usize,
) -> Result<TriangleMesh> {
    let steps = resolution.trailing_zeros().min(3) as usize;
    let start = resolution >> steps;
    let band = 1.0 / resolution as f64;
    let mut field =
        |p: &[Point3<f64>]| Ok(p.iter().map(|q| sigmoid(-shape.sdf(q, t) / band)).collect());
    let cfg = MiseConfig {
        start_res: start.max(8),
        upsample_steps: steps,
        tau: 0.5,
    };
    let (grid, _) = mise_evaluate(&mut field, &cfg, Bounds::cube())?;
    Ok(marching_cubes(&grid))
}

/// Reference model that answers with the generating shape: a smoothed
/// indicator for occupancy and exact displacements for flow.
#[derive(Debug, Clone, Copy)]
pub struct AnalyticModel {
    pub band: f64,
}

pub struct AnalyticSequence {
    shape: DeformingShape,
    times: Vec<f64>,
    flows: Vec<Vec<Vector3<f64>>>,
}

impl SequenceModel for AnalyticModel {
    type Prepared = AnalyticSequence;

    fn prepare(&self, seq: &PointCloudSequence) -> Result<AnalyticSequence> {
        let shape = seq.shape.clone().ok_or_else(|| {
            Error::InvalidArgument(format!("sequence `{}` has no generating shape", seq.id))
        })?;
        let n = seq.points_per_frame();
        let flows = (0..seq.frames.len())
            .map(|k| {
                seq.ground_truth_displacements(k)
                    .unwrap_or_else(|| vec![Vector3::zeros(); n])
            })
            .collect();
        Ok(AnalyticSequence {
            shape,
            times: seq.times(),
            flows,
        })
    }

    fn occupancy(
        &self,
        prepared: &AnalyticSequence,
        frame: usize,
        points: &[Point3<f64>],
    ) -> Result<Vec<f64>> {
        let t = prepared.times[frame];
        Ok(points
            .iter()
            .map(|q| sigmoid(-prepared.shape.sdf(q, t) / self.band))
            .collect())
    }

    fn flow<'a>(&self, prepared: &'a AnalyticSequence, frame: usize) -> &'a [Vector3<f64>] {
        &prepared.flows[frame]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub time: f64,
    pub iou: f64,
    /// Absent when the predicted mesh is empty.
    pub chamfer: Option<f64>,
    /// Absent for the last frame and for empty predictions.
    pub correspondence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub id: String,
    pub frames: Vec<FrameMetrics>,
    pub iou: f64,
    pub chamfer: Option<f64>,
    pub correspondence: Option<f64>,
    pub n_samples: usize,
    pub seed: u64,
    pub warnings: Vec<String>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Extracts a mesh per frame and scores it against the generating shape.
pub fn evaluate_sequence<M: SequenceModel>(
    model: &M,
    seq: &PointCloudSequence,
    config: &EvalConfig,
) -> Result<SequenceMetrics> {
    let shape = seq.shape.as_ref().ok_or_else(|| {
        Error::InvalidArgument(format!("sequence `{}` has no generating shape", seq.id))
    })?;
    let extraction = extract_sequence(model, seq, &config.mise)?;
    let prepared = model.prepare(seq)?;
    let gt_meshes = seq
        .frames
        .iter()
        .map(|f| ground_truth_mesh(shape, f.time, config.gt_resolution))
        .collect::<Result<Vec<_>>>()?;
    let mut frames = Vec::with_capacity(seq.frames.len());
    for (t, frame) in seq.frames.iter().enumerate() {
        let pred = &extraction.meshes[t];
        let gt = &gt_meshes[t];
        let seed = config.seed.wrapping_add(t as u64);
        let mut bounds = gt.bounding_box().map(|(lo, hi)| Bounds {
            min: lo.coords.into(),
            max: hi.coords.into(),
        });
        if let Some((lo, hi)) = pred.bounding_box() {
            let b = Bounds {
                min: lo.coords.into(),
                max: hi.coords.into(),
            };
            bounds = Some(bounds.map_or(b, |g| g.union(&b)));
        }
        let bounds = bounds.unwrap_or_else(Bounds::cube);
        let containment = MeshContainment::new(pred);
        let time = frame.time;
        let iou = volumetric_iou(
            &mut |p: &[Point3<f64>]| p.iter().map(|q| containment.contains(q)).collect(),
            &mut |p: &[Point3<f64>]| Ok(p.iter().map(|q| shape.inside(q, time)).collect()),
            &bounds,
            config.n_samples.max(1000),
            seed,
        )?;
        let chamfer = if pred.is_empty() {
            None
        } else {
            Some(chamfer_metric(pred, gt, config.n_samples, seed)?)
        };
        let correspondence = if pred.is_empty() || t + 1 == seq.frames.len() {
            None
        } else {
            let verts = sample_vertices(pred, config.n_samples, seed)?;
            let flow = flow_at_points(&verts, &frame.points, model.flow(&prepared, t))?;
            let next = MeshDistance::new(&gt_meshes[t + 1])?;
            Some(correspondence_l2(&verts, &flow, &next)?)
        };
        frames.push(FrameMetrics {
            frame: t,
            time,
            iou,
            chamfer,
            correspondence,
        });
    }
    Ok(SequenceMetrics {
        id: seq.id.clone(),
        iou: frames.iter().map(|f| f.iou).sum::<f64>() / frames.len() as f64,
        chamfer: mean_of(frames.iter().map(|f| f.chamfer)),
        correspondence: mean_of(frames.iter().map(|f| f.correspondence)),
        frames,
        n_samples: config.n_samples,
        seed: config.seed,
        warnings: extraction.warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub iou: f64,
    pub chamfer: Option<f64>,
    pub correspondence: Option<f64>,
    pub sequences: usize,
}

impl MetricsSummary {
    pub fn of(sequences: &[SequenceMetrics]) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        Ok(MetricsSummary {
            iou: sequences.iter().map(|s| s.iou).sum::<f64>() / sequences.len() as f64,
            chamfer: mean_of(sequences.iter().map(|s| s.chamfer)),
            correspondence: mean_of(sequences.iter().map(|s| s.correspondence)),
            sequences: sequences.len(),
        })
    }
}

/// Full report written by the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub seed: u64,
    pub n_samples: usize,
    pub sequences: Vec<SequenceMetrics>,
    pub summary: MetricsSummary,
}

impl MetricsReport {
    pub fn new(sequences: Vec<SequenceMetrics>, config: &EvalConfig) -> Result<Self> {
        Ok(MetricsReport {
            schema_version: SCHEMA_VERSION,
            seed: config.seed,
            n_samples: config.n_samples,
            summary: MetricsSummary::of(&sequences)?,
            sequences,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// One row per (sequence, frame) plus one `mean` row per sequence.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            sequence: &'a str,
            frame: String,
            time: Option<f64>,
            iou: f64,
            chamfer: Option<f64>,
            correspondence: Option<f64>,
            n_samples: usize,
        }
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        for s in &self.sequences {
            for f in &s.frames {
                w.serialize(Row {
                    sequence: &s.id,
                    frame: f.frame.to_string(),
                    time: Some(f.time),
                    iou: f.iou,
                    chamfer: f.chamfer,
                    correspondence: f.correspondence,
                    n_samples: s.n_samples,
                })
                .map_err(csv_error)?;
            }
            w.serialize(Row {
                sequence: &s.id,
                frame: "mean".into(),
                time: None,
                iou: s.iou,
                chamfer: s.chamfer,
                correspondence: s.correspondence,
                n_samples: s.n_samples,
            })
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub fn evaluate_set<M: SequenceModel>(
    model: &M,
    sequences: &[PointCloudSequence],
    config: &EvalConfig,
) -> Result<Vec<SequenceMetrics>> {
    sequences
        .iter()
        .map(|s| evaluate_sequence(model, s, config))
        .collect()
}

/// Mean metrics over a validation set.
pub fn validate<M: SequenceModel>(
    model: &M,
    val_set: &[PointCloudSequence],
    config: &EvalConfig,
) -> Result<MetricsSummary> {
    MetricsSummary::of(&evaluate_set(model, val_set, config)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionRow {
    pub n_points: usize,
    pub temporal_mode: TemporalMode,
    pub iou: f64,
    pub chamfer: Option<f64>,
    pub correspondence: Option<f64>,
    pub n_samples: usize,
}

pub const STUDY_POINT_COUNTS: [usize; 5] = [50, 100, 300, 500, 1000];

/// Scores `model` on freshly sampled sequences of `shape` for every point
/// count and temporal mode.
pub fn resolution_study<M: SequenceModel>(
    model: &M,
    shape: &DeformingShape,
    point_counts: &[usize],
    modes: &[TemporalMode],
    config: &EvalConfig,
) -> Result<Vec<ResolutionRow>> {
    let mut rows = Vec::with_capacity(point_counts.len() * modes.len());
    for &n in point_counts {
        for &mode in modes {
            let seq = sample_surface_sequence(shape, n, mode, 0.0, config.seed)?;
            let m = evaluate_sequence(model, &seq, config)?;
            rows.push(ResolutionRow {
                n_points: n,
                temporal_mode: mode,
                iou: m.iou,
                chamfer: m.chamfer,
                correspondence: m.correspondence,
                n_samples: m.n_samples,
            });
        }
    }
    Ok(rows)
}

pub fn write_resolution_study(rows: &[ResolutionRow], json: &Path, csv_path: &Path) -> Result<()> {
    std::fs::write(json, serde_json::to_string_pretty(rows)?)?;
    let mut w = csv::Writer::from_path(csv_path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::ShapeFamily;

    fn ball(c: Point3<f64>, r: f64) -> impl FnMut(&[Point3<f64>]) -> Result<Vec<bool>> {
        move |p: &[Point3<f64>]| Ok(p.iter().map(|q| (q - c).norm() <= r).collect())
    }

    #[test]
    fn iou_identical_disjoint_and_empty() {
        let b = Bounds::cube();
        let o = Point3::origin();
        assert_eq!(
            volumetric_iou(&mut ball(o, 0.3), &mut ball(o, 0.3), &b, 2000, 1).unwrap(),
            1.0
        );
        let far = Point3::new(0.4, 0.0, 0.0);
        assert_eq!(
            volumetric_iou(
                &mut ball(Point3::new(-0.4, 0.0, 0.0), 0.1),
                &mut ball(far, 0.1),
                &b,
                2000,
                1
            )
            .unwrap(),
            0.0
        );
        let mut none = |p: &[Point3<f64>]| Ok(vec![false; p.len()]);
        let mut none2 = |p: &[Point3<f64>]| Ok(vec![false; p.len()]);
        assert_eq!(
            volumetric_iou(&mut none, &mut none2, &b, 1000, 1).unwrap(),
            1.0
        );
        assert!(volumetric_iou(&mut ball(o, 0.3), &mut ball(o, 0.3), &b, 999, 1).is_err());
    }

    #[test]
    fn iou_is_symmetric() {
        let b = Bounds::cube();
        let (c1, c2) = (Point3::new(0.05, 0.0, 0.0), Point3::new(-0.1, 0.02, 0.0));
        let x = volumetric_iou(&mut ball(c1, 0.2), &mut ball(c2, 0.25), &b, 5000, 3).unwrap();
        let y = volumetric_iou(&mut ball(c2, 0.25), &mut ball(c1, 0.2), &b, 5000, 3).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn chamfer_of_identical_meshes_is_zero() {
        let m = TriangleMesh::icosphere(Point3::origin(), 0.3, 2);
        assert!(chamfer_metric(&m, &m, 2000, 4).unwrap() < 1e-12);
        assert!(chamfer_metric(&TriangleMesh::default(), &m, 10, 4).is_err());
    }

    #[test]
    fn static_identity_correspondence() {
        let m = TriangleMesh::icosphere(Point3::origin(), 0.3, 3);
        let pts = sample_vertices(&m, 500, 1).unwrap();
        let zero = vec![Vector3::zeros(); pts.len()];
        let d = MeshDistance::new(&m).unwrap();
        assert!(correspondence_l2(&pts, &zero, &d).unwrap() < 1e-12);
        assert!(correspondence_l2(&pts, &zero[..10], &d).is_err());
    }

    #[test]
    fn flow_lookup_uses_nearest_input_point() {
        let input = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)];
        let flow = vec![Vector3::x(), Vector3::y()];
        let got = flow_at_points(
            &[Point3::new(0.9, 0.1, 0.0), Point3::new(0.2, 0.0, 0.0)],
            &input,
            &flow,
        )
        .unwrap();
        assert_eq!(got, vec![Vector3::y(), Vector3::x()]);
    }

    #[test]
    fn ground_truth_mesh_matches_shape() {
        let shape = DeformingShape::default_of(ShapeFamily::BreathingSphere, 2).unwrap();
        let m = ground_truth_mesh(&shape, 1.0, 64).unwrap();
        assert!(m.is_watertight());
        let v = shape.volume(1.0);
        assert!((m.signed_volume() - v).abs() / v < 0.02);
    }

    #[test]
    fn metrics_report_round_trips_and_writes_csv() {
        let frames = vec![FrameMetrics {
            frame: 0,
            time: 0.0,
            iou: 0.9,
            chamfer: Some(0.01),
            correspondence: None,
        }];
        let s = SequenceMetrics {
            id: "a".into(),
            frames,
            iou: 0.9,
            chamfer: Some(0.01),
            correspondence: None,
            n_samples: 1000,
            seed: 0,
            warnings: vec![],
        };
        let report = MetricsReport::new(vec![s], &EvalConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        report.write_json(&dir.path().join("m.json")).unwrap();
        report.write_csv(&dir.path().join("m.csv")).unwrap();
        let back: MetricsReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap())
                .unwrap();
        assert_eq!(back, report);
        let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
}
