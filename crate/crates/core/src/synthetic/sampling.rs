use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::shapes::{DeformingShape, Part};
use super::{PointCloudFrame, PointCloudSequence};
use crate::error::{Error, Result};
use crate::geometry::CUBE_HALF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    Even,
    Uneven,
}

impl TemporalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "even" => Ok(TemporalMode::Even),
            "uneven" => Ok(TemporalMode::Uneven),
            _ => Err(Error::InvalidArgument(format!(
                "unknown temporal mode `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancySample {
    pub point: Point3<f64>,
    pub time: f64,
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowSample {
    pub point_t: Point3<f64>,
    pub point_t_next: Point3<f64>,
    pub time: f64,
}

impl FlowSample {
    pub fn displacement(&self) -> Vector3<f64> {
        self.point_t_next - self.point_t
    }
}

/// Surface point in rest coordinates, tagged with the part it belongs to.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RestSample {
    pub part: usize,
    pub point: Point3<f64>,
    pub normal: Vector3<f64>,
}

/// Area-uniform samples on the rest-pose surface of the union of primitives.
pub(crate) fn sample_rest_surface<R: Rng>(
    parts: &[Part],
    n: usize,
    rng: &mut R,
) -> Vec<RestSample> {
    let prims: Vec<(usize, _)> = parts
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.primitives.iter().map(move |q| (i, *q)))
        .collect();
    let total: f64 = prims.iter().map(|(_, q)| q.area()).sum();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut r = rng.gen::<f64>() * total;
        let mut pick = prims.len() - 1;
        for (k, (_, q)) in prims.iter().enumerate() {
            if r < q.area() {
                pick = k;
                break;
            }
            r -= q.area();
        }
        let (part, q) = prims[pick];
        let (point, normal) = q.sample_surface(rng);
        // drop points buried inside another primitive of the same part
        let buried = parts[part]
            .primitives
            .iter()
            .any(|o| *o != q && o.sdf(&point) < -1e-12);
        if !buried {
            out.push(RestSample {
                part,
                point,
                normal,
            });
        }
    }
    out
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Frame times in `[0, 1]`; uneven mode keeps both endpoints.
pub fn frame_times(frames: usize, mode: TemporalMode, seed: u64) -> Vec<f64> {
    match mode {
        TemporalMode::Even => (0..frames)
            .map(|k| k as f64 / (frames - 1) as f64)
            .collect(),
        TemporalMode::Uneven => {
            let mut rng = stream(seed, 1);
            loop {
                let mut t: Vec<f64> = (0..frames.saturating_sub(2))
                    .map(|_| rng.gen::<f64>())
                    .collect();
                t.push(0.0);
                t.push(1.0);
                t.sort_by(f64::total_cmp);
                if t.windows(2).all(|w| w[1] - w[0] > 1e-6) {
                    return t;
                }
            }
        }
    }
}

impl DeformingShape {
    /// Maps rest-pose samples to their positions at time `t`.
    pub(crate) fn place(&self, parts: &[Part], rest: &[RestSample], t: f64) -> Vec<Point3<f64>> {
        let maps: Vec<_> = parts.iter().map(|p| p.transform(t)).collect();
        rest.iter().map(|s| maps[s.part].apply(&s.point)).collect()
    }

    /// Surface samples at time `t` with outward unit normals.
    pub fn sample_surface_at<R: Rng>(
        &self,
        t: f64,
        n: usize,
        rng: &mut R,
    ) -> Vec<(Point3<f64>, Vector3<f64>)> {
        let parts = self.parts();
        let rest = sample_rest_surface(&parts, n, rng);
        let maps: Vec<_> = parts.iter().map(|p| p.transform(t)).collect();
        rest.iter()
            .map(|s| {
                (
                    maps[s.part].apply(&s.point),
                    maps[s.part].apply_vector(&s.normal),
                )
            })
            .collect()
    }
}

/// Point-cloud sequence of `shape.frames` frames, each carrying the same
/// `n_points` surface trajectories (ids `0..n_points`) plus independent
/// Gaussian jitter of scale `noise_sigma`.
pub fn sample_surface_sequence(
    shape: &DeformingShape,
    n_points: usize,
    temporal_mode: TemporalMode,
    noise_sigma: f64,
    seed: u64,
) -> Result<PointCloudSequence> {
    if n_points < 10 {
        return Err(Error::InvalidArgument(
            "need at least 10 points per frame".into(),
        ));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(
            "noise sigma must be a finite value >= 0".into(),
        ));
    }
    let shape = DeformingShape::new(shape.kind.clone(), shape.frames)?;
    let parts = shape.parts();
    let rest = sample_rest_surface(&parts, n_points, &mut stream(seed, 0));
    let times = frame_times(shape.frames, temporal_mode, seed);
    let mut noise_rng = stream(seed, 2);
    let normal = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let frames = times
        .iter()
        .map(|&t| {
            let mut points = shape.place(&parts, &rest, t);
            if noise_sigma > 0.0 {
                for p in &mut points {
                    for a in 0..3 {
                        p[a] = (p[a] + normal.sample(&mut noise_rng)).clamp(-CUBE_HALF, CUBE_HALF);
                    }
                }
            }
            PointCloudFrame { points, time: t }
        })
        .collect();
    PointCloudSequence::new(
        format!("{}_{seed}", shape.family().name()),
        frames,
        Some((0..n_points as u32).collect()),
        Some(shape.clone()),
        Some(rest.iter().map(|s| s.point).collect()),
    )
}

/// Occupancy queries at time `time`: uniform in the working cube plus surface
/// samples with isotropic Gaussian jitter of scale `band`.
pub fn sample_occupancy_queries(
    shape: &DeformingShape,
    time: f64,
    n_uniform: usize,
    n_near_surface: usize,
    band: f64,
    seed: u64,
) -> Result<Vec<OccupancySample>> {
    if n_uniform + n_near_surface == 0 {
        return Err(Error::InvalidArgument("need at least one query".into()));
    }
    if !(band > 0.0) {
        return Err(Error::InvalidArgument("band must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(occupancy_queries_with(
        shape,
        time,
        n_uniform,
        n_near_surface,
        band,
        &mut rng,
    ))
}

pub(crate) fn occupancy_queries_with<R: Rng>(
    shape: &DeformingShape,
    time: f64,
    n_uniform: usize,
    n_near_surface: usize,
    band: f64,
    rng: &mut R,
) -> Vec<OccupancySample> {
    let mut out = Vec::with_capacity(n_uniform + n_near_surface);
    for _ in 0..n_uniform {
        let p = Point3::new(
            rng.gen_range(-CUBE_HALF..CUBE_HALF),
            rng.gen_range(-CUBE_HALF..CUBE_HALF),
            rng.gen_range(-CUBE_HALF..CUBE_HALF),
        );
        out.push(OccupancySample {
            point: p,
            time,
            label: shape.inside(&p, time),
        });
    }
    let normal = Normal::new(0.0, band).expect("positive band");
    for (s, _) in shape.sample_surface_at(time, n_near_surface, rng) {
        let mut p = s;
        for a in 0..3 {
            p[a] = (p[a] + normal.sample(rng)).clamp(-CUBE_HALF, CUBE_HALF);
        }
        out.push(OccupancySample {
            point: p,
            time,
            label: shape.inside(&p, time),
        });
    }
    out
}

/// Exact images at `t_to` of points lying inside or on the shape at `t_from`.
pub fn ground_truth_flow(
    shape: &DeformingShape,
    points: &[Point3<f64>],
    t_from: f64,
    t_to: f64,
) -> Result<Vec<FlowSample>> {
    let parts = shape.parts();
    let from: Vec<_> = parts.iter().map(|p| p.transform(t_from)).collect();
    let to: Vec<_> = parts.iter().map(|p| p.transform(t_to)).collect();
    let mut bad = Vec::new();
    let mut out = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        // parts are disjoint, so at most one owns the point
        let owner = (0..parts.len())
            .map(|k| (k, parts[k].sdf_at(p, t_from)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match owner {
            Some((k, d)) if d <= 1e-9 => {
                let rest = from[k].inverse_apply(p);
                out.push(FlowSample {
                    point_t: *p,
                    point_t_next: to[k].apply(&rest),
                    time: t_from,
                });
            }
            _ => bad.push(i),
        }
    }
    if !bad.is_empty() {
        return Err(Error::OutsideSupport(bad));
    }
    Ok(out)
}
