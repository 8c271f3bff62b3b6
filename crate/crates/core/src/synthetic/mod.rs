//! Analytic deforming shapes with exact occupancy and flow, and the point-cloud
//! sequences sampled from them.

mod dataset;
pub mod io;
mod sampling;
mod shapes;

pub use dataset::DatasetSpec;
pub use sampling::{
    frame_times, ground_truth_flow, sample_occupancy_queries, sample_surface_sequence, FlowSample,
    OccupancySample, TemporalMode,
};
pub use shapes::{breathing_scale, DeformingShape, ShapeFamily, ShapeKind, SHAPE_HALF};

pub(crate) use sampling::occupancy_queries_with;

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::CUBE_HALF;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudFrame {
    pub points: Vec<Point3<f64>>,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudSequence {
    pub id: String,
    pub frames: Vec<PointCloudFrame>,
    /// Per-point identity labels, shared by every frame in the same order.
    pub correspondence_ids: Option<Vec<u32>>,
    /// Generating shape, when the sequence is synthetic.
    pub shape: Option<DeformingShape>,
    /// Noise-free rest-pose positions of each trajectory.
    pub rest_points: Option<Vec<Point3<f64>>>,
}

impl PointCloudSequence {
    pub fn new(
        id: String,
        frames: Vec<PointCloudFrame>,
        correspondence_ids: Option<Vec<u32>>,
        shape: Option<DeformingShape>,
        rest_points: Option<Vec<Point3<f64>>>,
    ) -> Result<Self> {
        let seq = PointCloudSequence {
            id,
            frames,
            correspondence_ids,
            shape,
            rest_points,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Empty("sequence"));
        }
        for (k, f) in self.frames.iter().enumerate() {
            if f.points.is_empty() {
                return Err(Error::EmptyPointSet);
            }
            if !f.time.is_finite() {
                return Err(Error::NonFinite(format!("time of frame {k}")));
            }
            if f.points.iter().any(|p| {
                p.coords
                    .iter()
                    .any(|c| !c.is_finite() || c.abs() > CUBE_HALF)
            }) {
                return Err(Error::InvalidArgument(format!(
                    "frame {k} has points outside the working cube"
                )));
            }
        }
        if self.frames.windows(2).any(|w| w[1].time <= w[0].time) {
            return Err(Error::InvalidArgument(
                "frame times must strictly increase".into(),
            ));
        }
        if let Some(ids) = &self.correspondence_ids {
            if self.frames.iter().any(|f| f.points.len() != ids.len()) {
                return Err(Error::mismatch(
                    "sequence",
                    "correspondence ids do not match frame sizes",
                ));
            }
        }
        if let Some(rest) = &self.rest_points {
            if rest.len() != self.frames[0].points.len() {
                return Err(Error::mismatch(
                    "sequence",
                    "rest points do not match frame size",
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.time).collect()
    }

    pub fn points_per_frame(&self) -> usize {
        self.frames[0].points.len()
    }

    /// Noise-free positions of every trajectory at time `t`, when the
    /// generating shape is known.
    pub fn clean_points_at(&self, t: f64) -> Option<Vec<Point3<f64>>> {
        let shape = self.shape.as_ref()?;
        let rest = self.rest_points.as_ref()?;
        let flow = ground_truth_flow(shape, rest, 0.0, t).ok()?;
        Some(flow.into_iter().map(|f| f.point_t_next).collect())
    }

    /// Exact per-trajectory displacement from frame `k` to frame `k + 1`.
    pub fn ground_truth_displacements(&self, k: usize) -> Option<Vec<Vector3<f64>>> {
        let a = self.clean_points_at(self.frames[k].time)?;
        let b = self.clean_points_at(self.frames.get(k + 1)?.time)?;
        Some(a.iter().zip(&b).map(|(p, q)| q - p).collect())
    }

    /// Same sequence in reverse time order with times mapped to `1 - t`.
    pub fn reversed(&self) -> PointCloudSequence {
        PointCloudSequence {
            id: format!("{}_reversed", self.id),
            frames: self
                .frames
                .iter()
                .rev()
                .map(|f| PointCloudFrame {
                    points: f.points.clone(),
                    time: 1.0 - f.time,
                })
                .collect(),
            correspondence_ids: self.correspondence_ids.clone(),
            shape: None,
            rest_points: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clean_points_reproduce_noise_free_frames() {
        for f in ShapeFamily::ALL {
            let shape = DeformingShape::default_of(f, 6).unwrap();
            let seq = sample_surface_sequence(&shape, 100, TemporalMode::Even, 0.0, 4).unwrap();
            for fr in &seq.frames {
                let clean = seq.clean_points_at(fr.time).unwrap();
                for (a, b) in clean.iter().zip(&fr.points) {
                    assert!((a - b).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let shape = DeformingShape::default_of(ShapeFamily::ArticulatedDumbbell, 8).unwrap();
        let a = sample_surface_sequence(&shape, 300, TemporalMode::Uneven, 0.01, 11).unwrap();
        let b = sample_surface_sequence(&shape, 300, TemporalMode::Uneven, 0.01, 11).unwrap();
        assert_eq!(a, b);
        let c = sample_surface_sequence(&shape, 300, TemporalMode::Uneven, 0.01, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn reversed_sequence_is_valid() {
        let shape = DeformingShape::default_of(ShapeFamily::TwoLobeCapsule, 5).unwrap();
        let seq = sample_surface_sequence(&shape, 50, TemporalMode::Uneven, 0.0, 2).unwrap();
        let r = seq.reversed();
        r.validate().unwrap();
        assert_eq!(r.frames[0].points, seq.frames[4].points);
    }

    #[test]
    fn surface_samples_sit_on_the_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for f in ShapeFamily::ALL {
            let shape = DeformingShape::default_of(f, 4).unwrap();
            for (p, n) in shape.sample_surface_at(0.6, 200, &mut rng) {
                assert!(shape.sdf(&p, 0.6).abs() < 1e-9);
                assert!((n.norm() - 1.0).abs() < 1e-12);
            }
        }
    }
}
