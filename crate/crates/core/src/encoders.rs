//! Pooled residual point networks: a per-frame spatial encoder over `(x, y, z)`
//! and a whole-sequence temporal encoder over `(x, y, z, t)`.
//!
//! Both share one trunk: a per-point lift to width `W`, then five stages that
//! each concatenate the segment max onto every point feature before a
//! residual block `2W -> W`, and a final per-point projection to `C` channels.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, Matrix, ParamStore, ResBlock, Segments, Var};
use crate::synthetic::PointCloudSequence;

pub const STAGES: usize = 5;

#[derive(Debug, Clone)]
pub struct PointNetTrunk {
    lift: Linear,
    blocks: Vec<ResBlock>,
    out: Linear,
}

impl PointNetTrunk {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        width: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let lift = Linear::new(store, &format!("{name}.lift"), in_dim, width, true, rng)?;
        let blocks = (0..STAGES)
            .map(|i| ResBlock::new(store, &format!("{name}.block{i}"), 2 * width, width, rng))
            .collect::<Result<_>>()?;
        let out = Linear::new(store, &format!("{name}.out"), width, channels, true, rng)?;
        Ok(PointNetTrunk { lift, blocks, out })
    }

    /// Per-point tokens; max pooling inside the trunk is restricted to `pool`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        points: Var,
        pool: &Segments,
    ) -> Result<Var> {
        if pool.iter().any(|r| r.len() < 2) {
            return Err(Error::InvalidArgument(
                "pooling needs at least 2 points".into(),
            ));
        }
        let mut x = self.lift.forward(g, store, points)?;
        for block in &self.blocks {
            let pooled = g.segment_max(x, pool)?;
            let spread = g.segment_broadcast(pooled, pool)?;
            let cat = g.concat_cols(&[x, spread])?;
            x = block.forward(g, store, cat)?;
        }
        self.out.forward(g, store, x)
    }
}

/// Row layout shared by the encoders, fusion and decoders for a batch of
/// sequences: rows are sequence-major, then frame-major, then point-major.
#[derive(Debug, Clone)]
pub struct BatchLayout {
    /// One segment of point rows per frame.
    pub frame_points: Segments,
    /// One segment of point rows per sequence.
    pub sequence_points: Segments,
    /// One segment of frame rows per sequence.
    pub sequence_frames: Segments,
    /// Frame row of each frame's sequence reference frame (its first frame).
    pub reference_frame: Vec<usize>,
    /// Sequence index of every frame row.
    pub frame_sequence: Vec<usize>,
}

impl BatchLayout {
    pub fn new(seqs: &[&PointCloudSequence]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut frame_lengths = Vec::new();
        let mut seq_lengths = Vec::new();
        let mut seq_frames = Vec::new();
        let mut reference_frame = Vec::new();
        let mut frame_sequence = Vec::new();
        for (s, seq) in seqs.iter().enumerate() {
            let first = frame_lengths.len();
            for f in &seq.frames {
                frame_lengths.push(f.points.len());
                reference_frame.push(first);
                frame_sequence.push(s);
            }
            seq_lengths.push(seq.frames.iter().map(|f| f.points.len()).sum());
            seq_frames.push(seq.frames.len());
        }
        Ok(BatchLayout {
            frame_points: Segments::from_lengths(&frame_lengths),
            sequence_points: Segments::from_lengths(&seq_lengths),
            sequence_frames: Segments::from_lengths(&seq_frames),
            reference_frame,
            frame_sequence,
        })
    }

    pub fn frames(&self) -> usize {
        self.frame_points.count()
    }

    pub fn sequences(&self) -> usize {
        self.sequence_frames.count()
    }
}

/// Point coordinates of every frame, optionally with the frame time appended.
pub fn stack_points(seqs: &[&PointCloudSequence], with_time: bool) -> Matrix {
    let d = if with_time { 4 } else { 3 };
    let mut data = Vec::new();
    for seq in seqs {
        for f in &seq.frames {
            for p in &f.points {
                data.extend_from_slice(&[p.x, p.y, p.z]);
                if with_time {
                    data.push(f.time);
                }
            }
        }
    }
    let rows = data.len() / d;
    Matrix::from_vec(rows, d, data).expect("stacked points")
}

#[derive(Debug, Clone)]
pub struct SpatialEncoder {
    pub trunk: PointNetTrunk,
}

#[derive(Debug, Clone, Copy)]
pub struct SpatialCodes {
    /// Per-point tokens, `M x C`.
    pub tokens: Var,
    /// Per-frame codes `S_t`, `F x C`.
    pub codes: Var,
}

impl SpatialEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        width: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(SpatialEncoder {
            trunk: PointNetTrunk::new(store, "spatial", 3, width, channels, rng)?,
        })
    }

    /// Encodes every frame independently; `points` holds `(x, y, z)` rows.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        points: Var,
        layout: &BatchLayout,
    ) -> Result<SpatialCodes> {
        let tokens = self.trunk.forward(g, store, points, &layout.frame_points)?;
        let codes = g.segment_max(tokens, &layout.frame_points)?;
        Ok(SpatialCodes { tokens, codes })
    }
}

#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    pub trunk: PointNetTrunk,
    calls: Arc<AtomicUsize>,
}

#[derive(Debug, Clone, Copy)]
pub struct TemporalCodes {
    /// Per-frame pooled tokens, `F x C`.
    pub frame_tokens: Var,
    /// Sequence code `h`, one row per sequence.
    pub code: Var,
}

impl TemporalEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        width: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TemporalEncoder {
            trunk: PointNetTrunk::new(store, "temporal", 4, width, channels, rng)?,
            calls: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// Number of sequences encoded so far.
    pub fn sequences_encoded(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Encodes each sequence once; `points` holds `(x, y, z, t)` rows.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        points: Var,
        layout: &BatchLayout,
    ) -> Result<TemporalCodes> {
        self.calls.fetch_add(layout.sequences(), Ordering::Relaxed);
        let tokens = self
            .trunk
            .forward(g, store, points, &layout.sequence_points)?;
        let frame_tokens = g.segment_max(tokens, &layout.frame_points)?;
        let code = g.segment_max(frame_tokens, &layout.sequence_frames)?;
        Ok(TemporalCodes { frame_tokens, code })
    }
}

/// Checks the encoder preconditions of a sequence.
pub fn check_sequence(seq: &PointCloudSequence) -> Result<()> {
    if seq.frames.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "sequence `{}` has fewer than 2 frames",
            seq.id
        )));
    }
    if seq.frames.windows(2).any(|w| w[1].time <= w[0].time) {
        return Err(Error::InvalidArgument(format!(
            "sequence `{}` has non-increasing times",
            seq.id
        )));
    }
    if seq.frames.iter().any(|f| f.points.len() < 2) {
        return Err(Error::InvalidArgument(format!(
            "sequence `{}` has a frame with fewer than 2 points",
            seq.id
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{sample_surface_sequence, DeformingShape, ShapeFamily, TemporalMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (
        ParamStore,
        SpatialEncoder,
        TemporalEncoder,
        PointCloudSequence,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let s = SpatialEncoder::new(&mut store, 16, 8, &mut rng).unwrap();
        let t = TemporalEncoder::new(&mut store, 16, 8, &mut rng).unwrap();
        let shape = DeformingShape::default_of(ShapeFamily::TwoLobeCapsule, 4).unwrap();
        let seq = sample_surface_sequence(&shape, 20, TemporalMode::Even, 0.0, 2).unwrap();
        (store, s, t, seq)
    }

    #[test]
    fn spatial_code_is_permutation_invariant() {
        let (store, enc, _, seq) = setup();
        let mut perm = seq.clone();
        for f in &mut perm.frames {
            f.points.reverse();
        }
        let run = |seq: &PointCloudSequence| {
            let layout = BatchLayout::new(&[seq]).unwrap();
            let mut g = Graph::new();
            let p = g.input(stack_points(&[seq], false));
            let out = enc.forward(&mut g, &store, p, &layout).unwrap();
            (g.value(out.codes).clone(), g.value(out.tokens).clone())
        };
        let (a, ta) = run(&seq);
        let (b, tb) = run(&perm);
        assert_eq!(a, b);
        // tokens follow the permutation exactly
        assert_eq!(ta.row(0), tb.row(19));
    }

    #[test]
    fn temporal_encoder_counts_sequences() {
        let (store, _, enc, seq) = setup();
        let layout = BatchLayout::new(&[&seq, &seq]).unwrap();
        let mut g = Graph::new();
        let p = g.input(stack_points(&[&seq, &seq], true));
        let out = enc.forward(&mut g, &store, p, &layout).unwrap();
        assert_eq!(enc.sequences_encoded(), 2);
        assert_eq!(g.shape(out.frame_tokens), (8, 8));
        assert_eq!(g.shape(out.code), (2, 8));
        assert_eq!(g.value(out.code).row(0), g.value(out.code).row(1));
    }

    #[test]
    fn single_point_frames_are_rejected() {
        let (store, enc, _, mut seq) = setup();
        for f in &mut seq.frames {
            f.points.truncate(1);
        }
        seq.correspondence_ids = None;
        seq.rest_points = None;
        assert!(check_sequence(&seq).is_err());
        let layout = BatchLayout::new(&[&seq]).unwrap();
        let mut g = Graph::new();
        let p = g.input(stack_points(&[&seq], false));
        assert!(enc.forward(&mut g, &store, p, &layout).is_err());
    }
}
