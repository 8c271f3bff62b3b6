//! The full network: encoders, fusion and both decoders over one parameter
//! store, with batched training-time forward passes and chunked inference.

use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoders::{MotionOutput, OccupancyDecoder, TemporalDecoder};
use crate::encoders::{
    check_sequence, stack_points, BatchLayout, SpatialCodes, SpatialEncoder, TemporalCodes,
    TemporalEncoder,
};
use crate::error::{Error, Result};
use crate::fusion::{FusedCodes, Fusion, FusionMode};
use crate::nn::{Graph, Matrix, Mode, ParamStore, Segments, Var};
use crate::synthetic::PointCloudSequence;

/// Query rows evaluated per graph during inference.
pub const INFERENCE_CHUNK: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width of every trunk.
    pub width: usize,
    /// Width `C` of the spatial, temporal and fused codes.
    pub channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 128,
            channels: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub heads: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: FusionMode::DualCrossAttn,
            heads: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub fusion_config: FusionConfig,
    pub store: ParamStore,
    pub spatial: SpatialEncoder,
    pub temporal: TemporalEncoder,
    pub fusion: Fusion,
    pub flow: TemporalDecoder,
    pub occupancy: OccupancyDecoder,
}

/// Everything computed up to `e_t` for a batch of sequences.
#[derive(Debug, Clone)]
pub struct Encoding {
    pub layout: BatchLayout,
    /// `(x, y, z)` rows of every frame.
    pub points: Var,
    pub spatial: SpatialCodes,
    pub temporal: TemporalCodes,
    pub fused: FusedCodes,
}

impl Model {
    pub fn new(config: ModelConfig, fusion_config: FusionConfig, seed: u64) -> Result<Self> {
        if config.width == 0 || config.channels == 0 {
            return Err(Error::InvalidArgument(
                "model widths must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (w, c) = (config.width, config.channels);
        let spatial = SpatialEncoder::new(&mut store, w, c, &mut rng)?;
        let temporal = TemporalEncoder::new(&mut store, w, c, &mut rng)?;
        let fusion = Fusion::new(
            &mut store,
            fusion_config.mode,
            c,
            fusion_config.heads,
            &mut rng,
        )?;
        let flow = TemporalDecoder::new(&mut store, c, w, &mut rng)?;
        let occupancy = OccupancyDecoder::new(&mut store, c, w, &mut rng)?;
        Ok(Model {
            config,
            fusion_config,
            store,
            spatial,
            temporal,
            fusion,
            flow,
            occupancy,
        })
    }

    /// Number of sequences the temporal encoder has processed.
    pub fn temporal_encodings(&self) -> usize {
        self.temporal.sequences_encoded()
    }

    pub fn encode(&self, g: &mut Graph, seqs: &[&PointCloudSequence]) -> Result<Encoding> {
        for s in seqs {
            check_sequence(s)?;
        }
        let layout = BatchLayout::new(seqs)?;
        let points = g.input(stack_points(seqs, false));
        let spatial = self.spatial.forward(g, &self.store, points, &layout)?;
        self.finish_encoding(g, seqs, layout, points, spatial)
    }

    /// Encodes the time-reversed batch. Spatial tokens of `forward` are reused
    /// after reordering its frames; the temporal encoder runs again since the
    /// time coordinate changes.
    pub fn encode_reversed(
        &self,
        g: &mut Graph,
        forward: &Encoding,
        reversed: &[&PointCloudSequence],
    ) -> Result<Encoding> {
        let layout = BatchLayout::new(reversed)?;
        let (frame_perm, row_perm) = reversal_permutation(&forward.layout);
        if layout.frame_points.total() != row_perm.len() {
            return Err(Error::mismatch(
                "reversed batch",
                "point counts differ from the forward batch",
            ));
        }
        let points = g.gather_rows(forward.points, &row_perm)?;
        let spatial = SpatialCodes {
            tokens: g.gather_rows(forward.spatial.tokens, &row_perm)?,
            codes: g.gather_rows(forward.spatial.codes, &frame_perm)?,
        };
        self.finish_encoding(g, reversed, layout, points, spatial)
    }

    fn finish_encoding(
        &self,
        g: &mut Graph,
        seqs: &[&PointCloudSequence],
        layout: BatchLayout,
        points: Var,
        spatial: SpatialCodes,
    ) -> Result<Encoding> {
        let timed = g.input(stack_points(seqs, true));
        let temporal = self.temporal.forward(g, &self.store, timed, &layout)?;
        let fused = self
            .fusion
            .forward(g, &self.store, &spatial, &temporal, &layout)?;
        Ok(Encoding {
            layout,
            points,
            spatial,
            temporal,
            fused,
        })
    }

    pub fn decode_motion(&self, g: &mut Graph, enc: &Encoding) -> Result<MotionOutput> {
        self.flow
            .forward(g, &self.store, enc.points, enc.fused.codes, &enc.layout)
    }

    /// Occupancy probabilities of `queries`, grouped per frame by `segments`.
    pub fn decode_occupancy(
        &self,
        g: &mut Graph,
        enc: &Encoding,
        motion: &MotionOutput,
        queries: Var,
        segments: &Segments,
        mode: Mode,
    ) -> Result<Var> {
        self.occupancy.forward(
            g,
            &self.store,
            queries,
            segments,
            enc.fused.codes,
            motion.pooled,
            mode,
        )
    }

    /// Per-frame codes, pooled flow features and flows of one sequence,
    /// detached from any graph.
    pub fn infer(&self, seq: &PointCloudSequence) -> Result<SequenceInference> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, &[seq])?;
        let motion = self.decode_motion(&mut g, &enc)?;
        let flow = g.value(motion.flow);
        let mut flows = Vec::with_capacity(seq.frames.len());
        for rows in enc.layout.frame_points.iter() {
            flows.push(
                rows.map(|r| {
                    let v = flow.row(r);
                    Vector3::new(v[0], v[1], v[2])
                })
                .collect(),
            );
        }
        Ok(SequenceInference {
            codes: g.value(enc.fused.codes).clone(),
            pooled: g.value(motion.pooled).clone(),
            flows,
            times: seq.times(),
        })
    }

    /// Eval-mode occupancy probabilities of frame `frame` at `points`.
    pub fn occupancy_at(
        &self,
        inf: &SequenceInference,
        frame: usize,
        points: &[Point3<f64>],
    ) -> Result<Vec<f64>> {
        if frame >= inf.codes.rows() {
            return Err(Error::InvalidArgument(format!(
                "frame {frame} out of range"
            )));
        }
        let code = Matrix::from_vec(1, inf.codes.cols(), inf.codes.row(frame).to_vec())?;
        let pooled = Matrix::from_vec(1, inf.pooled.cols(), inf.pooled.row(frame).to_vec())?;
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let q = g.input(points_matrix(chunk));
            let c = g.input(code.clone());
            let f = g.input(pooled.clone());
            let p = self.occupancy.forward(
                &mut g,
                &self.store,
                q,
                &Segments::single(chunk.len()),
                c,
                f,
                Mode::Eval,
            )?;
            out.extend_from_slice(g.value(p).data());
        }
        Ok(out)
    }
}

/// Anything that yields, for a sequence, occupancy probabilities at arbitrary
/// points of each frame and a displacement for each input point.
pub trait SequenceModel {
    type Prepared;

    fn prepare(&self, seq: &PointCloudSequence) -> Result<Self::Prepared>;

    fn occupancy(
        &self,
        prepared: &Self::Prepared,
        frame: usize,
        points: &[Point3<f64>],
    ) -> Result<Vec<f64>>;

    /// Displacement of every input point of `frame` towards the next frame.
    fn flow<'a>(&self, prepared: &'a Self::Prepared, frame: usize) -> &'a [Vector3<f64>];
}

impl SequenceModel for Model {
    type Prepared = SequenceInference;

    fn prepare(&self, seq: &PointCloudSequence) -> Result<SequenceInference> {
        self.infer(seq)
    }

    fn occupancy(
        &self,
        prepared: &SequenceInference,
        frame: usize,
        points: &[Point3<f64>],
    ) -> Result<Vec<f64>> {
        self.occupancy_at(prepared, frame, points)
    }

    fn flow<'a>(&self, prepared: &'a SequenceInference, frame: usize) -> &'a [Vector3<f64>] {
        &prepared.flows[frame]
    }
}

/// Detached per-sequence inference results.
#[derive(Debug, Clone)]
pub struct SequenceInference {
    /// `e_t`, one row per frame.
    pub codes: Matrix,
    /// Pooled flow features, one row per frame.
    pub pooled: Matrix,
    /// Predicted displacement of every input point of every frame.
    pub flows: Vec<Vec<Vector3<f64>>>,
    pub times: Vec<f64>,
}

/// Frame and point-row permutations taking a batch to its time-reversed
/// order, sequence by sequence.
pub fn reversal_permutation(layout: &BatchLayout) -> (Vec<usize>, Vec<usize>) {
    let mut frames = Vec::with_capacity(layout.frames());
    let mut rows = Vec::with_capacity(layout.frame_points.total());
    for s in 0..layout.sequences() {
        for f in layout.sequence_frames.range(s).rev() {
            frames.push(f);
            rows.extend(layout.frame_points.range(f));
        }
    }
    (frames, rows)
}

pub fn points_matrix(points: &[Point3<f64>]) -> Matrix {
    let data = points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    Matrix::from_vec(points.len(), 3, data).expect("n x 3")
}
