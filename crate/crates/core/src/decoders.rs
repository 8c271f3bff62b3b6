//! Temporal (flow) decoder and conditional occupancy decoder.

use rand::Rng;

use crate::encoders::{BatchLayout, STAGES};
use crate::error::{Error, Result};
use crate::nn::{CbnLayer, CbnResBlock, Graph, Linear, Mode, ParamStore, ResBlock, Segments, Var};

/// Maps each point of frame `t`, together with the reference code and `e_t`,
/// to a displacement towards frame `t + 1`.
#[derive(Debug, Clone)]
pub struct TemporalDecoder {
    pub lift: Linear,
    pub blocks: Vec<ResBlock>,
    pub head: Linear,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct MotionOutput {
    /// `V_t`, one displacement row per input point.
    pub flow: Var,
    /// `f_t`, per-point trunk features.
    pub features: Var,
    /// Max of `f_t` over each frame's points.
    pub pooled: Var,
}

impl TemporalDecoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        channels: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TemporalDecoder {
            lift: Linear::new(store, "flow.lift", 3 + 2 * channels, width, true, rng)?,
            blocks: (0..STAGES)
                .map(|i| ResBlock::new(store, &format!("flow.block{i}"), width, width, rng))
                .collect::<Result<_>>()?,
            head: Linear::zeros(store, "flow.head", width, 3)?,
            channels,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        points: Var,
        codes: Var,
        layout: &BatchLayout,
    ) -> Result<MotionOutput> {
        if g.shape(codes).1 != self.channels {
            return Err(Error::mismatch(
                "temporal decoder",
                format!("code width {} vs {}", g.shape(codes).1, self.channels),
            ));
        }
        if g.shape(points).0 == 0 {
            return Err(Error::EmptyPointSet);
        }
        let reference = g.gather_rows(codes, &layout.reference_frame)?;
        let reference = g.segment_broadcast(reference, &layout.frame_points)?;
        let current = g.segment_broadcast(codes, &layout.frame_points)?;
        let input = g.concat_cols(&[points, reference, current])?;
        let mut x = self.lift.forward(g, store, input)?;
        for b in &self.blocks {
            x = b.forward(g, store, x)?;
        }
        let a = g.relu(x);
        let flow = self.head.forward(g, store, a)?;
        let pooled = g.segment_max(x, &layout.frame_points)?;
        Ok(MotionOutput {
            flow,
            features: x,
            pooled,
        })
    }
}

/// Occupancy logits for query points, conditioned on `e_t` through CBN and
/// on the pooled flow features before the last normalization.
#[derive(Debug, Clone)]
pub struct OccupancyDecoder {
    pub lift: Linear,
    pub blocks: Vec<CbnResBlock>,
    pub final_bn: CbnLayer,
    pub head: Linear,
    pub channels: usize,
    pub width: usize,
}

impl OccupancyDecoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        channels: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(OccupancyDecoder {
            lift: Linear::new(store, "occ.lift", 3, width, true, rng)?,
            blocks: (0..STAGES)
                .map(|i| CbnResBlock::new(store, &format!("occ.block{i}"), channels, width, rng))
                .collect::<Result<_>>()?,
            final_bn: CbnLayer::new(store, "occ.final_bn", channels, 2 * width)?,
            head: Linear::zeros(store, "occ.head", 2 * width, 1)?,
            channels,
            width,
        })
    }

    /// `queries` rows are grouped per frame by `query_segments`; `codes` and
    /// `flow_pooled` hold one row per frame.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        query_segments: &Segments,
        codes: Var,
        flow_pooled: Var,
        mode: Mode,
    ) -> Result<Var> {
        if g.shape(queries).0 == 0 {
            return Err(Error::Empty("query set"));
        }
        if g.shape(codes).1 != self.channels {
            return Err(Error::mismatch(
                "occupancy decoder",
                format!("code width {} vs {}", g.shape(codes).1, self.channels),
            ));
        }
        let mut x = self.lift.forward(g, store, queries)?;
        for b in &self.blocks {
            x = b.forward(g, store, x, codes, query_segments, mode)?;
        }
        let f = g.segment_broadcast(flow_pooled, query_segments)?;
        let cat = g.concat_cols(&[x, f])?;
        let h = self
            .final_bn
            .forward(g, store, cat, codes, query_segments, mode)?;
        let h = g.relu(h);
        self.head.forward(g, store, h)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        query_segments: &Segments,
        codes: Var,
        flow_pooled: Var,
        mode: Mode,
    ) -> Result<Var> {
        let logits = self.logits(g, store, queries, query_segments, codes, flow_pooled, mode)?;
        Ok(g.sigmoid(logits))
    }
}
