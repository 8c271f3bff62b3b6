//! Fusion of spatial and temporal codes into the per-frame code `e_t`.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{BatchLayout, SpatialCodes, TemporalCodes};
use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Concat,
    SingleCrossAttn,
    DualCrossAttn,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [
        FusionMode::Concat,
        FusionMode::SingleCrossAttn,
        FusionMode::DualCrossAttn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FusionMode::Concat => "concat",
            FusionMode::SingleCrossAttn => "single_cross_attn",
            FusionMode::DualCrossAttn => "dual_cross_attn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown fusion mode `{s}`")))
    }
}

/// Scaled dot-product attention on already projected rows. Row `r` of `q`
/// attends to the rows `mask[r]` of `k`/`v`. Returns the output and the
/// weight matrix of every head.
pub fn attend(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&[Range<usize>]>,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let c = g.shape(q).1;
    if g.shape(k).0 == 0 {
        return Err(Error::Empty("key rows"));
    }
    if g.shape(k).1 != c || g.shape(v).0 != g.shape(k).0 {
        return Err(Error::mismatch(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", g.shape(q), g.shape(k), g.shape(v)),
        ));
    }
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::InvalidArgument(format!(
            "{c} channels cannot split into {heads} heads"
        )));
    }
    let d = c / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            let cols = h * d..(h + 1) * d;
            let vd = g.shape(v).1 / heads;
            (
                g.slice_cols(q, cols.clone())?,
                g.slice_cols(k, cols)?,
                g.slice_cols(v, h * vd..(h + 1) * vd)?,
            )
        };
        let logits = g.matmul_nt(qh, kh)?;
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
        let w = g.softmax_rows(logits, mask)?;
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    Ok((out, weights))
}

/// Layer normalization followed by query/key/value projections and attention.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub heads: usize,
    pub eps: f64,
}

impl CrossAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(CrossAttention {
            q: Linear::new(store, &format!("{name}.q"), channels, channels, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), channels, channels, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), channels, channels, true, rng)?,
            heads,
            eps: 1e-5,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        mask: Option<&[Range<usize>]>,
    ) -> Result<(Var, Vec<Var>)> {
        let (cq, ck) = (g.shape(queries).1, g.shape(keys).1);
        if cq != self.q.in_dim || ck != self.k.in_dim {
            return Err(Error::mismatch(
                "cross attention",
                format!(
                    "query width {cq}, key width {ck}, expected {}",
                    self.q.in_dim
                ),
            ));
        }
        if g.shape(keys).0 == 0 {
            return Err(Error::Empty("key rows"));
        }
        let qn = g.layer_norm(queries, self.eps);
        let kn = g.layer_norm(keys, self.eps);
        let q = self.q.forward(g, store, qn)?;
        let k = self.k.forward(g, store, kn)?;
        let v = self.v.forward(g, store, kn)?;
        attend(g, q, k, v, mask, self.heads)
    }
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub mode: FusionMode,
    pub channels: usize,
    pub sca: Option<CrossAttention>,
    pub tca: Option<CrossAttention>,
    /// Projects `(S_t, h)` to `C`: the TCA query in dual mode, the code in concat mode.
    pub pair_proj: Option<Linear>,
}

#[derive(Debug, Clone)]
pub struct FusedCodes {
    /// `e_t`, one row per frame.
    pub codes: Var,
    pub sca_tokens: Option<Var>,
    pub sca_weights: Vec<Var>,
    pub tca_weights: Vec<Var>,
}

impl Fusion {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        mode: FusionMode,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let sca = match mode {
            FusionMode::Concat => None,
            _ => Some(CrossAttention::new(
                store,
                "fusion.sca",
                channels,
                heads,
                rng,
            )?),
        };
        let tca = match mode {
            FusionMode::DualCrossAttn => Some(CrossAttention::new(
                store,
                "fusion.tca",
                channels,
                heads,
                rng,
            )?),
            _ => None,
        };
        let pair_proj = match mode {
            FusionMode::SingleCrossAttn => None,
            _ => Some(Linear::new(
                store,
                "fusion.pair",
                2 * channels,
                channels,
                true,
                rng,
            )?),
        };
        Ok(Fusion {
            mode,
            channels,
            sca,
            tca,
            pair_proj,
        })
    }

    /// Spatial tokens attend to the temporal frame tokens of their sequence;
    /// the queries are added back onto the attention output.
    pub fn fuse_sca(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        spatial_tokens: Var,
        frame_tokens: Var,
        layout: &BatchLayout,
    ) -> Result<(Var, Vec<Var>)> {
        let sca = self.sca.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("fusion mode {} has no SCA", self.mode.name()))
        })?;
        let mut mask = Vec::with_capacity(g.shape(spatial_tokens).0);
        for (f, rows) in layout.frame_points.iter().enumerate() {
            let keys = layout.sequence_frames.range(layout.frame_sequence[f]);
            mask.extend(std::iter::repeat_n(keys, rows.len()));
        }
        let (att, w) = sca.forward(g, store, spatial_tokens, frame_tokens, Some(&mask))?;
        Ok((g.add(att, spatial_tokens)?, w))
    }

    /// One query per frame, built from `(S_t, h)`, attends over that frame's
    /// SCA tokens. Returns one row per frame.
    pub fn fuse_tca(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        spatial_codes: Var,
        temporal_code_per_frame: Var,
        sca_tokens: Var,
        layout: &BatchLayout,
    ) -> Result<(Var, Vec<Var>)> {
        let (tca, proj) = match (&self.tca, &self.pair_proj) {
            (Some(t), Some(p)) => (t, p),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "fusion mode {} has no TCA",
                    self.mode.name()
                )))
            }
        };
        let pair = g.concat_cols(&[spatial_codes, temporal_code_per_frame])?;
        let query = proj.forward(g, store, pair)?;
        let mask: Vec<_> = layout.frame_points.iter().collect();
        tca.forward(g, store, query, sca_tokens, Some(&mask))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        spatial: &SpatialCodes,
        temporal: &TemporalCodes,
        layout: &BatchLayout,
    ) -> Result<FusedCodes> {
        let c = self.channels;
        for (what, v) in [("spatial", spatial.codes), ("temporal", temporal.code)] {
            if g.shape(v).1 != c {
                return Err(Error::mismatch(
                    "fusion",
                    format!("{what} code width {} vs {c}", g.shape(v).1),
                ));
            }
        }
        let h = g.segment_broadcast(temporal.code, &layout.sequence_frames)?;
        match self.mode {
            FusionMode::Concat => {
                let pair = g.concat_cols(&[spatial.codes, h])?;
                let proj = self.pair_proj.as_ref().expect("concat projection");
                Ok(FusedCodes {
                    codes: proj.forward(g, store, pair)?,
                    sca_tokens: None,
                    sca_weights: Vec::new(),
                    tca_weights: Vec::new(),
                })
            }
            FusionMode::SingleCrossAttn => {
                let (tokens, w) =
                    self.fuse_sca(g, store, spatial.tokens, temporal.frame_tokens, layout)?;
                Ok(FusedCodes {
                    codes: g.segment_max(tokens, &layout.frame_points)?,
                    sca_tokens: Some(tokens),
                    sca_weights: w,
                    tca_weights: Vec::new(),
                })
            }
            FusionMode::DualCrossAttn => {
                let (tokens, sw) =
                    self.fuse_sca(g, store, spatial.tokens, temporal.frame_tokens, layout)?;
                let pooled = g.segment_max(tokens, &layout.frame_points)?;
                let (tca, tw) = self.fuse_tca(g, store, spatial.codes, h, tokens, layout)?;
                Ok(FusedCodes {
                    codes: g.add(pooled, tca)?,
                    sca_tokens: Some(tokens),
                    sca_weights: sw,
                    tca_weights: tw,
                })
            }
        }
    }
}
