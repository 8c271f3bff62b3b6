//! Flow losses between translated and target point sets, occupancy BCE and
//! their weighted combination.
//!
//! Every point-set loss returns its value together with the gradient with
//! respect to the translated points, so it can be attached to a [`Graph`]
//! with [`attach`].

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::NearestNeighborIndex;
use crate::nn::{Graph, Matrix, Var};

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowVariant {
    Chamfer,
    L2Supervised,
    Hausdorff,
    SlicedWasserstein,
}

impl FlowVariant {
    pub const ALL: [FlowVariant; 4] = [
        FlowVariant::Chamfer,
        FlowVariant::L2Supervised,
        FlowVariant::Hausdorff,
        FlowVariant::SlicedWasserstein,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FlowVariant::Chamfer => "chamfer",
            FlowVariant::L2Supervised => "l2_supervised",
            FlowVariant::Hausdorff => "hausdorff",
            FlowVariant::SlicedWasserstein => "sliced_wasserstein",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        FlowVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown flow loss `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directions {
    ForwardOnly,
    ForwardBackward,
}

impl Directions {
    pub fn name(&self) -> &'static str {
        match self {
            Directions::ForwardOnly => "forward_only",
            Directions::ForwardBackward => "forward_backward",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "forward_only" => Ok(Directions::ForwardOnly),
            "forward_backward" => Ok(Directions::ForwardBackward),
            _ => Err(Error::InvalidArgument(format!(
                "unknown direction mode `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda: f64,
    pub flow_variant: FlowVariant,
    pub directions: Directions,
    /// Sum the two directed Chamfer terms instead of taking their max.
    pub sum_directions: bool,
    /// Average the per-step flow terms over `T - 1` instead of summing them.
    pub average_steps: bool,
    pub swd_projections: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.1,
            flow_variant: FlowVariant::Chamfer,
            directions: Directions::ForwardBackward,
            sum_directions: false,
            average_steps: true,
            swd_projections: 32,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(
                "loss.lambda must be positive".into(),
            ));
        }
        if self.swd_projections == 0 {
            return Err(Error::InvalidArgument(
                "loss.swd_projections must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Loss value with its gradient with respect to the first point set.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<Vector3<f64>>,
}

impl LossGrad {
    pub fn grad_matrix(&self) -> Matrix {
        let data = self.grad.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        Matrix::from_vec(self.grad.len(), 3, data).expect("n x 3")
    }
}

/// Records `loss` on the tape as a scalar function of `x`, whose rows are the
/// translated points (or displacements) the gradient refers to.
pub fn attach(g: &mut Graph, x: Var, loss: &LossGrad) -> Result<Var> {
    g.scalar_fn(x, loss.value, loss.grad_matrix())
}

/// `(p - q) / |p - q|`, zero when the points coincide.
fn unit_diff(p: &Point3<f64>, q: &Point3<f64>) -> (f64, Vector3<f64>) {
    let d = p - q;
    let n = d.norm();
    if n > 0.0 {
        (n, d / n)
    } else {
        (0.0, Vector3::zeros())
    }
}

fn non_empty(a: &[Point3<f64>], b: &[Point3<f64>]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    Ok(())
}

/// Nearest-neighbor assignments in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// For each translated point, the index of its nearest target point.
    pub forward: Vec<usize>,
    /// For each target point, the index of its nearest translated point.
    pub backward: Vec<usize>,
}

pub fn nearest_assignment(
    translated: &[Point3<f64>],
    target: &[Point3<f64>],
) -> Result<Assignment> {
    non_empty(translated, target)?;
    let ti = NearestNeighborIndex::build(target)?;
    let si = NearestNeighborIndex::build(translated)?;
    Ok(Assignment {
        forward: translated.iter().map(|p| ti.nearest_index(p).0).collect(),
        backward: target.iter().map(|q| si.nearest_index(q).0).collect(),
    })
}

/// Mean distance from each point of `a` to its nearest point of `b`.
pub fn directed_mean(a: &[Point3<f64>], b: &[Point3<f64>]) -> Result<f64> {
    non_empty(a, b)?;
    let idx = NearestNeighborIndex::build(b)?;
    Ok(a.iter().map(|p| idx.nearest(p).1).sum::<f64>() / a.len() as f64)
}

/// Chamfer flow term with a given assignment. Returns the loss and the two
/// directed means.
pub fn chamfer_with_assignment(
    translated: &[Point3<f64>],
    target: &[Point3<f64>],
    assignment: &Assignment,
    sum_directions: bool,
) -> Result<(LossGrad, f64, f64)> {
    non_empty(translated, target)?;
    let (n, m) = (translated.len() as f64, target.len() as f64);
    let mut fwd = 0.0;
    let mut g_fwd = vec![Vector3::zeros(); translated.len()];
    for (i, p) in translated.iter().enumerate() {
        let (d, u) = unit_diff(p, &target[assignment.forward[i]]);
        fwd += d;
        g_fwd[i] = u / n;
    }
    let mut bwd = 0.0;
    let mut g_bwd = vec![Vector3::zeros(); translated.len()];
    for (j, q) in target.iter().enumerate() {
        let i = assignment.backward[j];
        let (d, u) = unit_diff(&translated[i], q);
        bwd += d;
        g_bwd[i] += u / m;
    }
    let (fwd, bwd) = (fwd / n, bwd / m);
    let loss = if sum_directions {
        LossGrad {
            value: fwd + bwd,
            grad: g_fwd.iter().zip(&g_bwd).map(|(a, b)| a + b).collect(),
        }
    } else if fwd >= bwd {
        LossGrad {
            value: fwd,
            grad: g_fwd,
        }
    } else {
        LossGrad {
            value: bwd,
            grad: g_bwd,
        }
    };
    Ok((loss, fwd, bwd))
}

/// Larger of the two directed mean nearest-neighbor distances (or their sum).
pub fn flow_loss_chamfer(
    translated: &[Point3<f64>],
    target: &[Point3<f64>],
    sum_directions: bool,
) -> Result<LossGrad> {
    let a = nearest_assignment(translated, target)?;
    Ok(chamfer_with_assignment(translated, target, &a, sum_directions)?.0)
}

/// Mean Euclidean error between predicted and true displacements.
pub fn flow_loss_l2_supervised(pred: &[Vector3<f64>], truth: &[Vector3<f64>]) -> Result<LossGrad> {
    if pred.len() != truth.len() {
        return Err(Error::mismatch(
            "supervised flow loss",
            format!("{} predictions vs {} targets", pred.len(), truth.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let (d, u) = unit_diff(&Point3::from(*p), &Point3::from(*t));
            value += d;
            u / n
        })
        .collect();
    Ok(LossGrad {
        value: value / n,
        grad,
    })
}

/// Symmetric Hausdorff distance with a given assignment.
pub fn hausdorff_with_assignment(
    translated: &[Point3<f64>],
    target: &[Point3<f64>],
    assignment: &Assignment,
) -> Result<LossGrad> {
    non_empty(translated, target)?;
    // (distance, translated index, unit direction), first maximum wins
    let mut best = (-1.0, 0, Vector3::zeros());
    for (i, p) in translated.iter().enumerate() {
        let (d, u) = unit_diff(p, &target[assignment.forward[i]]);
        if d > best.0 {
            best = (d, i, u);
        }
    }
    for (j, q) in target.iter().enumerate() {
        let i = assignment.backward[j];
        let (d, u) = unit_diff(&translated[i], q);
        if d > best.0 {
            best = (d, i, u);
        }
    }
    let mut grad = vec![Vector3::zeros(); translated.len()];
    grad[best.1] = best.2;
    Ok(LossGrad {
        value: best.0,
        grad,
    })
}

pub fn flow_loss_hausdorff(translated: &[Point3<f64>], target: &[Point3<f64>]) -> Result<LossGrad> {
    let a = nearest_assignment(translated, target)?;
    hausdorff_with_assignment(translated, target, &a)
}

/// Random unit directions used by the sliced Wasserstein loss.
pub fn swd_directions(n_projections: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    (0..n_projections)
        .map(|_| loop {
            let v = Vector3::new(rng.sample(normal), rng.sample(normal), rng.sample(normal));
            let n: f64 = v.norm();
            if n > 1e-9 {
                break v / n;
            }
        })
        .collect()
}

/// 1-D Wasserstein-1 distance between two empirical distributions with
/// uniform weights, and its derivative with respect to each value of `a`.
fn wasserstein_1d(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let mut ia: Vec<usize> = (0..a.len()).collect();
    let mut ib: Vec<usize> = (0..b.len()).collect();
    ia.sort_by(|&x, &y| a[x].total_cmp(&a[y]).then(x.cmp(&y)));
    ib.sort_by(|&x, &y| b[x].total_cmp(&b[y]).then(x.cmp(&y)));
    let (n, m) = (a.len() as f64, b.len() as f64);
    let mut grad = vec![0.0; a.len()];
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut total = 0.0;
    // walk the merged quantile breakpoints
    while i < a.len() && j < b.len() {
        let next = ((i + 1) as f64 / n).min((j + 1) as f64 / m);
        let w = next - u;
        let d = a[ia[i]] - b[ib[j]];
        total += w * d.abs();
        grad[ia[i]] += w * d.signum() * (d != 0.0) as u8 as f64;
        u = next;
        if ((i + 1) as f64 / n) <= next + 1e-15 {
            i += 1;
        }
        if ((j + 1) as f64 / m) <= next + 1e-15 {
            j += 1;
        }
    }
    (total, grad)
}

/// Mean over random unit projections of the 1-D Wasserstein distance
/// between the projected point sets.
pub fn flow_loss_swd(
    translated: &[Point3<f64>],
    target: &[Point3<f64>],
    n_projections: usize,
    seed: u64,
) -> Result<LossGrad> {
    non_empty(translated, target)?;
    if n_projections == 0 {
        return Err(Error::InvalidArgument(
            "need at least one projection".into(),
        ));
    }
    let dirs = swd_directions(n_projections, seed);
    let mut value = 0.0;
    let mut grad = vec![Vector3::zeros(); translated.len()];
    for d in &dirs {
        let a: Vec<f64> = translated.iter().map(|p| p.coords.dot(d)).collect();
        let b: Vec<f64> = target.iter().map(|p| p.coords.dot(d)).collect();
        let (w, g) = wasserstein_1d(&a, &b);
        value += w;
        for (gi, s) in grad.iter_mut().zip(g) {
            *gi += d * (s / n_projections as f64);
        }
    }
    Ok(LossGrad {
        value: value / n_projections as f64,
        grad,
    })
}

/// Mean binary cross entropy with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`; the gradient is with respect to the probabilities.
pub fn recon_loss_bce(probs: &[f64], labels: &[bool]) -> Result<(f64, Vec<f64>)> {
    if probs.len() != labels.len() {
        return Err(Error::mismatch(
            "reconstruction loss",
            format!("{} predictions vs {} labels", probs.len(), labels.len()),
        ));
    }
    if probs.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let n = probs.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&p, &y) in probs.iter().zip(labels) {
        let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let inside = p > BCE_CLAMP && p < 1.0 - BCE_CLAMP;
        if y {
            total -= pc.ln();
            grad.push(if inside { -1.0 / (pc * n) } else { 0.0 });
        } else {
            total -= (1.0 - pc).ln();
            grad.push(if inside { 1.0 / ((1.0 - pc) * n) } else { 0.0 });
        }
    }
    Ok((total / n, grad))
}

/// BCE recorded on the tape as a function of the probability column `probs`.
pub fn attach_bce(g: &mut Graph, probs: Var, labels: &[bool]) -> Result<Var> {
    let (value, grad) = recon_loss_bce(g.value(probs).data(), labels)?;
    let rows = grad.len();
    g.scalar_fn(probs, value, Matrix::from_vec(rows, 1, grad)?)
}

/// `flow + lambda * recon`.
pub fn total_loss(flow: f64, recon: f64, weights: &LossWeights) -> f64 {
    flow + weights.lambda * recon
}
