//! Finite-difference checks of every differentiable module, shared by the
//! module tests and the acceptance run. Each function returns the worst
//! relative error over `instances` random instances.

use f4d::decoders::{OccupancyDecoder, TemporalDecoder};
use f4d::encoders::BatchLayout;
use f4d::fusion::{CrossAttention, Fusion, FusionMode};
use f4d::losses::{self, LossGrad};
use f4d::nn::gradcheck::{
    check_gradients, project, relative_error, GradCheckOptions, GradCheckReport,
};
use f4d::nn::{CbnResBlock, Linear, Matrix, Mode, ParamStore, ResBlock, Segments};
use f4d::synthetic::{PointCloudFrame, PointCloudSequence};
use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;

pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        seed,
        step: STEP,
        ..Default::default()
    }
}

/// Moves trainable parameters off their initialization (zero heads included)
/// and gives running statistics positive values.
fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let trainable = store.is_trainable(id);
        for v in store.value_mut(id).data_mut() {
            if trainable {
                *v += rng.gen_range(-0.3..0.3);
            } else {
                *v = rng.gen_range(0.2..1.0);
            }
        }
    }
}

fn worst(reports: impl Iterator<Item = GradCheckReport>) -> f64 {
    reports.map(|r| r.max_rel_error).fold(0.0, f64::max)
}

/// Two sequences with 2 and 3 frames of `n` random points each.
pub fn tiny_layout(n: usize, rng: &mut ChaCha8Rng) -> (BatchLayout, Matrix) {
    let mut seqs = Vec::new();
    let mut rows = Vec::new();
    for (s, frames) in [2usize, 3].into_iter().enumerate() {
        let frames = (0..frames)
            .map(|k| {
                let points: Vec<Point3<f64>> = (0..n)
                    .map(|_| Point3::from([0; 3].map(|_| rng.gen_range(-0.4..0.4))))
                    .collect();
                rows.extend(points.iter().flat_map(|p| [p.x, p.y, p.z]));
                PointCloudFrame {
                    points,
                    time: k as f64,
                }
            })
            .collect();
        seqs.push(PointCloudSequence::new(format!("s{s}"), frames, None, None, None).unwrap());
    }
    let refs: Vec<&PointCloudSequence> = seqs.iter().collect();
    let layout = BatchLayout::new(&refs).unwrap();
    let m = Matrix::from_vec(rows.len() / 3, 3, rows).unwrap();
    (layout, m)
}

pub fn linear(instances: u64) -> f64 {
    worst((0..instances).map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let fc = Linear::new(&mut store, "fc", 3, 4, true, &mut rng).unwrap();
        let x = random(5, 3, &mut rng);
        check_gradients(&mut store, &[x], opts(seed), |g, s, v| {
            let y = fc.forward(g, s, v[0])?;
            project(g, y, 1)
        })
        .unwrap()
    }))
}

pub fn residual_block(instances: u64) -> f64 {
    worst((0..instances).map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut store = ParamStore::new();
        let a = ResBlock::new(&mut store, "a", 4, 6, &mut rng).unwrap();
        let b = ResBlock::new(&mut store, "b", 6, 6, &mut rng).unwrap();
        let x = random(7, 4, &mut rng);
        check_gradients(&mut store, &[x], opts(seed), |g, s, v| {
            let y = a.forward(g, s, v[0])?;
            let y = b.forward(g, s, y)?;
            project(g, y, 2)
        })
        .unwrap()
    }))
}

pub fn cbn_block(instances: u64) -> f64 {
    worst((0..instances).flat_map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut store = ParamStore::new();
        let block = CbnResBlock::new(&mut store, "cb", 3, 5, &mut rng).unwrap();
        perturb(&mut store, &mut rng);
        let segs = Segments::from_lengths(&[4, 5]);
        let x = random(9, 5, &mut rng);
        let code = random(2, 3, &mut rng);
        [Mode::Train, Mode::Eval]
            .into_iter()
            .map(|mode| {
                check_gradients(
                    &mut store,
                    &[x.clone(), code.clone()],
                    opts(seed),
                    |g, s, v| {
                        let y = block.forward(g, s, v[0], v[1], &segs, mode)?;
                        project(g, y, 3)
                    },
                )
                .unwrap()
            })
            .collect::<Vec<_>>()
    }))
}

pub fn attention(instances: u64) -> f64 {
    worst((0..instances).map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let mut store = ParamStore::new();
        let heads = 1 + seed as usize % 2;
        let att = CrossAttention::new(&mut store, "att", 4, heads, &mut rng).unwrap();
        let q = random(5, 4, &mut rng);
        let k = random(6, 4, &mut rng);
        let mask = [0..3, 3..6, 0..6, 2..3, 1..5];
        check_gradients(&mut store, &[q, k], opts(seed), |g, s, v| {
            let (y, _) = att.forward(g, s, v[0], v[1], Some(&mask))?;
            project(g, y, 5)
        })
        .unwrap()
    }))
}

/// SCA followed by TCA on a two-sequence layout.
pub fn dual_fusion(instances: u64) -> f64 {
    worst((0..instances).map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let mut store = ParamStore::new();
        let fusion = Fusion::new(&mut store, FusionMode::DualCrossAttn, 4, 2, &mut rng).unwrap();
        let (layout, _) = tiny_layout(3, &mut rng);
        let tokens = random(layout.frame_points.total(), 4, &mut rng);
        let frame_tokens = random(layout.frames(), 4, &mut rng);
        let spatial = random(layout.frames(), 4, &mut rng);
        let temporal = random(layout.frames(), 4, &mut rng);
        check_gradients(
            &mut store,
            &[tokens, frame_tokens, spatial, temporal],
            opts(seed),
            |g, s, v| {
                let (sca, _) = fusion.fuse_sca(g, s, v[0], v[1], &layout)?;
                let (e, _) = fusion.fuse_tca(g, s, v[2], v[3], sca, &layout)?;
                project(g, e, 6)
            },
        )
        .unwrap()
    }))
}

pub fn temporal_decoder(instances: u64) -> f64 {
    worst((0..instances).map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let mut store = ParamStore::new();
        let dec = TemporalDecoder::new(&mut store, 3, 5, &mut rng).unwrap();
        perturb(&mut store, &mut rng);
        let (layout, points) = tiny_layout(3, &mut rng);
        let codes = random(layout.frames(), 3, &mut rng);
        check_gradients(&mut store, &[points, codes], opts(seed), |g, s, v| {
            let out = dec.forward(g, s, v[0], v[1], &layout)?;
            let a = project(g, out.flow, 7)?;
            let b = project(g, out.pooled, 8)?;
            g.add(a, b)
        })
        .unwrap()
    }))
}

pub fn occupancy_decoder(instances: u64) -> f64 {
    worst((0..instances).flat_map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let mut store = ParamStore::new();
        let dec = OccupancyDecoder::new(&mut store, 3, 4, &mut rng).unwrap();
        perturb(&mut store, &mut rng);
        let segs = Segments::from_lengths(&[4, 3, 5]);
        let queries = random(12, 3, &mut rng);
        let codes = random(3, 3, &mut rng);
        let pooled = random(3, 4, &mut rng);
        [Mode::Train, Mode::Eval]
            .into_iter()
            .map(|mode| {
                let inputs = [queries.clone(), codes.clone(), pooled.clone()];
                check_gradients(&mut store, &inputs, opts(seed), |g, s, v| {
                    let p = dec.forward(g, s, v[0], &segs, v[1], v[2], mode)?;
                    project(g, p, 9)
                })
                .unwrap()
            })
            .collect::<Vec<_>>()
    }))
}

fn points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3<f64>> {
    (0..n)
        .map(|_| {
            Point3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
        })
        .collect()
}

/// Central differences of `f` at `x` against `analytic`, on every coordinate.
fn check_point_loss(
    x: &[Point3<f64>],
    analytic: &LossGrad,
    f: impl Fn(&[Point3<f64>]) -> f64,
) -> f64 {
    let mut work = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        for a in 0..3 {
            let orig = work[i][a];
            work[i][a] = orig + STEP;
            let fp = f(&work);
            work[i][a] = orig - STEP;
            let fm = f(&work);
            work[i][a] = orig;
            let numeric = (fp - fm) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.grad[i][a], numeric, 1e-5));
        }
    }
    worst
}

/// Chamfer in both max and sum form, with the assignment held fixed.
pub fn chamfer_loss(instances: u64) -> f64 {
    (0..instances)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
            let (x, y) = (points(7, &mut rng), points(9, &mut rng));
            let asg = losses::nearest_assignment(&x, &y).unwrap();
            [false, true]
                .into_iter()
                .map(|sum| {
                    let (lg, _, _) = losses::chamfer_with_assignment(&x, &y, &asg, sum).unwrap();
                    check_point_loss(&x, &lg, |p| {
                        losses::chamfer_with_assignment(p, &y, &asg, sum)
                            .unwrap()
                            .0
                            .value
                    })
                })
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

pub fn hausdorff_loss(instances: u64) -> f64 {
    (0..instances)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
            let (x, y) = (points(6, &mut rng), points(8, &mut rng));
            let asg = losses::nearest_assignment(&x, &y).unwrap();
            let lg = losses::hausdorff_with_assignment(&x, &y, &asg).unwrap();
            check_point_loss(&x, &lg, |p| {
                losses::hausdorff_with_assignment(p, &y, &asg)
                    .unwrap()
                    .value
            })
        })
        .fold(0.0, f64::max)
}

/// Random continuous points have no ties, so the sort order is locally fixed.
pub fn swd_loss(instances: u64) -> f64 {
    (0..instances)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (x, y) = (points(6, &mut rng), points(4 + seed as usize % 5, &mut rng));
            let lg = losses::flow_loss_swd(&x, &y, 8, seed).unwrap();
            check_point_loss(&x, &lg, |p| {
                losses::flow_loss_swd(p, &y, 8, seed).unwrap().value
            })
        })
        .fold(0.0, f64::max)
}

pub fn l2_supervised_loss(instances: u64) -> f64 {
    (0..instances)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(1100 + seed);
            let (x, t) = (points(6, &mut rng), points(6, &mut rng));
            let truth: Vec<Vector3<f64>> = t.iter().map(|p| p.coords).collect();
            let pred: Vec<Vector3<f64>> = x.iter().map(|p| p.coords).collect();
            let lg = losses::flow_loss_l2_supervised(&pred, &truth).unwrap();
            check_point_loss(&x, &lg, |p| {
                let pred: Vec<Vector3<f64>> = p.iter().map(|q| q.coords).collect();
                losses::flow_loss_l2_supervised(&pred, &truth)
                    .unwrap()
                    .value
            })
        })
        .fold(0.0, f64::max)
}

pub fn bce_loss(instances: u64) -> f64 {
    (0..instances)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(1200 + seed);
            let probs: Vec<f64> = (0..10).map(|_| rng.gen_range(0.05..0.95)).collect();
            let labels: Vec<bool> = (0..10).map(|_| rng.gen_bool(0.5)).collect();
            let (_, grad) = losses::recon_loss_bce(&probs, &labels).unwrap();
            let mut work = probs.clone();
            let mut worst = 0.0f64;
            for i in 0..probs.len() {
                work[i] = probs[i] + STEP;
                let fp = losses::recon_loss_bce(&work, &labels).unwrap().0;
                work[i] = probs[i] - STEP;
                let fm = losses::recon_loss_bce(&work, &labels).unwrap().0;
                work[i] = probs[i];
                worst = worst.max(relative_error(grad[i], (fp - fm) / (2.0 * STEP), 1e-5));
            }
            worst
        })
        .fold(0.0, f64::max)
}

/// Every module with its worst error over `instances` instances.
pub fn suite(instances: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("fully connected", linear(instances)),
        ("residual block", residual_block(instances)),
        ("CBN block", cbn_block(instances)),
        ("cross attention", attention(instances)),
        ("dual fusion", dual_fusion(instances)),
        ("temporal decoder", temporal_decoder(instances)),
        ("occupancy decoder", occupancy_decoder(instances)),
        ("chamfer flow loss", chamfer_loss(instances)),
        ("hausdorff flow loss", hausdorff_loss(instances)),
        ("sliced wasserstein flow loss", swd_loss(instances)),
        ("supervised L2 flow loss", l2_supervised_loss(instances)),
        ("BCE", bce_loss(instances)),
    ]
}
