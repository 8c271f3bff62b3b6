//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

mod common;

use std::f64::consts::PI;
use std::time::Instant;

use f4d::evaluation::{chamfer_metric, correspondence_l2, volumetric_iou, EvalConfig};
use f4d::experiments::{format_ablation_table, AblationCell, AblationRow, JobOutcome, OverfitJob};
use f4d::fusion::FusionMode;
use f4d::geometry::{
    brute_force_nearest, closest_point_on_triangle, Bounds, MeshDistance, NearestNeighborIndex,
    TriangleMesh,
};
use f4d::losses::{self, Directions, FlowVariant, LossWeights};
use f4d::mesh_extraction::{dense_evaluate, marching_cubes, mise_evaluate, MiseConfig};
use f4d::model::{points_matrix, FusionConfig, Model, ModelConfig, SequenceModel};
use f4d::nn::{sigmoid, Graph, Mode, Segments};
use f4d::synthetic::{sample_surface_sequence, DeformingShape, ShapeFamily, TemporalMode};
use f4d::trainer::{TrainConfig, Trainer};
use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_points(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<Point3<f64>> {
    (0..n)
        .map(|_| Point3::from([0; 3].map(|_| rng.gen_range(-scale..scale))))
        .collect()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let results = common::gradients::suite(20);
    let secs = start.elapsed().as_secs_f64();
    let (name, worst) = results
        .iter()
        .copied()
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    for (n, e) in &results {
        println!("    {n:<30} max rel err {e:.2e}");
    }
    outcome(
        results.iter().all(|(_, e)| *e <= 1e-4) && secs <= 120.0,
        format!(
            "{} modules x 20 instances, worst {worst:.2e} ({name}) <= 1e-4, {secs:.1}s <= 120s",
            results.len()
        ),
    )
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ok = true;
    for _ in 0..50 {
        let a = random_points(rng.gen_range(1..40), 0.5, &mut rng);
        ok &= losses::flow_loss_chamfer(&a, &a, false).unwrap().value == 0.0;
        let b = random_points(rng.gen_range(1..40), 0.5, &mut rng);
        let asg = losses::nearest_assignment(&a, &b).unwrap();
        let (l, fwd, bwd) = losses::chamfer_with_assignment(&a, &b, &asg, false).unwrap();
        ok &= l.value >= fwd && l.value >= bwd;
    }
    let (bce, _) = losses::recon_loss_bce(&[0.5; 16], &[true, false].repeat(8)).unwrap();
    let bce_ok = (bce - 2f64.ln()).abs() <= 1e-9;
    let w = LossWeights::default();
    let mut exact = w.lambda == 0.1;
    for _ in 0..50 {
        let (f, r) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        exact &= losses::total_loss(f, r, &w) == f + 0.1 * r;
    }
    outcome(
        ok && bce_ok && exact,
        format!("chamfer(A,A)=0 and max >= directed terms: {ok}; BCE(0.5)-ln2 = {:.1e}; total = flow + 0.1 recon: {exact}", bce - 2f64.ln()),
    )
}

fn cold_start() -> Outcome {
    let shape = DeformingShape::default_of(ShapeFamily::ArticulatedDumbbell, 8).unwrap();
    let seq = sample_surface_sequence(&shape, 300, TemporalMode::Uneven, 0.0, 3).unwrap();
    let model = Model::new(ModelConfig::default(), FusionConfig::default(), 11).unwrap();
    let inf = model.prepare(&seq).unwrap();
    let flows_zero = (0..8).all(|k| model.flow(&inf, k).iter().all(|v| *v == Vector3::zeros()));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let queries = random_points(500, 0.5, &mut rng);
    let eval_half = (0..8).all(|k| {
        model
            .occupancy(&inf, k, &queries)
            .unwrap()
            .iter()
            .all(|&p| p == 0.5)
    });
    let mut g = Graph::new();
    let enc = model.encode(&mut g, &[&seq]).unwrap();
    let motion = model.decode_motion(&mut g, &enc).unwrap();
    let all: Vec<Point3<f64>> = (0..8).flat_map(|_| queries.iter().copied()).collect();
    let q = g.input(points_matrix(&all));
    let p = model
        .decode_occupancy(
            &mut g,
            &enc,
            &motion,
            q,
            &Segments::uniform(8, 500),
            Mode::Train,
        )
        .unwrap();
    let train_half = g.value(p).data().iter().all(|&x| x == 0.5);
    outcome(
        flows_zero && eval_half && train_half,
        format!("V_t == 0: {flows_zero}; occupancy == 0.5 (eval {eval_half}, train {train_half})"),
    )
}

/// Desk-scale settings of the overfitting job.
fn job_config(fusion: FusionMode, directions: Directions) -> OverfitJob {
    let mut train = TrainConfig {
        lr: 1e-3,
        lr_decay_every: 500,
        lr_decay_factor: 0.5,
        max_iters: 1500,
        val_every: 1_000_000,
        n_recon_queries: 256,
        seed: 1,
        eval: EvalConfig::default(),
        ..TrainConfig::default()
    };
    train.model = ModelConfig {
        width: 32,
        channels: 32,
    };
    train.fusion.mode = fusion;
    train.loss.directions = directions;
    OverfitJob {
        train,
        ..OverfitJob::default()
    }
}

struct Job {
    cell: AblationCell,
    trainer: Trainer,
    outcome: JobOutcome,
}

fn run_job(fusion: FusionMode, directions: Directions) -> Result<Job, String> {
    let cell = AblationCell {
        fusion,
        flow_variant: FlowVariant::Chamfer,
        directions,
    };
    let (trainer, outcome) = job_config(fusion, directions)
        .run()
        .map_err(|e| e.to_string())?;
    println!(
        "    {:<44} IoU {:.4}  EPE/|gt| {:.4}  {:.0}s",
        cell.name(),
        outcome.metrics.iou,
        outcome.flow_error_ratio.unwrap_or(f64::NAN),
        outcome.runtime_secs
    );
    Ok(Job {
        cell,
        trainer,
        outcome,
    })
}

fn row(job: &Job) -> AblationRow {
    let m = &job.outcome.metrics;
    AblationRow {
        cell: job.cell,
        iou: Some(m.iou),
        chamfer: m.chamfer,
        correspondence: m.correspondence,
        runtime_secs: job.outcome.runtime_secs,
        error: None,
    }
}

fn overfit(job: &Result<Job, String>) -> Outcome {
    match job {
        Err(e) => outcome(false, format!("job failed: {e}")),
        Ok(j) => {
            let o = &j.outcome;
            let epe = o.flow_error_ratio.unwrap_or(f64::INFINITY);
            outcome(
                o.metrics.iou >= 0.85 && epe <= 0.10 && o.runtime_secs <= 1200.0,
                format!(
                    "{} iterations: IoU {:.4} >= 0.85, flow EPE {:.2}% <= 10% of mean displacement, {:.0}s <= 1200s",
                    o.iterations,
                    o.metrics.iou,
                    100.0 * epe,
                    o.runtime_secs
                ),
            )
        }
    }
}

fn fusion_table(jobs: &[&Result<Job, String>]) -> Outcome {
    let done: Vec<&Job> = jobs.iter().filter_map(|j| j.as_ref().ok()).collect();
    if done.len() < jobs.len() {
        return outcome(false, "not every fusion mode completed");
    }
    let rows: Vec<AblationRow> = done.iter().map(|j| row(j)).collect();
    for line in format_ablation_table(&rows).lines() {
        println!("    {line}");
    }
    let iou = |m: FusionMode| {
        done.iter()
            .find(|j| j.cell.fusion == m)
            .unwrap()
            .outcome
            .metrics
            .iou
    };
    let (dual, concat) = (iou(FusionMode::DualCrossAttn), iou(FusionMode::Concat));
    outcome(
        dual >= concat - 0.02,
        format!("3 modes completed; dual IoU {dual:.4} >= concat IoU {concat:.4} - 0.02"),
    )
}

fn directions_rows(fb: &Result<Job, String>, fw: &Result<Job, String>) -> Outcome {
    match (fb, fw) {
        (Ok(a), Ok(b)) => {
            let rows = [row(b), row(a)];
            for line in format_ablation_table(&rows).lines() {
                println!("    {line}");
            }
            outcome(
                true,
                format!(
                    "both rows recorded: forward_only IoU {:.4}, forward_backward IoU {:.4}",
                    b.outcome.metrics.iou, a.outcome.metrics.iou
                ),
            )
        }
        _ => outcome(false, "a direction mode did not complete"),
    }
}

fn mise_correctness(jobs: &[&Result<Job, String>]) -> Outcome {
    let cfg = MiseConfig {
        start_res: 16,
        upsample_steps: 2,
        tau: 0.5,
    };
    let models: Vec<&Job> = jobs.iter().filter_map(|j| j.as_ref().ok()).collect();
    if models.is_empty() {
        return outcome(false, "no trained model available");
    }
    let seq = job_config(FusionMode::DualCrossAttn, Directions::ForwardBackward)
        .sequence()
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut identical = 0;
    for _ in 0..5 {
        let job = models[rng.gen_range(0..models.len())];
        let frame = rng.gen_range(0..seq.frames.len());
        let model = &job.trainer.model;
        let prep = model.prepare(&seq).unwrap();
        let mut field = |p: &[Point3<f64>]| model.occupancy(&prep, frame, p);
        let (grid, _) = mise_evaluate(&mut field, &cfg, Bounds::cube()).unwrap();
        let dense = dense_evaluate(
            &mut field,
            cfg.effective_resolution(),
            Bounds::cube(),
            cfg.tau,
        )
        .unwrap();
        let a = marching_cubes(&grid).canonicalized();
        let b = marching_cubes(&dense).canonicalized();
        if a == b && !a.is_empty() {
            identical += 1;
        }
    }
    let r = 0.3;
    let mut sphere = |p: &[Point3<f64>]| -> f4d::Result<Vec<f64>> {
        Ok(p.iter()
            .map(|q| sigmoid((r - q.coords.norm()) * 64.0))
            .collect())
    };
    let (grid, _) = mise_evaluate(&mut sphere, &cfg, Bounds::cube()).unwrap();
    let dense =
        dense_evaluate(&mut sphere, cfg.effective_resolution(), Bounds::cube(), 0.5).unwrap();
    let sphere_same =
        marching_cubes(&grid).canonicalized() == marching_cubes(&dense).canonicalized();
    let fine = MiseConfig {
        start_res: 32,
        upsample_steps: 2,
        tau: 0.5,
    };
    let (grid, _) = mise_evaluate(&mut sphere, &fine, Bounds::cube()).unwrap();
    let area = marching_cubes(&grid).surface_area();
    let area_err = (area - 4.0 * PI * r * r).abs() / (4.0 * PI * r * r);
    outcome(
        identical == 5 && sphere_same && area_err <= 0.02,
        format!(
            "MISE == dense at 64^3 for {identical}/5 trained fields and sphere: {sphere_same}; sphere area error at 128^3 {:.3}% <= 2%",
            100.0 * area_err
        ),
    )
}

/// Exact mesh distance by scanning every triangle.
fn brute_distance(mesh: &TriangleMesh, p: &Point3<f64>) -> f64 {
    (0..mesh.faces.len())
        .map(|f| {
            let [a, b, c] = mesh.triangle(f);
            (closest_point_on_triangle(p, &a, &b, &c) - p).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

fn metric_oracles() -> Outcome {
    // IoU of two balls against the lens-volume formula
    let (r, d) = (0.3, 0.3);
    let lens = PI * (4.0 * r + d) * (2.0 * r - d).powi(2) / 12.0;
    let ball = 4.0 / 3.0 * PI * r.powi(3);
    let expected = lens / (2.0 * ball - lens);
    let (c1, c2) = (
        Point3::new(-d / 2.0, 0.0, 0.0),
        Point3::new(d / 2.0, 0.0, 0.0),
    );
    let bounds = Bounds {
        min: [-d / 2.0 - r, -r, -r],
        max: [d / 2.0 + r, r, r],
    };
    let iou = volumetric_iou(
        &mut |p: &[Point3<f64>]| Ok(p.iter().map(|q| (q - c1).norm() <= r).collect()),
        &mut |p: &[Point3<f64>]| Ok(p.iter().map(|q| (q - c2).norm() <= r).collect()),
        &bounds,
        100_000,
        1,
    )
    .unwrap();
    let iou_ok = (iou - expected).abs() <= 0.02;

    // Chamfer of a sphere and its translate against 10x samples with brute-force distances
    let a = TriangleMesh::icosphere(Point3::origin(), 0.3, 2);
    let b = a.translated(Vector3::new(0.01, 0.0, 0.0));
    let metric = chamfer_metric(&a, &b, 10_000, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let sa = a.sample_surface(100_000, &mut rng).unwrap();
    let sb = b.sample_surface(100_000, &mut rng).unwrap();
    let oracle = 0.5
        * (sa.iter().map(|p| brute_distance(&b, p)).sum::<f64>() / sa.len() as f64
            + sb.iter().map(|p| brute_distance(&a, p)).sum::<f64>() / sb.len() as f64);
    let chamfer_rel = (metric - oracle).abs() / oracle;

    // correspondence under a constant flow offset on a static shape
    let mesh = TriangleMesh::icosphere(Point3::origin(), 0.3, 4);
    let c = Vector3::new(0.02, 0.0, 0.0);
    let verts = f4d::evaluation::sample_vertices(&mesh, 10_000, 8).unwrap();
    let flow = vec![c; verts.len()];
    let corr = correspondence_l2(&verts, &flow, &MeshDistance::new(&mesh).unwrap()).unwrap();
    let many = f4d::evaluation::sample_vertices(&mesh, 100_000, 9).unwrap();
    let corr_oracle = many
        .iter()
        .map(|p| brute_distance(&mesh, &(p + c)))
        .sum::<f64>()
        / many.len() as f64;
    let corr_rel = (corr - corr_oracle).abs() / corr_oracle;
    outcome(
        iou_ok && chamfer_rel <= 0.15 && corr_rel <= 0.05,
        format!(
            "lens IoU {iou:.4} vs {expected:.4} (+-0.02); chamfer {metric:.3e} vs oracle {oracle:.3e} ({:.1}% <= 15%); correspondence {corr:.3e} vs oracle {corr_oracle:.3e} ({:.2}% <= 5%)",
            100.0 * chamfer_rel,
            100.0 * corr_rel
        ),
    )
}

fn small_trainer() -> Trainer {
    let shape = DeformingShape::default_of(ShapeFamily::TwoLobeCapsule, 4).unwrap();
    let seqs: Vec<_> = (0..3)
        .map(|s| sample_surface_sequence(&shape, 64, TemporalMode::Uneven, 0.002, s).unwrap())
        .collect();
    let mut cfg = TrainConfig {
        batch_size: 2,
        lr: 1e-3,
        lr_decay_every: 30,
        max_iters: 100,
        val_every: 1_000_000,
        n_recon_queries: 64,
        n_flow_trajectories: 32,
        seed: 5,
        ..TrainConfig::default()
    };
    cfg.model = ModelConfig {
        width: 16,
        channels: 16,
    };
    Trainer::new(cfg, seqs, Vec::new()).unwrap()
}

fn determinism() -> Outcome {
    let run = |iters: u64, t: &mut Trainer| -> Vec<u64> {
        (0..iters)
            .map(|_| t.step().unwrap().loss.total.to_bits())
            .collect()
    };
    let mut a = small_trainer();
    let trace_a = run(100, &mut a);
    let mut b = small_trainer();
    let trace_b = run(100, &mut b);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("half.ckpt");
    let mut c = small_trainer();
    let mut trace_c = run(50, &mut c);
    c.save(&ckpt).unwrap();
    drop(c);
    let mut d = small_trainer();
    d.resume(&ckpt).unwrap();
    trace_c.extend(run(50, &mut d));
    let params_equal = |x: &Trainer, y: &Trainer| {
        x.model.store.ids().all(|id| {
            let (u, v) = (
                x.model.store.value(id).data(),
                y.model.store.value(id).data(),
            );
            u.iter().zip(v).all(|(p, q)| p.to_bits() == q.to_bits())
        })
    };
    let same_trace = trace_a == trace_b;
    let same_params = params_equal(&a, &b);
    let resumed = params_equal(&a, &d) && trace_a == trace_c;
    outcome(
        same_trace && same_params && resumed,
        format!(
            "identical traces and parameters: {}; resume at 50 of 100 bit-exact: {resumed}",
            same_trace && same_params
        ),
    )
}

fn nearest_neighbors() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=2000);
        let pts = random_points(n, 0.5, &mut rng);
        let index = NearestNeighborIndex::build(&pts).unwrap();
        for q in random_points(20, 0.6, &mut rng) {
            let (i, d) = index.nearest_index(&q);
            let (j, e) = brute_force_nearest(&pts, &q).unwrap();
            if i != j || d != e {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("200 instances x 20 queries, {mismatches} mismatches against exhaustive scan"),
    )
}

/// Criteria to run, from `F4D_ACCEPTANCE_ONLY` (comma-separated numbers); all by default.
fn selected() -> Vec<usize> {
    match std::env::var("F4D_ACCEPTANCE_ONLY") {
        Ok(list) => list
            .split(',')
            .filter_map(|s| s.trim().parse().ok())
            .collect(),
        Err(_) => (1..=10).collect(),
    }
}

fn main() {
    let only = selected();
    let want = |n: usize| only.contains(&n);
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!(
            "criterion {n:>2} {:<28} {} | {}",
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };
    let skipped = || Err("not run".to_string());
    if want(1) {
        report(1, "gradient integrity", gradients());
    }
    if want(2) {
        report(2, "loss identities", loss_identities());
    }
    if want(3) {
        report(3, "cold start", cold_start());
    }
    let jobs_needed = [4, 5, 6, 7].iter().any(|&n| want(n));
    let dual = if jobs_needed {
        run_job(FusionMode::DualCrossAttn, Directions::ForwardBackward)
    } else {
        skipped()
    };
    if want(4) {
        report(4, "overfit one sequence", overfit(&dual));
    }
    let ablate = want(5) || want(7);
    let concat = if ablate {
        run_job(FusionMode::Concat, Directions::ForwardBackward)
    } else {
        skipped()
    };
    let single = if ablate {
        run_job(FusionMode::SingleCrossAttn, Directions::ForwardBackward)
    } else {
        skipped()
    };
    if want(5) {
        report(
            5,
            "fusion ablation",
            fusion_table(&[&concat, &single, &dual]),
        );
    }
    let fw = if want(6) || want(7) {
        run_job(FusionMode::DualCrossAttn, Directions::ForwardOnly)
    } else {
        skipped()
    };
    if want(6) {
        report(
            6,
            "forward-backward vs forward",
            directions_rows(&dual, &fw),
        );
    }
    if want(7) {
        report(
            7,
            "MISE correctness",
            mise_correctness(&[&dual, &concat, &single, &fw]),
        );
    }
    if want(8) {
        report(8, "metric oracles", metric_oracles());
    }
    if want(9) {
        report(9, "determinism and resume", determinism());
    }
    if want(10) {
        report(10, "nearest-neighbor exactness", nearest_neighbors());
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(", failed: {failed:?}")
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
