//! Joint optimization of flow and occupancy: per-step sampling, forward and
//! time-reversed loss evaluation, Adam updates, validation, checkpoints.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoders::MotionOutput;
use crate::error::{Error, Result};
use crate::evaluation::{validate, EvalConfig, MetricsSummary};
use crate::losses::{self, Directions, FlowVariant, LossGrad, LossWeights};
use crate::model::{points_matrix, Encoding, FusionConfig, Model, ModelConfig};
use crate::nn::{
    apply_stat_updates, load_checkpoint, save_checkpoint, Graph, Matrix, Mode, Segments, Var,
};
use crate::synthetic::{occupancy_queries_with, OccupancySample, PointCloudSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_every: u64,
    pub lr_decay_factor: f64,
    pub max_iters: u64,
    pub val_every: u64,
    /// Validations without IoU gain before training stops.
    pub patience: usize,
    /// Occupancy queries per frame.
    pub n_recon_queries: usize,
    /// Fraction of the queries drawn near the surface instead of uniformly.
    pub near_surface_fraction: f64,
    pub query_band: f64,
    /// Trajectories per sequence used by the flow loss.
    pub n_flow_trajectories: usize,
    /// Global gradient-norm cap; off when absent.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub model: ModelConfig,
    pub fusion: FusionConfig,
    pub loss: LossWeights,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            lr: 1e-4,
            lr_decay_every: 5000,
            lr_decay_factor: 0.5,
            max_iters: 20_000,
            val_every: 2000,
            patience: 10,
            n_recon_queries: 512,
            near_surface_fraction: 0.5,
            query_band: 0.02,
            n_flow_trajectories: 100,
            grad_clip: None,
            seed: 0,
            model: ModelConfig::default(),
            fusion: FusionConfig::default(),
            loss: LossWeights::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as u64),
            ("lr_decay_every", self.lr_decay_every),
            ("val_every", self.val_every),
            ("n_recon_queries", self.n_recon_queries as u64),
            ("n_flow_trajectories", self.n_flow_trajectories as u64),
            ("model.width", self.model.width as u64),
            ("model.channels", self.model.channels as u64),
            ("fusion.heads", self.fusion.heads as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(
                "lr must be finite and non-negative".into(),
            ));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::InvalidArgument(
                "lr_decay_factor must be in (0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.near_surface_fraction) {
            return Err(Error::InvalidArgument(
                "near_surface_fraction must be in [0, 1]".into(),
            ));
        }
        if !(self.query_band > 0.0) {
            return Err(Error::InvalidArgument("query_band must be positive".into()));
        }
        if !self.model.channels.is_multiple_of(self.fusion.heads) {
            return Err(Error::InvalidArgument(
                "fusion.heads must divide model.channels".into(),
            ));
        }
        self.loss.validate()
    }

    /// Step learning rate: `lr * factor^(iteration / every)`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.lr
            * self
                .lr_decay_factor
                .powi((iteration / self.lr_decay_every) as i32)
    }

    pub fn directions(&self) -> usize {
        match self.loss.directions {
            Directions::ForwardOnly => 1,
            Directions::ForwardBackward => 2,
        }
    }
}

/// Random draws of one step for one sequence, in forward time order.
#[derive(Debug, Clone)]
pub struct SequenceSample {
    /// Trajectory (point row) indices used by the flow loss.
    pub trajectories: Vec<usize>,
    /// Occupancy queries of every frame.
    pub queries: Vec<Vec<OccupancySample>>,
    /// Exact displacements of the sampled trajectories for every step, when
    /// the supervised loss needs them.
    pub displacements: Option<Vec<Vec<Vector3<f64>>>>,
}

impl SequenceSample {
    fn reversed(&self) -> SequenceSample {
        SequenceSample {
            trajectories: self.trajectories.clone(),
            queries: self.queries.iter().rev().cloned().collect(),
            displacements: self.displacements.as_ref().map(|d| {
                d.iter()
                    .rev()
                    .map(|step| step.iter().map(|v| -v).collect())
                    .collect()
            }),
        }
    }
}

pub fn step_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// Draws trajectories and labelled queries for every sequence of a batch.
pub fn sample_batch(
    batch: &[&PointCloudSequence],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SequenceSample>> {
    let n_near = (config.n_recon_queries as f64 * config.near_surface_fraction).round() as usize;
    let n_uniform = config.n_recon_queries - n_near;
    batch
        .iter()
        .map(|seq| {
            let shape = seq.shape.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "sequence `{}` has no generating shape for labels",
                    seq.id
                ))
            })?;
            let n = seq.points_per_frame();
            let mut trajectories =
                sample_indices(rng, n, config.n_flow_trajectories.min(n)).into_vec();
            trajectories.sort_unstable();
            let queries = seq
                .frames
                .iter()
                .map(|f| {
                    occupancy_queries_with(shape, f.time, n_uniform, n_near, config.query_band, rng)
                })
                .collect();
            let displacements = match config.loss.flow_variant {
                FlowVariant::L2Supervised => Some(
                    (0..seq.frames.len() - 1)
                        .map(|k| {
                            let all = seq.ground_truth_displacements(k).ok_or_else(|| {
                                Error::InvalidArgument(format!(
                                    "sequence `{}` lacks ground-truth correspondences",
                                    seq.id
                                ))
                            })?;
                            Ok(trajectories.iter().map(|&i| all[i]).collect())
                        })
                        .collect::<Result<Vec<_>>>()?,
                ),
                _ => None,
            };
            Ok(SequenceSample {
                trajectories,
                queries,
                displacements,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub flow: f64,
    pub recon: f64,
    pub total: f64,
}

struct DirectionFlow {
    loss: Var,
    value: f64,
    /// Flow term of each sequence, for diagnostics.
    per_sequence: Vec<f64>,
}

fn point(m: &Matrix, r: usize) -> Point3<f64> {
    let v = m.row(r);
    Point3::new(v[0], v[1], v[2])
}

fn flow_term(
    variant: FlowVariant,
    translated: &[Point3<f64>],
    target: &[Point3<f64>],
    predicted: &[Vector3<f64>],
    truth: Option<&Vec<Vector3<f64>>>,
    weights: &LossWeights,
    swd_seed: u64,
) -> Result<LossGrad> {
    match variant {
        FlowVariant::Chamfer => {
            losses::flow_loss_chamfer(translated, target, weights.sum_directions)
        }
        FlowVariant::Hausdorff => losses::flow_loss_hausdorff(translated, target),
        FlowVariant::SlicedWasserstein => {
            losses::flow_loss_swd(translated, target, weights.swd_projections, swd_seed)
        }
        FlowVariant::L2Supervised => {
            let truth = truth.ok_or_else(|| {
                Error::InvalidArgument("supervised loss needs ground truth".into())
            })?;
            losses::flow_loss_l2_supervised(predicted, truth)
        }
    }
}

/// Flow loss of one time direction. `samples` are in the direction's frame order.
fn direction_flow(
    g: &mut Graph,
    enc: &Encoding,
    motion: &MotionOutput,
    samples: &[SequenceSample],
    weights: &LossWeights,
    swd_seed: u64,
) -> Result<DirectionFlow> {
    let layout = &enc.layout;
    let points = g.value(enc.points).clone();
    let flow = g.value(motion.flow).clone();
    let batch = layout.sequences() as f64;

    let mut rows = Vec::new();
    let mut grad_rows: Vec<Vector3<f64>> = Vec::new();
    let mut flow_total = 0.0;
    let mut per_sequence_flow = Vec::with_capacity(samples.len());
    for (s, sample) in samples.iter().enumerate() {
        let frames = layout.sequence_frames.range(s);
        let steps = frames.len() - 1;
        let scale = if weights.average_steps {
            1.0 / steps as f64
        } else {
            1.0
        } / batch;
        let mut seq_flow = 0.0;
        for k in 0..steps {
            let (f, next) = (frames.start + k, frames.start + k + 1);
            let base = layout.frame_points.range(f).start;
            let next_base = layout.frame_points.range(next).start;
            let idx: Vec<usize> = sample.trajectories.iter().map(|&i| base + i).collect();
            let predicted: Vec<Vector3<f64>> =
                idx.iter().map(|&r| point(&flow, r).coords).collect();
            let translated: Vec<Point3<f64>> = idx
                .iter()
                .zip(&predicted)
                .map(|(&r, v)| point(&points, r) + v)
                .collect();
            let target: Vec<Point3<f64>> = sample
                .trajectories
                .iter()
                .map(|&i| point(&points, next_base + i))
                .collect();
            let truth = sample.displacements.as_ref().map(|d| &d[k]);
            let term = flow_term(
                weights.flow_variant,
                &translated,
                &target,
                &predicted,
                truth,
                weights,
                swd_seed ^ ((s as u64) << 32 | k as u64),
            )?;
            seq_flow += term.value * scale * batch;
            flow_total += term.value * scale;
            rows.extend_from_slice(&idx);
            grad_rows.extend(term.grad.iter().map(|g| g * scale));
        }
        per_sequence_flow.push(seq_flow);
    }
    let picked = g.gather_rows(motion.flow, &rows)?;
    let grad = Matrix::from_vec(
        grad_rows.len(),
        3,
        grad_rows.iter().flat_map(|v| [v.x, v.y, v.z]).collect(),
    )?;
    let flow_var = g.scalar_fn(picked, flow_total, grad)?;

    Ok(DirectionFlow {
        loss: flow_var,
        value: flow_total,
        per_sequence: per_sequence_flow,
    })
}

/// Step diagnostics beyond the loss values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    /// Joint-loss evaluations per sequence (one per time direction).
    pub loss_evaluations: usize,
    pub lr: f64,
}

/// Forward pass and loss for a batch without updating anything. Returns the
/// graph, the loss node and the report.
pub fn batch_loss(
    model: &Model,
    batch: &[&PointCloudSequence],
    samples: &[SequenceSample],
    config: &TrainConfig,
    swd_seed: u64,
) -> Result<(Graph, Var, StepReport)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut g = Graph::new();
    let enc = model.encode(&mut g, batch)?;
    let motion = model.decode_motion(&mut g, &enc)?;
    let mut directions = vec![(enc, motion, samples.to_vec(), swd_seed)];
    if config.loss.directions == Directions::ForwardBackward {
        let reversed: Vec<PointCloudSequence> = batch.iter().map(|s| s.reversed()).collect();
        let reversed_refs: Vec<&PointCloudSequence> = reversed.iter().collect();
        let rev_samples: Vec<SequenceSample> =
            samples.iter().map(SequenceSample::reversed).collect();
        let enc_r = model.encode_reversed(&mut g, &directions[0].0, &reversed_refs)?;
        let motion_r = model.decode_motion(&mut g, &enc_r)?;
        directions.push((enc_r, motion_r, rev_samples, swd_seed.rotate_left(17)));
    }
    let flows = directions
        .iter()
        .map(|(enc, motion, samples, seed)| {
            direction_flow(&mut g, enc, motion, samples, &config.loss, *seed)
        })
        .collect::<Result<Vec<_>>>()?;

    // Queries of every direction go through the occupancy decoder as one
    // batch, so all of them are normalized with the same statistics.
    let mut qpoints = Vec::new();
    let mut labels = Vec::new();
    let mut lengths = Vec::new();
    let mut spans = Vec::new();
    for (_, _, samples, _) in &directions {
        let start = qpoints.len();
        for frame in samples.iter().flat_map(|s| &s.queries) {
            lengths.push(frame.len());
            qpoints.extend(frame.iter().map(|q| q.point));
            labels.extend(frame.iter().map(|q| q.label));
        }
        spans.push(start..qpoints.len());
    }
    let stack = |g: &mut Graph, vars: Vec<Var>| {
        if vars.len() == 1 {
            Ok(vars[0])
        } else {
            g.concat_rows(&vars)
        }
    };
    let codes = stack(&mut g, directions.iter().map(|d| d.0.fused.codes).collect())?;
    let pooled = stack(&mut g, directions.iter().map(|d| d.1.pooled).collect())?;
    let queries = g.input(points_matrix(&qpoints));
    let probs = model.occupancy.forward(
        &mut g,
        &model.store,
        queries,
        &Segments::from_lengths(&lengths),
        codes,
        pooled,
        Mode::Train,
    )?;

    let mut recon = 0.0;
    let mut total = None;
    for (flow, span) in flows.iter().zip(&spans) {
        let rows: Vec<usize> = span.clone().collect();
        let p = if spans.len() == 1 {
            probs
        } else {
            g.gather_rows(probs, &rows)?
        };
        let r = losses::attach_bce(&mut g, p, &labels[span.clone()])?;
        recon += g.value(r).item();
        let weighted = g.scale(r, config.loss.lambda);
        let part = g.add(flow.loss, weighted)?;
        total = Some(match total {
            None => part,
            Some(t) => g.add(t, part)?,
        });
    }
    let total = total.expect("at least one direction");
    let loss = LossBreakdown {
        flow: flows.iter().map(|f| f.value).sum(),
        recon,
        total: g.value(total).data()[0],
    };
    if !loss.total.is_finite() {
        let culprit = (0..batch.len())
            .find(|&s| flows.iter().any(|f| !f.per_sequence[s].is_finite()))
            .map(|s| batch[s].id.clone())
            .unwrap_or_else(|| {
                batch
                    .iter()
                    .map(|s| s.id.as_str())
                    .collect::<Vec<_>>()
                    .join(",")
            });
        return Err(Error::NonFiniteLoss {
            sequence: culprit,
            detail: format!("flow {} recon {}", loss.flow, loss.recon),
        });
    }
    let report = StepReport {
        loss,
        loss_evaluations: flows.len(),
        lr: 0.0,
    };
    Ok((g, total, report))
}

/// One optimization step on `batch` at `iteration`.
pub fn train_step(
    model: &mut Model,
    batch: &[&PointCloudSequence],
    config: &TrainConfig,
    iteration: u64,
) -> Result<StepReport> {
    let mut rng = step_rng(config.seed, iteration);
    let samples = sample_batch(batch, config, &mut rng)?;
    let (mut g, total, mut report) =
        batch_loss(model, batch, &samples, config, config.seed ^ iteration)?;
    let grads = g.backward(total)?;
    let mut grads = grads.into_params();
    if let Some(cap) = config.grad_clip {
        let norm = grads
            .values()
            .map(|m| m.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > cap {
            for m in grads.values_mut() {
                m.data_mut().iter_mut().for_each(|x| *x *= cap / norm);
            }
        }
    }
    let updates = g.take_stat_updates();
    apply_stat_updates(&mut model.store, &updates);
    let lr = config.lr_at(iteration);
    model.store.adam_step(&grads, lr)?;
    report.lr = lr;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub iteration: u64,
    pub metrics: MetricsSummary,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed iterations.
    pub iteration: u64,
    pub best_iou: Option<f64>,
    pub best_iteration: Option<u64>,
    pub validations_without_gain: usize,
    pub history: Vec<ValidationRecord>,
    /// Exponential moving average of the total loss.
    pub loss_ema: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub flow: f64,
    pub recon: f64,
    pub total: f64,
    pub lr: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub state: TrainState,
    pub train_set: Vec<PointCloudSequence>,
    pub val_set: Vec<PointCloudSequence>,
    pub out_dir: Option<PathBuf>,
    log: Option<BufWriter<File>>,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";

impl Trainer {
    pub fn new(
        config: TrainConfig,
        train_set: Vec<PointCloudSequence>,
        val_set: Vec<PointCloudSequence>,
    ) -> Result<Self> {
        config.validate()?;
        if train_set.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let model = Model::new(config.model, config.fusion, config.seed)?;
        Ok(Trainer {
            config,
            model,
            state: TrainState::default(),
            train_set,
            val_set,
            out_dir: None,
            log: None,
        })
    }

    /// Writes the JSON-lines log and checkpoints under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(LOG_FILE))?;
        self.log = Some(BufWriter::new(log));
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    /// Batch indices of `iteration`: the whole set when it fits, otherwise a
    /// seeded draw without replacement.
    pub fn batch_indices(&self, iteration: u64) -> Vec<usize> {
        let n = self.train_set.len();
        if n <= self.config.batch_size {
            return (0..n).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_ba7c);
        rng.set_stream(iteration);
        let mut idx = sample_indices(&mut rng, n, self.config.batch_size).into_vec();
        idx.sort_unstable();
        idx
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let it = self.state.iteration;
        let idx = self.batch_indices(it);
        let batch: Vec<&PointCloudSequence> = idx.iter().map(|&i| &self.train_set[i]).collect();
        let report = train_step(&mut self.model, &batch, &self.config, it)?;
        self.state.iteration += 1;
        let t = report.loss.total;
        self.state.loss_ema = Some(self.state.loss_ema.map_or(t, |e| 0.98 * e + 0.02 * t));
        if let Some(log) = &mut self.log {
            let rec = LogRecord {
                iter: self.state.iteration,
                flow: report.loss.flow,
                recon: report.loss.recon,
                total: report.loss.total,
                lr: report.lr,
            };
            serde_json::to_writer(&mut *log, &rec)?;
            log.write_all(b"\n")?;
        }
        Ok(report)
    }

    /// Validates, records the result and keeps the best checkpoint by IoU.
    pub fn run_validation(&mut self) -> Result<Option<MetricsSummary>> {
        if self.val_set.is_empty() {
            return Ok(None);
        }
        let metrics = validate(&self.model, &self.val_set, &self.config.eval)?;
        let improved = self.state.best_iou.is_none_or(|b| metrics.iou > b);
        self.state.history.push(ValidationRecord {
            iteration: self.state.iteration,
            metrics: metrics.clone(),
        });
        if improved {
            self.state.best_iou = Some(metrics.iou);
            self.state.best_iteration = Some(self.state.iteration);
            self.state.validations_without_gain = 0;
            if let Some(dir) = self.out_dir.clone() {
                self.save(&dir.join(BEST_CHECKPOINT))?;
            }
        } else {
            self.state.validations_without_gain += 1;
        }
        Ok(Some(metrics))
    }

    pub fn should_stop(&self) -> bool {
        self.state.iteration >= self.config.max_iters
            || self.state.validations_without_gain >= self.config.patience
    }

    /// Trains until `max_iters` or early stop, validating every `val_every`
    /// iterations. Returns the last step report.
    pub fn fit(&mut self) -> Result<Option<StepReport>> {
        let mut last = None;
        while !self.should_stop() {
            last = Some(self.step()?);
            if self.state.iteration.is_multiple_of(self.config.val_every) {
                self.run_validation()?;
            }
        }
        if let Some(log) = &mut self.log {
            log.flush()?;
        }
        if let Some(dir) = self.out_dir.clone() {
            self.save(&dir.join(LAST_CHECKPOINT))?;
        }
        Ok(last)
    }

    pub fn metadata(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "format": "f4d-checkpoint",
            "version": 1,
            "config": self.config,
            "state": self.state,
        }))
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        if let Some(log) = &mut self.log {
            log.flush()?;
        }
        let meta = self.metadata()?;
        let mut w = BufWriter::new(File::create(path)?);
        save_checkpoint(&self.model.store, &meta, &mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Restores parameters, optimizer state and training state.
    pub fn resume(&mut self, path: &Path) -> Result<()> {
        let meta = load_checkpoint(&mut self.model.store, BufReader::new(File::open(path)?))?;
        self.state = serde_json::from_value(meta["state"].clone())?;
        Ok(())
    }
}

/// Loads a model and its training config from a checkpoint file.
pub fn load_model(path: &Path) -> Result<(Model, TrainConfig)> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    // the config is needed to build the model before reading the arrays
    let meta = crate::nn::read_checkpoint_metadata(&mut reader)?;
    let config: TrainConfig = serde_json::from_value(meta["config"].clone())?;
    let mut model = Model::new(config.model, config.fusion, config.seed)?;
    load_checkpoint(&mut model.store, BufReader::new(File::open(path)?))?;
    Ok((model, config))
}
