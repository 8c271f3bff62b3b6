//! Desk-scale experiment jobs: overfitting a single synthetic sequence and
//! running a matrix of model/loss variants on it or on a dataset.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{csv_error, evaluate_set, EvalConfig, MetricsSummary};
use crate::fusion::FusionMode;
use crate::losses::{Directions, FlowVariant};
use crate::model::SequenceModel;
use crate::synthetic::{
    sample_surface_sequence, DeformingShape, PointCloudSequence, ShapeFamily, TemporalMode,
};
use crate::trainer::{TrainConfig, Trainer};

/// Mean endpoint error of the predicted flow over every point and step,
/// divided by the mean ground-truth displacement.
pub fn flow_error_ratio<M: SequenceModel>(model: &M, seq: &PointCloudSequence) -> Result<f64> {
    let prepared = model.prepare(seq)?;
    let (mut err, mut mag) = (0.0, 0.0);
    for k in 0..seq.frames.len().saturating_sub(1) {
        let truth = seq.ground_truth_displacements(k).ok_or_else(|| {
            Error::InvalidArgument(format!("sequence `{}` has no ground-truth flow", seq.id))
        })?;
        for (p, t) in model.flow(&prepared, k).iter().zip(&truth) {
            err += (p - t).norm();
            mag += t.norm();
        }
    }
    if mag == 0.0 {
        return Err(Error::InvalidArgument("sequence does not move".into()));
    }
    Ok(err / mag)
}

/// One synthetic sequence used for both training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverfitJob {
    pub family: ShapeFamily,
    pub frames: usize,
    pub n_points: usize,
    pub temporal_mode: TemporalMode,
    pub data_seed: u64,
    pub train: TrainConfig,
}

impl Default for OverfitJob {
    fn default() -> Self {
        OverfitJob {
            family: ShapeFamily::ArticulatedDumbbell,
            frames: 8,
            n_points: 300,
            temporal_mode: TemporalMode::Even,
            data_seed: 0,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobOutcome {
    pub metrics: MetricsSummary,
    pub flow_error_ratio: Option<f64>,
    pub iterations: u64,
    pub final_loss: Option<f64>,
    pub runtime_secs: f64,
}

impl OverfitJob {
    pub fn sequence(&self) -> Result<PointCloudSequence> {
        let shape = DeformingShape::default_of(self.family, self.frames)?;
        sample_surface_sequence(
            &shape,
            self.n_points,
            self.temporal_mode,
            0.0,
            self.data_seed,
        )
    }

    /// Trains on the sequence, then evaluates the final parameters on it.
    pub fn run(&self) -> Result<(Trainer, JobOutcome)> {
        let seq = self.sequence()?;
        let mut train = self.train.clone();
        train.batch_size = 1;
        let start = Instant::now();
        let mut trainer = Trainer::new(train, vec![seq.clone()], Vec::new())?;
        let last = trainer.fit()?;
        let set = [seq];
        let metrics =
            MetricsSummary::of(&evaluate_set(&trainer.model, &set, &trainer.config.eval)?)?;
        let flow = flow_error_ratio(&trainer.model, &set[0])?;
        let outcome = JobOutcome {
            metrics,
            flow_error_ratio: Some(flow),
            iterations: trainer.state.iteration,
            final_loss: last.map(|r| r.loss.total),
            runtime_secs: start.elapsed().as_secs_f64(),
        };
        Ok((trainer, outcome))
    }
}

/// One configuration of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub fusion: FusionMode,
    pub flow_variant: FlowVariant,
    pub directions: Directions,
}

impl AblationCell {
    pub fn name(&self) -> String {
        format!(
            "{}/{}/{}",
            self.fusion.name(),
            self.flow_variant.name(),
            self.directions.name()
        )
    }

    pub fn apply(&self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        c.fusion.mode = self.fusion;
        c.loss.flow_variant = self.flow_variant;
        c.loss.directions = self.directions;
        c
    }
}

/// Every combination, fusion modes outermost.
pub fn ablation_matrix(
    fusions: &[FusionMode],
    variants: &[FlowVariant],
    directions: &[Directions],
) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for &fusion in fusions {
        for &flow_variant in variants {
            for &d in directions {
                cells.push(AblationCell {
                    fusion,
                    flow_variant,
                    directions: d,
                });
            }
        }
    }
    cells
}

pub const DEFAULT_FUSIONS: [FusionMode; 3] = [
    FusionMode::Concat,
    FusionMode::SingleCrossAttn,
    FusionMode::DualCrossAttn,
];
pub const DEFAULT_DIRECTIONS: [Directions; 2] =
    [Directions::ForwardOnly, Directions::ForwardBackward];

/// One report row. Failed cells keep their error and no metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub iou: Option<f64>,
    pub chamfer: Option<f64>,
    pub correspondence: Option<f64>,
    pub runtime_secs: f64,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn from_result(
        cell: AblationCell,
        result: Result<MetricsSummary>,
        runtime_secs: f64,
    ) -> Self {
        match result {
            Ok(m) => AblationRow {
                cell,
                iou: Some(m.iou),
                chamfer: m.chamfer,
                correspondence: m.correspondence,
                runtime_secs,
                error: None,
            },
            Err(e) => AblationRow {
                cell,
                iou: None,
                chamfer: None,
                correspondence: None,
                runtime_secs,
                error: Some(e.to_string()),
            },
        }
    }
}

/// Trains every cell on `train_set` and evaluates on `eval_set`. A failing
/// cell is recorded and the matrix continues.
pub fn run_ablation(
    cells: &[AblationCell],
    base: &TrainConfig,
    train_set: &[PointCloudSequence],
    eval_set: &[PointCloudSequence],
    eval: &EvalConfig,
    mut on_row: impl FnMut(&AblationRow),
) -> Vec<AblationRow> {
    cells
        .iter()
        .map(|cell| {
            let start = Instant::now();
            let result = (|| {
                let mut trainer = Trainer::new(cell.apply(base), train_set.to_vec(), Vec::new())?;
                trainer.fit()?;
                MetricsSummary::of(&evaluate_set(&trainer.model, eval_set, eval)?)
            })();
            let row = AblationRow::from_result(*cell, result, start.elapsed().as_secs_f64());
            on_row(&row);
            row
        })
        .collect()
}

/// Metric columns of the report, after the cell label.
pub const REPORT_COLUMNS: [&str; 4] = ["IoU", "Chamfer", "Corres.", "runtime"];

fn cell_text(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header = vec!["cell"];
    header.extend(REPORT_COLUMNS);
    w.write_record(&header).map_err(csv_error)?;
    for r in rows {
        w.write_record([
            r.cell.name(),
            cell_text(r.iou),
            cell_text(r.chamfer),
            cell_text(r.correspondence),
            format!("{:.3}", r.runtime_secs),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ablation_json(rows: &[AblationRow], path: &Path) -> Result<()> {
    let table: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "cell": r.cell,
                "IoU": r.iou,
                "Chamfer": r.chamfer,
                "Corres.": r.correspondence,
                "runtime": r.runtime_secs,
                "error": r.error,
            })
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&table)?)?;
    Ok(())
}

/// Plain-text table for terminals and logs.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<48} {:>8} {:>10} {:>10} {:>9}\n",
        "cell", REPORT_COLUMNS[0], REPORT_COLUMNS[1], REPORT_COLUMNS[2], REPORT_COLUMNS[3]
    );
    for r in rows {
        let f = |v: Option<f64>, p: usize| v.map_or("failed".to_string(), |x| format!("{x:.p$}"));
        out.push_str(&format!(
            "{:<48} {:>8} {:>10} {:>10} {:>8.1}s\n",
            r.cell.name(),
            f(r.iou, 4),
            f(r.chamfer, 5),
            f(r.correspondence, 5),
            r.runtime_secs
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::AnalyticModel;

    #[test]
    fn default_matrix_has_six_cells() {
        let cells = ablation_matrix(
            &DEFAULT_FUSIONS,
            &[FlowVariant::Chamfer],
            &DEFAULT_DIRECTIONS,
        );
        assert_eq!(cells.len(), 6);
        let extra = ablation_matrix(
            &DEFAULT_FUSIONS,
            &[
                FlowVariant::Chamfer,
                FlowVariant::Hausdorff,
                FlowVariant::SlicedWasserstein,
            ],
            &DEFAULT_DIRECTIONS,
        );
        assert_eq!(extra.len(), 18);
        assert_eq!(cells[0].name(), "concat/chamfer/forward_only");
    }

    #[test]
    fn exact_flow_has_zero_error() {
        let job = OverfitJob::default();
        let seq = job.sequence().unwrap();
        assert_eq!(
            flow_error_ratio(&AnalyticModel { band: 0.01 }, &seq).unwrap(),
            0.0
        );
    }

    #[test]
    fn report_files_have_the_metric_columns() {
        let cell = ablation_matrix(
            &[FusionMode::Concat],
            &[FlowVariant::Chamfer],
            &[Directions::ForwardOnly],
        )[0];
        let rows = vec![
            AblationRow::from_result(
                cell,
                Ok(MetricsSummary {
                    iou: 0.5,
                    chamfer: Some(0.1),
                    correspondence: Some(0.2),
                    sequences: 1,
                }),
                1.0,
            ),
            AblationRow::from_result(cell, Err(Error::Empty("batch")), 0.5),
        ];
        let dir = tempfile::tempdir().unwrap();
        write_ablation_csv(&rows, &dir.path().join("a.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "cell,IoU,Chamfer,Corres.,runtime"
        );
        assert_eq!(text.lines().count(), 3);
        write_ablation_json(&rows, &dir.path().join("a.json")).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.json")).unwrap())
                .unwrap();
        assert_eq!(v.as_array().unwrap().len(), 2);
        assert!(v[1]["error"].is_string());
        assert!(format_ablation_table(&rows).contains("failed"));
    }
}
