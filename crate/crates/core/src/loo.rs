//! Leave-one-out evaluation: train on all datasets but one, evaluate on
//! the held-out one, for each dataset in turn.

use std::collections::BTreeMap;

use crate::detections::Stage;
use crate::error::{Error, Result};
use crate::eval::{DatasetReport, EvalConfig, Report};
use crate::pipeline::{run_cascade, Cascade, PipelineOutput};
use crate::train::{train_cascade, Dataset, TrainConfig, TrainingLog};

#[derive(Debug, Clone)]
pub struct Fold {
    pub held_out: usize,
    pub cascade: Cascade,
    pub log: TrainingLog,
    pub output: PipelineOutput,
    pub report: DatasetReport,
}

#[derive(Debug, Clone)]
pub struct LeaveOneOut {
    pub folds: Vec<Fold>,
    /// Per-fold reports with pooled micro and macro summaries.
    pub report: Report,
}

/// Runs one fold per dataset. Reports are named after each volume's id.
pub fn leave_one_out(
    datasets: &[Dataset],
    config: &TrainConfig,
    eval: &EvalConfig,
) -> Result<LeaveOneOut> {
    leave_one_out_with(datasets, config, eval, |_, _| {})
}

/// As [`leave_one_out`], calling `progress(fold, &report)` after each fold.
pub fn leave_one_out_with(
    datasets: &[Dataset],
    config: &TrainConfig,
    eval: &EvalConfig,
    mut progress: impl FnMut(usize, &DatasetReport),
) -> Result<LeaveOneOut> {
    if datasets.len() < 2 {
        return Err(Error::Empty(format!(
            "leave-one-out needs at least 2 datasets, got {}",
            datasets.len()
        )));
    }
    let mut folds = Vec::with_capacity(datasets.len());
    for held_out in 0..datasets.len() {
        let train: Vec<&Dataset> = datasets
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != held_out)
            .map(|(_, d)| d)
            .collect();
        let (cascade, log) = train_cascade(&train, config)?;
        let test = &datasets[held_out];
        let output = run_cascade(&test.volume, &cascade)?;
        let stages = BTreeMap::from([
            (Stage::Raw, &output.raw),
            (Stage::VolumeFused, &output.volume_fused),
            (Stage::Final, &output.final_sets),
        ]);
        let report = DatasetReport::evaluate(test.volume.id.clone(), &stages, &test.events, eval);
        progress(held_out, &report);
        folds.push(Fold {
            held_out,
            cascade,
            log,
            output,
            report,
        });
    }
    let report = Report::new(folds.iter().map(|f| f.report.clone()).collect());
    Ok(LeaveOneOut { folds, report })
}
