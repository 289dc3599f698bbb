//! Experiment orchestration: configuration, pre-training and fine-tuning
//! runs, evaluation, metrics files and the five-row ablation.

mod ablation;
mod config;
mod metrics;
mod selftest;
mod train;

use std::path::Path;

pub use ablation::{
    run_ablation, AblationMatrix, AblationReport, AblationRow, CellResult, MeanStd, RowSummary, TrendCheck, THREADS_ENV,
};
pub use config::{DataConfig, ExperimentConfig, PhaseConfig};
pub use metrics::{emit_metrics, format_f64, read_csv, summary_json, write_csv, Accuracy, MetricsRecord, CSV_HEADER};
pub use train::{
    evaluate, run_finetune, run_pretrain, FinetuneOutcome, PretrainOutcome, RunDigests, FINETUNE_CHECKPOINT,
    PRETRAIN_CHECKPOINT,
};

pub use selftest::{run_selftest, SelfTestResult};

use crate::error::Result;

/// Pre-training followed by fine-tuning; writes one metrics file covering
/// both phases plus both checkpoints into `out`.
pub fn run_full(cfg: &ExperimentConfig, out: &Path) -> Result<(PretrainOutcome, FinetuneOutcome)> {
    let pre = run_pretrain(cfg, Some(out))?;
    let ft = run_finetune(cfg, &pre.checkpoint(), Some(out))?;
    let mut records = pre.records.clone();
    records.extend(ft.records.iter().cloned());
    let extra = serde_json::json!({
        "load_report": ft.load_report,
        "val_accuracy": ft.val_accuracy,
        "train_accuracy": ft.train_accuracy,
        "digests": { "pretrain": pre.digests, "finetune": ft.digests },
    });
    emit_metrics(&records, cfg, extra, out)?;
    Ok((pre, ft))
}
