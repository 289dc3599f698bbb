use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::perturb::Phase;

use super::ExperimentConfig;

pub const CSV_HEADER: [&str; 11] = [
    "phase",
    "epoch",
    "loss_itc",
    "loss_itm",
    "loss_mlm",
    "loss_lm",
    "acc_open",
    "acc_closed",
    "acc_overall",
    "perturb_norm",
    "clip_frac",
];

/// Correct/total counts per question type.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct_open: usize,
    pub total_open: usize,
    pub correct_closed: usize,
    pub total_closed: usize,
}

fn ratio(c: usize, t: usize) -> f64 {
    if t == 0 {
        0.0
    } else {
        c as f64 / t as f64
    }
}

impl Accuracy {
    pub fn open(&self) -> f64 {
        ratio(self.correct_open, self.total_open)
    }

    pub fn closed(&self) -> f64 {
        ratio(self.correct_closed, self.total_closed)
    }

    pub fn overall(&self) -> f64 {
        ratio(
            self.correct_open + self.correct_closed,
            self.total_open + self.total_closed,
        )
    }
}

/// One row of the metrics file: one epoch of one phase. Cells that do not
/// apply to the phase are `None` and written empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: Phase,
    /// 1-based within the phase.
    pub epoch: usize,
    pub loss_itc: Option<f64>,
    pub loss_itm: Option<f64>,
    pub loss_mlm: Option<f64>,
    pub loss_lm: Option<f64>,
    pub acc_open: Option<f64>,
    pub acc_closed: Option<f64>,
    pub acc_overall: Option<f64>,
    /// Mean pre-clip perturbation norm over the epoch's steps.
    pub perturb_norm: Option<f64>,
    /// Mean fraction of clipped perturbation elements.
    pub clip_frac: Option<f64>,
}

impl MetricsRecord {
    pub fn new(phase: Phase, epoch: usize) -> Self {
        Self {
            phase,
            epoch,
            loss_itc: None,
            loss_itm: None,
            loss_mlm: None,
            loss_lm: None,
            acc_open: None,
            acc_closed: None,
            acc_overall: None,
            perturb_norm: None,
            clip_frac: None,
        }
    }

    pub fn with_accuracy(mut self, acc: &Accuracy) -> Self {
        self.acc_open = Some(acc.open());
        self.acc_closed = Some(acc.closed());
        self.acc_overall = Some(acc.overall());
        self
    }

    fn values(&self) -> [Option<f64>; 9] {
        [
            self.loss_itc,
            self.loss_itm,
            self.loss_mlm,
            self.loss_lm,
            self.acc_open,
            self.acc_closed,
            self.acc_overall,
            self.perturb_norm,
            self.clip_frac,
        ]
    }

    /// Pre-training total loss (unit-weighted sum of the three components).
    pub fn pretrain_total(&self) -> Option<f64> {
        Some(self.loss_itc? + self.loss_itm? + self.loss_mlm?)
    }
}

/// 17 significant digits: enough to parse back to the same `f64`.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv<W: std::io::Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        let mut row = vec![r.phase.to_string(), r.epoch.to_string()];
        row.extend(r.values().iter().map(|v| v.map(format_f64).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    if rd.headers()?.iter().ne(CSV_HEADER) {
        return Err(Error::Metrics("unexpected CSV header".into()));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let phase = match &row[0] {
            "pretrain" => Phase::Pretrain,
            "finetune" => Phase::Finetune,
            p => return Err(Error::Metrics(format!("unknown phase `{p}`"))),
        };
        let epoch = row[1]
            .parse()
            .map_err(|_| Error::Metrics(format!("bad epoch `{}`", &row[1])))?;
        let mut vals = [None; 9];
        for (i, v) in vals.iter_mut().enumerate() {
            let cell = &row[i + 2];
            if !cell.is_empty() {
                *v = Some(
                    cell.parse::<f64>()
                        .map_err(|_| Error::Metrics(format!("bad number `{cell}`")))?,
                );
            }
        }
        let [loss_itc, loss_itm, loss_mlm, loss_lm, acc_open, acc_closed, acc_overall, perturb_norm, clip_frac] = vals;
        out.push(MetricsRecord {
            phase,
            epoch,
            loss_itc,
            loss_itm,
            loss_mlm,
            loss_lm,
            acc_open,
            acc_closed,
            acc_overall,
            perturb_norm,
            clip_frac,
        });
    }
    Ok(out)
}

/// Summary with the resolved config and the last record of each phase.
pub fn summary_json(records: &[MetricsRecord], config: &ExperimentConfig, extra: Value) -> Value {
    let last = |phase| records.iter().rev().find(|r| r.phase == phase);
    json!({
        "config": config.to_json(),
        "final": {
            "pretrain": last(Phase::Pretrain),
            "finetune": last(Phase::Finetune),
        },
        "epochs_recorded": records.len(),
        "details": extra,
    })
}

/// Writes `metrics.csv` and `summary.json` into `dir`.
pub fn emit_metrics(records: &[MetricsRecord], config: &ExperimentConfig, extra: Value, dir: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Metrics("no records to write".into()));
    }
    std::fs::create_dir_all(dir)?;
    let f = std::fs::File::create(dir.join("metrics.csv"))?;
    write_csv(records, std::io::BufWriter::new(f))?;
    let summary = summary_json(records, config, extra);
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}
