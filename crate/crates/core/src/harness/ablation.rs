use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::Checkpoint;

use super::{emit_metrics, run_finetune, run_pretrain, ExperimentConfig, MetricsRecord, RunDigests};

/// Environment variable capping the number of cells run in parallel.
pub const THREADS_ENV: &str = "GGP_THREADS";

/// The five ablation settings: where perturbation is applied and how its
/// magnitude is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum AblationRow {
    Baseline,
    PretrainAdaptive,
    FinetuneAdaptive,
    BothFixed,
    BothAdaptive,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] = [
        AblationRow::Baseline,
        AblationRow::PretrainAdaptive,
        AblationRow::FinetuneAdaptive,
        AblationRow::BothFixed,
        AblationRow::BothAdaptive,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationRow::Baseline => "baseline",
            AblationRow::PretrainAdaptive => "PT+APM",
            AblationRow::FinetuneAdaptive => "FT+APM",
            AblationRow::BothFixed => "PT+FT fixed",
            AblationRow::BothAdaptive => "PT+FT+APM",
        }
    }

    /// `(pretrain, finetune, adaptive)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            AblationRow::Baseline => (false, false, true),
            AblationRow::PretrainAdaptive => (true, false, true),
            AblationRow::FinetuneAdaptive => (false, true, true),
            AblationRow::BothFixed => (true, true, false),
            AblationRow::BothAdaptive => (true, true, true),
        }
    }

    /// `base` with only the perturbation flags changed.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let (pt, ft, adaptive) = self.flags();
        let mut cfg = base.clone();
        cfg.ggp.enabled_pretrain = pt;
        cfg.ggp.enabled_finetune = ft;
        cfg.ggp.adaptive_magnitude = adaptive;
        cfg
    }

    /// Rows whose pre-training is identical share one run. Adaptivity only
    /// matters when pre-training is perturbed.
    fn pretrain_key(self) -> (bool, bool) {
        let (pt, _, adaptive) = self.flags();
        (pt, pt && adaptive)
    }
}

/// The five row configs derived from one base config.
#[derive(Clone, Debug)]
pub struct AblationMatrix {
    pub rows: Vec<(AblationRow, ExperimentConfig)>,
}

impl AblationMatrix {
    pub fn new(base: &ExperimentConfig) -> Self {
        Self {
            rows: AblationRow::ALL.iter().map(|&r| (r, r.apply(base))).collect(),
        }
    }
}

/// Result of one (row, seed) cell.
#[derive(Clone, Debug, Serialize)]
pub struct CellResult {
    pub row: AblationRow,
    pub seed: u64,
    pub acc_open: f64,
    pub acc_closed: f64,
    pub acc_overall: f64,
    pub train_overall: f64,
    /// Per-epoch validation accuracy `(open, closed, overall)`.
    pub curve: Vec<(f64, f64, f64)>,
    pub pretrain_digests: RunDigests,
    pub finetune_digests: RunDigests,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for fewer than two values.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RowSummary {
    pub row: AblationRow,
    pub label: &'static str,
    pub completed: usize,
    pub open: MeanStd,
    pub closed: MeanStd,
    pub overall: MeanStd,
    /// `(seed, error)` for every cell that failed.
    pub failures: Vec<(u64, String)>,
}

/// Directional comparisons between the row means.
#[derive(Clone, Debug, Serialize)]
pub struct TrendCheck {
    pub full_ge_baseline: bool,
    pub full_ge_fixed: bool,
    /// Raised, not failed, when fine-tune-only perturbation matches or beats
    /// the full setting.
    pub finetune_only_flag: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<RowSummary>,
    pub cells: Vec<CellResult>,
    pub trend: TrendCheck,
    /// Per seed, whether every row consumed identical data, initial weights
    /// and batch orders.
    pub isolation_ok: bool,
}

impl AblationReport {
    pub fn row(&self, row: AblationRow) -> &RowSummary {
        self.rows
            .iter()
            .find(|r| r.row == row)
            .expect("every row is summarized")
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{:<12} {:>4}  {:>15}  {:>15}  {:>15}",
            "row", "n", "open", "closed", "overall"
        )
        .unwrap();
        for r in &self.rows {
            let f = |m: MeanStd| format!("{:.4} ± {:.4}", m.mean, m.std);
            writeln!(
                s,
                "{:<12} {:>4}  {:>15}  {:>15}  {:>15}",
                r.label,
                r.completed,
                f(r.open),
                f(r.closed),
                f(r.overall)
            )
            .unwrap();
        }
        writeln!(
            s,
            "full ≥ baseline: {}   full ≥ fixed: {}   FT-only ≥ full: {}   isolation: {}",
            self.trend.full_ge_baseline,
            self.trend.full_ge_fixed,
            self.trend.finetune_only_flag,
            if self.isolation_ok { "ok" } else { "VIOLATED" }
        )
        .unwrap();
        s
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

struct Pretrained {
    checkpoint: Checkpoint,
    records: Vec<MetricsRecord>,
    digests: RunDigests,
}

/// Runs every row for every seed. Rows with identical pre-training share
/// one run. A failing cell is recorded and the rest proceed. With `out`
/// set, each cell writes its metrics under `out/<row>/seed-<s>/` and the
/// report goes to `out/ablation.{csv,json}` and `out/curves.csv`.
pub fn run_ablation(base: &ExperimentConfig, seeds: &[u64], out: Option<&Path>) -> Result<AblationReport> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!(
            "ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    base.validate()?;
    let matrix = AblationMatrix::new(base);
    let pool = thread_pool()?;

    let mut pre_jobs: Vec<(u64, (bool, bool), ExperimentConfig)> = Vec::new();
    for &seed in seeds {
        for (row, cfg) in &matrix.rows {
            let key = row.pretrain_key();
            if !pre_jobs.iter().any(|(s, k, _)| *s == seed && *k == key) {
                let mut c = cfg.clone();
                c.seed = seed;
                pre_jobs.push((seed, key, c));
            }
        }
    }
    let pretrained: Vec<((u64, (bool, bool)), std::result::Result<Pretrained, String>)> = pool.install(|| {
        pre_jobs
            .par_iter()
            .map(|(seed, key, cfg)| {
                let r = run_pretrain(cfg, None)
                    .map(|o| Pretrained {
                        checkpoint: o.checkpoint(),
                        records: o.records,
                        digests: o.digests,
                    })
                    .map_err(|e| e.to_string());
                ((*seed, *key), r)
            })
            .collect()
    });
    let pretrained: BTreeMap<_, _> = pretrained.into_iter().collect();

    let mut ft_jobs = Vec::new();
    for &seed in seeds {
        for (row, cfg) in &matrix.rows {
            let mut c = cfg.clone();
            c.seed = seed;
            ft_jobs.push((*row, seed, c));
        }
    }
    let cells: Vec<(AblationRow, u64, std::result::Result<CellResult, String>)> = pool.install(|| {
        ft_jobs
            .par_iter()
            .map(|(row, seed, cfg)| {
                let result = match &pretrained[&(*seed, row.pretrain_key())] {
                    Err(e) => Err(format!("pre-training failed: {e}")),
                    Ok(pre) => run_cell(*row, cfg, pre, out),
                };
                (*row, *seed, result)
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut ok_cells = Vec::new();
    for row in AblationRow::ALL {
        let mut open = Vec::new();
        let mut closed = Vec::new();
        let mut overall = Vec::new();
        let mut failures = Vec::new();
        for (r, seed, res) in &cells {
            if *r != row {
                continue;
            }
            match res {
                Ok(c) => {
                    open.push(c.acc_open);
                    closed.push(c.acc_closed);
                    overall.push(c.acc_overall);
                    ok_cells.push(c.clone());
                }
                Err(e) => failures.push((*seed, e.clone())),
            }
        }
        rows.push(RowSummary {
            row,
            label: row.label(),
            completed: overall.len(),
            open: MeanStd::of(&open),
            closed: MeanStd::of(&closed),
            overall: MeanStd::of(&overall),
            failures,
        });
    }
    let mean = |row: AblationRow| rows.iter().find(|r| r.row == row).unwrap().overall.mean;
    let full = mean(AblationRow::BothAdaptive);
    let trend = TrendCheck {
        full_ge_baseline: full >= mean(AblationRow::Baseline),
        full_ge_fixed: full >= mean(AblationRow::BothFixed),
        finetune_only_flag: mean(AblationRow::FinetuneAdaptive) >= full,
    };
    let isolation_ok = seeds.iter().all(|&s| {
        let mine: Vec<&CellResult> = ok_cells.iter().filter(|c| c.seed == s).collect();
        mine.windows(2).all(|w| {
            let (a, b) = (w[0], w[1]);
            a.pretrain_digests == b.pretrain_digests
                && a.finetune_digests.data == b.finetune_digests.data
                && a.finetune_digests.order == b.finetune_digests.order
        })
    });
    let report = AblationReport {
        seeds: seeds.to_vec(),
        rows,
        cells: ok_cells,
        trend,
        isolation_ok,
    };
    if let Some(dir) = out {
        write_report(&report, dir)?;
    }
    Ok(report)
}

fn run_cell(
    row: AblationRow,
    cfg: &ExperimentConfig,
    pre: &Pretrained,
    out: Option<&Path>,
) -> std::result::Result<CellResult, String> {
    let ft = run_finetune(cfg, &pre.checkpoint, None).map_err(|e| e.to_string())?;
    if let Some(dir) = out {
        let cell_dir = dir.join(row_dir(row)).join(format!("seed-{}", cfg.seed));
        let mut records = pre.records.clone();
        records.extend(ft.records.iter().cloned());
        let extra = serde_json::json!({
            "row": row.label(),
            "val_accuracy": ft.val_accuracy,
            "train_accuracy": ft.train_accuracy,
        });
        emit_metrics(&records, cfg, extra, &cell_dir).map_err(|e| e.to_string())?;
    }
    Ok(CellResult {
        row,
        seed: cfg.seed,
        acc_open: ft.val_accuracy.open(),
        acc_closed: ft.val_accuracy.closed(),
        acc_overall: ft.val_accuracy.overall(),
        train_overall: ft.train_accuracy.overall(),
        curve: ft
            .records
            .iter()
            .map(|r| (r.acc_open.unwrap(), r.acc_closed.unwrap(), r.acc_overall.unwrap()))
            .collect(),
        pretrain_digests: pre.digests.clone(),
        finetune_digests: ft.digests,
    })
}

fn row_dir(row: AblationRow) -> &'static str {
    match row {
        AblationRow::Baseline => "baseline",
        AblationRow::PretrainAdaptive => "pt_apm",
        AblationRow::FinetuneAdaptive => "ft_apm",
        AblationRow::BothFixed => "pt_ft_fixed",
        AblationRow::BothAdaptive => "pt_ft_apm",
    }
}

fn write_report(report: &AblationReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
    w.write_record([
        "row",
        "completed",
        "open_mean",
        "open_std",
        "closed_mean",
        "closed_std",
        "overall_mean",
        "overall_std",
    ])?;
    for r in &report.rows {
        let mut rec = vec![r.label.to_string(), r.completed.to_string()];
        for m in [r.open, r.closed, r.overall] {
            rec.push(super::format_f64(m.mean));
            rec.push(super::format_f64(m.std));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("curves.csv"))?;
    w.write_record(["row", "seed", "epoch", "acc_open", "acc_closed", "acc_overall"])?;
    for c in &report.cells {
        for (e, (o, cl, ov)) in c.curve.iter().enumerate() {
            w.write_record([
                c.row.label().to_string(),
                c.seed.to_string(),
                (e + 1).to_string(),
                super::format_f64(*o),
                super::format_f64(*cl),
                super::format_f64(*ov),
            ])?;
        }
    }
    w.flush()?;
    std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_differ_only_in_flags() {
        let base = ExperimentConfig::default();
        let m = AblationMatrix::new(&base);
        assert_eq!(m.rows.len(), 5);
        for (_, cfg) in &m.rows {
            let mut c = cfg.clone();
            c.ggp.enabled_pretrain = base.ggp.enabled_pretrain;
            c.ggp.enabled_finetune = base.ggp.enabled_finetune;
            c.ggp.adaptive_magnitude = base.ggp.adaptive_magnitude;
            assert_eq!(c, base);
        }
    }

    #[test]
    fn three_distinct_pretrainings() {
        let keys: std::collections::BTreeSet<_> = AblationRow::ALL.iter().map(|r| r.pretrain_key()).collect();
        assert_eq!(keys.len(), 3);
        assert_eq!(
            AblationRow::Baseline.pretrain_key(),
            AblationRow::FinetuneAdaptive.pretrain_key()
        );
        assert_eq!(
            AblationRow::PretrainAdaptive.pretrain_key(),
            AblationRow::BothAdaptive.pretrain_key()
        );
    }

    #[test]
    fn mean_and_sample_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[2.0]).std, 0.0);
    }

    #[test]
    fn too_few_seeds() {
        assert!(run_ablation(&ExperimentConfig::default(), &[1, 2], None).is_err());
    }
}
