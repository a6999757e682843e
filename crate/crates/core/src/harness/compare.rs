use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::thread;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::load_dataset;
use super::run::{run_experiment_on, RunRecord};
use crate::error::{Error, Result};
use crate::normlayers::NormVariant;
use crate::numcore::Rng;

/// Final metrics of one variant. Diverged runs report metrics of their
/// last completed epoch (NaN if none).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: NormVariant,
    pub seed: u64,
    pub dataset_hash: String,
    pub status: String,
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub final_val_acc: f64,
    pub best_train_acc: f64,
    pub best_val_epoch: Option<usize>,
    pub best_val_loss: f64,
    /// `val_loss - train_loss` at the best-validation epoch.
    pub overfit_gap: f64,
    pub test_acc: Option<f64>,
}

impl ComparisonRow {
    fn from_record(r: &RunRecord) -> Self {
        let last = r.epochs.last();
        let best = r.epochs.iter().filter(|e| e.val_loss.is_finite()).min_by(|a, b| a.val_loss.total_cmp(&b.val_loss));
        ComparisonRow {
            variant: r.config.variant,
            seed: r.provenance.seed,
            dataset_hash: r.provenance.dataset_hash.clone(),
            status: r.status.label(),
            epochs_run: r.epochs.len(),
            final_train_loss: last.map_or(f64::NAN, |e| e.train_loss),
            final_val_loss: last.map_or(f64::NAN, |e| e.val_loss),
            final_val_acc: last.map_or(f64::NAN, |e| e.val_acc),
            best_train_acc: r.best_train_acc(),
            best_val_epoch: best.map(|e| e.epoch),
            best_val_loss: best.map_or(f64::NAN, |e| e.val_loss),
            overfit_gap: best.map_or(f64::NAN, |e| e.val_loss - e.train_loss),
            test_acc: r.final_test_acc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    #[serde(skip)]
    pub records: Vec<RunRecord>,
}

fn cell(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "-".into()
    }
}

impl ComparisonTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| variant | seed | status | epochs | train loss | val loss | val acc | best train acc | best val epoch | overfit gap | test acc |\n\
             |---|---|---|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                r.variant,
                r.seed,
                r.status,
                r.epochs_run,
                cell(r.final_train_loss),
                cell(r.final_val_loss),
                cell(r.final_val_acc),
                cell(r.best_train_acc),
                r.best_val_epoch.map_or("-".into(), |e| e.to_string()),
                cell(r.overfit_gap),
                r.test_acc.map_or("-".into(), cell),
            );
        }
        if let Some(first) = self.rows.first() {
            let _ = writeln!(out, "\ndataset hash: `{}`", first.dataset_hash);
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        for row in &self.rows {
            wtr.serialize(row)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))
    }
}

pub fn read_comparison_csv<R: Read>(r: R) -> Result<Vec<ComparisonRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Trains every variant on one shared dataset with one shared seed.
///
/// `base` supplies everything except the variant; AdaNorm keeps `base`'s
/// `ada_c`/`ada_k` when present and uses `C = 1`, `k = 0.1` otherwise.
/// Variants run as independent concurrent jobs. Outputs go to
/// `base.out_dir/<variant>/` plus `compare.csv` and `compare.md`.
pub fn compare_suite(base: &ExperimentConfig, variants: &[NormVariant]) -> Result<ComparisonTable> {
    if variants.is_empty() {
        return Err(Error::Config("compare needs at least one variant".into()));
    }
    let configs: Vec<ExperimentConfig> = variants
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut cfg = base.clone();
            cfg.set_variant(v);
            cfg.out_dir = base.out_dir.as_ref().map(|d| {
                let repeats = variants[..i].iter().filter(|&&u| u == v).count();
                match repeats {
                    0 => d.join(v.name()),
                    n => d.join(format!("{}-{}", v.name(), n + 1)),
                }
            });
            cfg.validate().map(|_| cfg)
        })
        .collect::<Result<_>>()?;

    let (seed, _) = configs[0].effective_seed()?;
    let data = load_dataset(&base.dataset, &mut Rng::with_stream(seed, 0))?;

    let records: Vec<RunRecord> = thread::scope(|s| {
        let jobs: Vec<_> = configs
            .iter()
            .map(|cfg| {
                let data = &data;
                s.spawn(move || run_experiment_on(cfg, data))
            })
            .collect();
        jobs.into_iter().map(|j| j.join().expect("experiment thread panicked")).collect::<Result<Vec<_>>>()
    })?;

    let table = ComparisonTable { rows: records.iter().map(ComparisonRow::from_record).collect(), records };
    if let Some(dir) = &base.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("compare.csv");
        let f = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        table.write_csv(f)?;
        let md_path = dir.join("compare.md");
        fs::write(&md_path, table.to_markdown()).map_err(|e| Error::io(&md_path, e))?;
    }
    Ok(table)
}
