use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, OptimizerConfig, SeedSource};
use super::data::{load_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::gradcheck::GradReport;
use crate::nets::{
    adam_step, mlp_backward_observed, mlp_forward, sgd_step, softmax_xent, write_checkpoint, AdamState, Gradients,
    MlpModel, NormBoundary,
};
use crate::normlayers::NormVariant;
use crate::numcore::Rng;

/// One CSV row. Column order is fixed by field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Largest `|measured - predicted|` mean of `dl/dx` over the epoch.
    pub grad_mean_maxabs: f64,
    /// Largest variance-bound violation over the epoch.
    pub grad_var_maxviol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    /// Loss, parameters or activations became non-finite during `epoch`.
    Diverged {
        epoch: usize,
    },
}

impl RunStatus {
    pub fn label(&self) -> String {
        match self {
            RunStatus::Completed => "completed".into(),
            RunStatus::Diverged { epoch } => format!("diverged@{epoch}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub seed_source: SeedSource,
    pub rng_algorithm: String,
    pub dataset: String,
    pub dataset_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub provenance: Provenance,
    pub status: RunStatus,
    pub epochs: Vec<EpochRow>,
    /// Training-set accuracy after each recorded epoch.
    pub train_acc: Vec<f64>,
    pub final_test_acc: Option<f64>,
    pub norm_checks: u64,
    pub negative_phi_events: u64,
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn best_train_acc(&self) -> f64 {
        self.train_acc.iter().copied().fold(0.0, f64::max)
    }

    /// Equal in everything except wall time.
    pub fn same_results(&self, other: &RunRecord) -> bool {
        let mut a = self.clone();
        a.wall_time_secs = other.wall_time_secs;
        a == *other
    }
}

#[derive(Default)]
struct EpochStats {
    mean_maxabs: f64,
    var_maxviol: f64,
    checks: u64,
    negative_phi: u64,
    violation: Option<String>,
}

impl EpochStats {
    fn observe(&mut self, b: &NormBoundary<'_>) {
        let variant = match b.cache.variant {
            NormVariant::NoNorm => return,
            // Gain and phi only rescale dl/dy; the core map is the full one.
            NormVariant::LayerNorm | NormVariant::AdaNorm => NormVariant::LayerNormSimple,
            v => v,
        };
        // A floored sigma carries no derivative, so the predictions do not apply.
        if b.cache.sigma_floored {
            return;
        }
        let Ok(report) = GradReport::from_gradients(variant, b.cache.sigma, b.core_grad, b.dx) else {
            return;
        };
        self.checks += 1;
        self.mean_maxabs = self.mean_maxabs.max(report.abs_error_mean);
        self.var_maxviol = self.var_maxviol.max(report.violation_var);
        if !report.passes() && self.violation.is_none() {
            self.violation = Some(format!("layer {}: {}", b.layer, report.to_line()));
        }
    }
}

enum Optimizer {
    Adam(AdamState),
    Sgd(f64),
}

impl Optimizer {
    fn from_config(cfg: &OptimizerConfig) -> Result<Self> {
        Ok(match cfg {
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                Optimizer::Adam(AdamState::new(*lr, *beta1, *beta2, *eps)?)
            }
            OptimizerConfig::Sgd { lr } => Optimizer::Sgd(*lr),
        })
    }

    fn step(&mut self, model: &mut MlpModel, grads: &Gradients) -> Result<()> {
        let mut params = model.params_mut();
        let g = grads.slices();
        match self {
            Optimizer::Adam(state) => adam_step(state, &mut params, &g),
            Optimizer::Sgd(lr) => sgd_step(*lr, &mut params, &g),
        }
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_))
}

fn evaluate(model: &MlpModel, split: &Split) -> Result<(f64, f64)> {
    if split.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (x, &label) in split.inputs.iter().zip(&split.labels) {
        let (logits, _) = mlp_forward(model, x)?;
        let (l, _) = softmax_xent(&logits, label)?;
        loss += l;
        let pred = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        correct += usize::from(pred == label);
    }
    let n = split.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Generates or loads the configured dataset, then trains on it.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let (seed, _) = cfg.effective_seed()?;
    let data = load_dataset(&cfg.dataset, &mut Rng::with_stream(seed, 0))?;
    run_experiment_on(cfg, &data)
}

/// Trains per `cfg` on an existing dataset and writes outputs to `out_dir`.
///
/// A non-finite loss, activation or parameter ends the run with
/// [`RunStatus::Diverged`] instead of an error. A failed gradient-moment
/// check at any normalization layer is an error unless `instrument` is off.
pub fn run_experiment_on(cfg: &ExperimentConfig, data: &Dataset) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let (seed, seed_source) = cfg.effective_seed()?;
    let mut init_rng = Rng::with_stream(seed, 1);
    let mut order_rng = Rng::with_stream(seed, 2);
    let mut model =
        MlpModel::new(&mut init_rng, data.dim, &cfg.hidden_widths(), data.classes, cfg.variant, cfg.eps, cfg.ada()?);
    let mut opt = Optimizer::from_config(&cfg.optimizer)?;

    let mut record = RunRecord {
        config: cfg.clone(),
        provenance: Provenance {
            seed,
            seed_source,
            rng_algorithm: Rng::ALGORITHM.to_string(),
            dataset: data.name.clone(),
            dataset_hash: data.content_hash(),
        },
        status: RunStatus::Completed,
        epochs: Vec::with_capacity(cfg.epochs),
        train_acc: Vec::with_capacity(cfg.epochs),
        final_test_acc: None,
        norm_checks: 0,
        negative_phi_events: 0,
        wall_time_secs: 0.0,
    };

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    'epochs: for epoch in 1..=cfg.epochs {
        order_rng.shuffle(&mut order);
        let mut stats = EpochStats::default();
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = Gradients::zeros_like(&model);
            for &i in batch {
                let step = (|| -> Result<Gradients> {
                    let (logits, caches) = mlp_forward(&model, &data.train.inputs[i])?;
                    stats.negative_phi += caches
                        .layers
                        .iter()
                        .filter_map(|l| l.norm.as_ref())
                        .map(|c| c.negative_phi as u64)
                        .sum::<u64>();
                    let (loss, dlogits) = softmax_xent(&logits, data.train.labels[i])?;
                    if !loss.is_finite() {
                        return Err(Error::NonFinite("loss"));
                    }
                    let mut observe = |b: NormBoundary<'_>| stats.observe(&b);
                    mlp_backward_observed(&model, &caches, &dlogits, &mut observe)
                })();
                match step {
                    Ok(g) => acc.accumulate(&g),
                    Err(e) if is_divergence(&e) => {
                        record.status = RunStatus::Diverged { epoch };
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
                if cfg.instrument {
                    if let Some(v) = stats.violation.take() {
                        return Err(Error::InvariantViolation(format!("epoch {epoch}, {v}")));
                    }
                }
            }
            acc.scale(1.0 / batch.len() as f64);
            if !acc.is_finite() {
                record.status = RunStatus::Diverged { epoch };
                break 'epochs;
            }
            if let Some(max_norm) = cfg.clip {
                acc.clip_global_norm(max_norm);
            }
            opt.step(&mut model, &acc)?;
        }

        let evals = evaluate(&model, &data.train).and_then(|t| Ok((t, evaluate(&model, &data.val)?)));
        let ((train_loss, train_acc), (val_loss, val_acc)) = match evals {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => {
                record.status = RunStatus::Diverged { epoch };
                break;
            }
            Err(e) => return Err(e),
        };
        if !train_loss.is_finite() {
            record.status = RunStatus::Diverged { epoch };
            break;
        }
        record.norm_checks += stats.checks;
        record.negative_phi_events += stats.negative_phi;
        record.train_acc.push(train_acc);
        record.epochs.push(EpochRow {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            grad_mean_maxabs: stats.mean_maxabs,
            grad_var_maxviol: stats.var_maxviol,
        });
    }

    if record.status == RunStatus::Completed {
        record.final_test_acc = match evaluate(&model, &data.test) {
            Ok((_, acc)) if !data.test.is_empty() => Some(acc),
            Ok(_) => None,
            Err(e) if is_divergence(&e) => None,
            Err(e) => return Err(e),
        };
    }
    record.wall_time_secs = start.elapsed().as_secs_f64();

    if let Some(dir) = &cfg.out_dir {
        write_outputs(dir, &record, &model)?;
    }
    Ok(record)
}

fn write_outputs(dir: &Path, record: &RunRecord, model: &MlpModel) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("run.csv");
    let f = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_run_csv(&record.epochs, f)?;
    let json_path = dir.join("run.json");
    let json = serde_json::to_string_pretty(record)?;
    fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    let ckpt = dir.join("model.ngrd");
    let f = fs::File::create(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    write_checkpoint(model, std::io::BufWriter::new(f))
}

pub fn write_run_csv<W: Write>(rows: &[EpochRow], w: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    if rows.is_empty() {
        wtr.write_record(["epoch", "train_loss", "val_loss", "val_acc", "grad_mean_maxabs", "grad_var_maxviol"])?;
    }
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn read_run_csv<R: Read>(r: R) -> Result<Vec<EpochRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize().map(|row| row.map_err(Error::from)).collect()
}
