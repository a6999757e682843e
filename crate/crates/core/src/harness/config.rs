use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normlayers::{AdaNormConfig, NormVariant};

/// When set, overrides the seed of every experiment config.
pub const SEED_ENV_VAR: &str = "NORMGRAD_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
    Sgd {
        lr: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs { classes: usize, per_class: usize, dim: usize, spread: f64 },
    Spirals { classes: usize, per_class: usize, noise: f64 },
    Mnist { dir: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedSource {
    Config,
    Env,
}

fn default_eps() -> f64 {
    1e-5
}
fn default_true() -> bool {
    true
}

/// One training run. Unknown JSON keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: NormVariant,
    #[serde(default)]
    pub ada_c: Option<f64>,
    #[serde(default)]
    pub ada_k: Option<f64>,
    /// Number of hidden `linear -> norm -> relu` blocks.
    pub depth: usize,
    /// Width of every hidden block unless `widths` is given.
    pub width: usize,
    /// Explicit per-block widths; length must equal `depth`.
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub clip: Option<f64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Check the gradient-moment predictions at every normalization layer
    /// on every step and fail the run on a violation.
    #[serde(default = "default_true")]
    pub instrument: bool,
}

impl ExperimentConfig {
    /// Blobs, Adam 1e-3, 3 classes; a convenient starting point for tests.
    pub fn blobs_default(variant: NormVariant) -> Self {
        let mut cfg = ExperimentConfig {
            variant,
            ada_c: None,
            ada_k: None,
            depth: 2,
            width: 64,
            widths: None,
            optimizer: OptimizerConfig::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            epochs: 20,
            batch_size: 16,
            seed: 0,
            dataset: DatasetConfig::Blobs { classes: 3, per_class: 100, dim: 8, spread: 0.3 },
            eps: default_eps(),
            clip: None,
            out_dir: None,
            instrument: true,
        };
        cfg.set_variant(variant);
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Parses without validating; used for `compare`, where the variant
    /// (and with it the AdaNorm fields) is replaced per job.
    pub fn load_base(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Switches variant, filling or clearing the AdaNorm fields so the
    /// config stays valid (default `C = 1`, `k = 0.1`).
    pub fn set_variant(&mut self, variant: NormVariant) {
        self.variant = variant;
        if variant == NormVariant::AdaNorm {
            let d = AdaNormConfig::default();
            self.ada_c.get_or_insert(d.c);
            self.ada_k.get_or_insert(d.k);
        } else {
            self.ada_c = None;
            self.ada_k = None;
        }
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.widths.clone().unwrap_or_else(|| vec![self.width; self.depth])
    }

    pub fn ada(&self) -> Result<Option<AdaNormConfig>> {
        match (self.ada_c, self.ada_k) {
            (Some(c), Some(k)) => AdaNormConfig::new(c, k).map(Some),
            _ => Ok(None),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let is_ada = self.variant == NormVariant::AdaNorm;
        let has_ada = (self.ada_c.is_some(), self.ada_k.is_some());
        match (is_ada, has_ada) {
            (true, (true, true)) => {
                self.ada()?;
            }
            (true, _) => return Err(Error::Config("adanorm requires ada_c and ada_k".into())),
            (false, (false, false)) => {}
            (false, _) => {
                return Err(Error::Config(format!("ada_c/ada_k are only allowed with adanorm, not {}", self.variant)))
            }
        }
        for (name, v) in
            [("depth", self.depth), ("width", self.width), ("epochs", self.epochs), ("batch_size", self.batch_size)]
        {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if let Some(w) = &self.widths {
            if w.len() != self.depth || w.contains(&0) {
                return Err(Error::Config(format!("widths must list {} positive sizes, got {w:?}", self.depth)));
            }
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be >= 0, got {}", self.eps)));
        }
        if let Some(c) = self.clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("clip must be > 0, got {c}")));
            }
        }
        match &self.optimizer {
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                crate::nets::AdamState::new(*lr, *beta1, *beta2, *eps).map_err(|e| Error::Config(e.to_string()))?;
            }
            OptimizerConfig::Sgd { lr } if lr.is_nan() || *lr < 0.0 => {
                return Err(Error::Config(format!("sgd lr must be >= 0, got {lr}")))
            }
            OptimizerConfig::Sgd { .. } => {}
        }
        match &self.dataset {
            DatasetConfig::Blobs { classes, per_class, dim, .. } if *classes == 0 || *per_class == 0 || *dim == 0 => {
                Err(Error::Config("blob counts must be >= 1".into()))
            }
            DatasetConfig::Spirals { classes, per_class, .. } if *classes == 0 || *per_class == 0 => {
                Err(Error::Config("spiral counts must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// The seed to use, honoring [`SEED_ENV_VAR`].
    pub fn effective_seed(&self) -> Result<(u64, SeedSource)> {
        match std::env::var(SEED_ENV_VAR) {
            Ok(v) => v
                .trim()
                .parse::<u64>()
                .map(|s| (s, SeedSource::Env))
                .map_err(|_| Error::Config(format!("{SEED_ENV_VAR}={v:?} is not a u64"))),
            Err(_) => Ok((self.seed, SeedSource::Config)),
        }
    }
}
