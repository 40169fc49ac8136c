use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::{format_kv, parse_kv};
use crate::losses::LossWeights;
use crate::models::{ModelConfig, RotationUpdate};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Adaptive moments with the usual β = (0.9, 0.999), ε = 1e-8.
    #[default]
    Adam,
    /// Plain gradient descent.
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::invalid("optimizer", format!("`{other}` (expected adam or sgd)"))),
        }
    }
}

/// Everything that determines a training run. Stored verbatim in each
/// checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub weights: LossWeights,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub model: ModelConfig,
    /// Expected image side length of the dataset.
    pub image_size: usize,
    /// Expected camera count of the dataset.
    pub cameras: usize,
    /// Steps between evaluation reports.
    pub eval_every: usize,
    /// Steps between checkpoints.
    pub checkpoint_every: usize,
    /// Zero both deformation output layers and never update the deformation
    /// models.
    pub freeze_deformation: bool,
    /// Record wall-clock seconds in the metrics log (breaks byte equality
    /// between runs).
    pub log_wall: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            out: PathBuf::from("run"),
            weights: LossWeights::default(),
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            steps: 1000,
            batch: 4,
            seed: 0,
            model: ModelConfig::default(),
            image_size: 64,
            cameras: 3,
            eval_every: 500,
            checkpoint_every: 500,
            freeze_deformation: false,
            log_wall: false,
        }
    }
}

/// Keys accepted in config files and `--set` overrides.
pub const CONFIG_KEYS: &[&str] = &[
    "dataset",
    "out",
    "lambda_recon",
    "lambda_task",
    "lambda_pred",
    "lr",
    "optimizer",
    "steps",
    "batch",
    "seed",
    "grid",
    "feat",
    "conv_hidden",
    "mlp_hidden",
    "latents",
    "attn_dim",
    "attn_layers",
    "pool",
    "rotation_update",
    "image_size",
    "cameras",
    "eval_every",
    "checkpoint_every",
    "freeze_deformation",
    "log_wall",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::invalid("config value", format!("`{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::invalid("config value", format!("`{v}` for `{key}` (expected true or false)"))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "dataset" => self.dataset = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "lambda_recon" => self.weights.recon = parse(key, v)?,
            "lambda_task" => self.weights.task = parse(key, v)?,
            "lambda_pred" => self.weights.pred = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "steps" => self.steps = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "grid" => self.model.grid = parse(key, v)?,
            "feat" => self.model.feat = parse(key, v)?,
            "conv_hidden" => self.model.conv_hidden = parse(key, v)?,
            "mlp_hidden" => self.model.mlp_hidden = parse(key, v)?,
            "latents" => self.model.latents = parse(key, v)?,
            "attn_dim" => self.model.attn_dim = parse(key, v)?,
            "attn_layers" => self.model.attn_layers = parse(key, v)?,
            "pool" => self.model.pool = parse(key, v)?,
            "rotation_update" => self.model.rotation_update = v.parse::<RotationUpdate>()?,
            "image_size" => self.image_size = parse(key, v)?,
            "cameras" => self.cameras = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "freeze_deformation" => self.freeze_deformation = parse_bool(key, v)?,
            "log_wall" => self.log_wall = parse_bool(key, v)?,
            other => {
                return Err(Error::invalid("config key", format!("unknown key `{other}`")));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let m = &self.model;
        let pairs: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.display().to_string()),
            ("out", self.out.display().to_string()),
            ("lambda_recon", format!("{:?}", self.weights.recon)),
            ("lambda_task", format!("{:?}", self.weights.task)),
            ("lambda_pred", format!("{:?}", self.weights.pred)),
            ("lr", format!("{:?}", self.lr)),
            ("optimizer", self.optimizer.to_string()),
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
            ("grid", m.grid.to_string()),
            ("feat", m.feat.to_string()),
            ("conv_hidden", m.conv_hidden.to_string()),
            ("mlp_hidden", m.mlp_hidden.to_string()),
            ("latents", m.latents.to_string()),
            ("attn_dim", m.attn_dim.to_string()),
            ("attn_layers", m.attn_layers.to_string()),
            ("pool", m.pool.to_string()),
            ("rotation_update", m.rotation_update.to_string()),
            ("image_size", self.image_size.to_string()),
            ("cameras", self.cameras.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("freeze_deformation", self.freeze_deformation.to_string()),
            ("log_wall", self.log_wall.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format_kv(&self.to_kv())
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let map = parse_kv(text, path)?;
        let mut cfg = Self::default();
        for (k, v) in &map {
            cfg.set(k, v).map_err(|e| Error::parse(path, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("config", format!("lr {} must be positive", self.lr)));
        }
        let counts = [
            ("batch", self.batch),
            ("image_size", self.image_size),
            ("cameras", self.cameras),
            ("eval_every", self.eval_every),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid("config", format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}
