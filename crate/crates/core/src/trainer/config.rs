use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AdamConfig;
use crate::loss::{LossConfig, Objective};
use crate::model::ModelConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Linear decay to zero over the planned number of steps.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    HardNegative,
    InfoNce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Instances of one uid are batched together in groups of this size.
    pub group_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub lr_schedule: LrSchedule,
    /// Only 0 is accepted; training is deterministic.
    pub dropout: f64,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub objective: ObjectiveKind,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            group_size: 4,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            lr_schedule: LrSchedule::Constant,
            dropout: 0.0,
            max_steps: None,
            seed: 0,
            objective: ObjectiveKind::HardNegative,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return err("epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return err(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.group_size < 2 || self.group_size > self.batch_size {
            return err(format!("group_size must lie in [2, batch_size], got {}", self.group_size));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return err("Adam betas must lie in [0, 1)".into());
        }
        if !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return err("adam_eps must be > 0 and weight_decay >= 0".into());
        }
        if self.dropout != 0.0 {
            return err(format!("dropout {} is not supported; training has no stochastic layers", self.dropout));
        }
        if self.max_steps == Some(0) {
            return err("max_steps must be >= 1 when set".into());
        }
        self.loss.validate()
    }

    pub fn objective(&self) -> Objective {
        match self.objective {
            ObjectiveKind::HardNegative => Objective::HardNegative(self.loss),
            ObjectiveKind::InfoNce => Objective::InfoNce { t: self.loss.t },
        }
    }
}

/// Model shape and training settings read from a config file. The model's
/// `vocab_size` is filled in from the corpus vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(0),
            train: TrainConfig::default(),
        }
    }
}

/// Keys accepted in config files.
pub const CONFIG_KEYS: &[&str] = &[
    "d",
    "n_layers",
    "heads",
    "ffn_dim",
    "max_len",
    "adapter_positions",
    "adapter_depth",
    "bottleneck",
    "agg_out",
    "backbone_seed",
    "epochs",
    "batch_size",
    "group_size",
    "learning_rate",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "lr_schedule",
    "dropout",
    "max_steps",
    "seed",
    "objective",
    "t",
    "tau_plus",
    "beta",
];

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse '{v}'"))
}

fn apply(cfg: &mut RunConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let m = &mut cfg.model;
    let t = &mut cfg.train;
    match key {
        "d" => m.d = num(v)?,
        "n_layers" => m.n_layers = num(v)?,
        "heads" => m.heads = num(v)?,
        "ffn_dim" => m.ffn_dim = num(v)?,
        "max_len" => m.max_len = num(v)?,
        "adapter_positions" => {
            m.adapter_positions = v.split(',').map(|p| num(p.trim())).collect::<std::result::Result<_, _>>()?
        }
        "adapter_depth" => m.adapter_depth = num(v)?,
        "bottleneck" => m.bottleneck = num(v)?,
        "agg_out" => m.agg_out = num(v)?,
        "backbone_seed" => m.backbone_seed = num(v)?,
        "epochs" => t.epochs = num(v)?,
        "batch_size" => t.batch_size = num(v)?,
        "group_size" => t.group_size = num(v)?,
        "learning_rate" => t.learning_rate = num(v)?,
        "beta1" => t.adam.beta1 = num(v)?,
        "beta2" => t.adam.beta2 = num(v)?,
        "adam_eps" => t.adam.eps = num(v)?,
        "weight_decay" => t.adam.weight_decay = num(v)?,
        "lr_schedule" => {
            t.lr_schedule = match v {
                "constant" => LrSchedule::Constant,
                "linear" => LrSchedule::Linear,
                _ => return Err(format!("lr_schedule must be constant or linear, got '{v}'")),
            }
        }
        "dropout" => t.dropout = num(v)?,
        "max_steps" => t.max_steps = if v == "none" { None } else { Some(num(v)?) },
        "seed" => t.seed = num(v)?,
        "objective" => {
            t.objective = match v {
                "hard-negative" => ObjectiveKind::HardNegative,
                "info-nce" => ObjectiveKind::InfoNce,
                _ => return Err(format!("objective must be hard-negative or info-nce, got '{v}'")),
            }
        }
        "t" => t.loss.t = num(v)?,
        "tau_plus" => t.loss.tau_plus = num(v)?,
        "beta" => t.loss.beta = num(v)?,
        _ => return Err(format!("unknown key '{key}'")),
    }
    Ok(())
}

/// Parses `key = value` lines over the defaults. `#` starts a comment;
/// unknown or repeated keys are errors.
pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen = std::collections::BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected 'key = value', got '{line}'")))?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(err(format!("key '{key}' given twice")));
        }
        apply(&mut cfg, key, value).map_err(err)?;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&fs::read_to_string(path)?, path)
}
