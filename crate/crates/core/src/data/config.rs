//! Run configuration as flat `key = value` lines with `#` comments.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::NetConfig;
use crate::trainer::{LossSettings, TrainConfig};

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub loss: LossSettings,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}` expects true or false, got `{value}`"
        ))),
    }
}

/// `auto` (or `none`) leaves a KL weight to be derived from the data.
fn parse_weight(key: &str, value: &str) -> Result<Option<f64>> {
    match value {
        "auto" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl RunConfig {
    /// Every addressable key, in the order [`RunConfig::to_text`] emits them.
    pub const KEYS: &'static [&'static str] = &[
        "in_channels",
        "base_channels",
        "depth",
        "latent_dim",
        "skip_connections",
        "bayesian_weights",
        "batch_size",
        "optimizer",
        "learning_rate",
        "momentum",
        "weight_decay",
        "scheduler",
        "plateau_patience",
        "plateau_factor",
        "cyclical_gamma",
        "cyclical_period",
        "max_epochs",
        "seed",
        "mc_train_samples",
        "latent_lr_multiplier",
        "dice_weight",
        "ce_weight",
        "kl_weight_weights",
        "kl_weight_latent",
        "use_nll",
        "n_logit_samples",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (n, t, l) = (&mut self.net, &mut self.train, &mut self.loss);
        match key {
            "in_channels" => n.in_channels = parse(key, value)?,
            "base_channels" => n.base_channels = parse(key, value)?,
            "depth" => n.depth = parse(key, value)?,
            "latent_dim" => n.latent_dim = parse(key, value)?,
            "skip_connections" => n.skip_connections = parse_bool(key, value)?,
            "bayesian_weights" => n.bayesian_weights = parse_bool(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "optimizer" => t.optimizer = value.parse()?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "scheduler" => t.scheduler = value.parse()?,
            "plateau_patience" => t.plateau_patience = parse(key, value)?,
            "plateau_factor" => t.plateau_factor = parse(key, value)?,
            "cyclical_gamma" => t.cyclical_gamma = parse(key, value)?,
            "cyclical_period" => t.cyclical_period = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "mc_train_samples" => t.mc_train_samples = parse(key, value)?,
            "latent_lr_multiplier" => t.latent_lr_multiplier = parse(key, value)?,
            "dice_weight" => l.dice_weight = parse(key, value)?,
            "ce_weight" => l.ce_weight = parse(key, value)?,
            "kl_weight_weights" => l.kl_weight_weights = parse_weight(key, value)?,
            "kl_weight_latent" => l.kl_weight_latent = parse_weight(key, value)?,
            "use_nll" => l.use_nll = parse_bool(key, value)?,
            "n_logit_samples" => l.n_logit_samples = parse(key, value)?,
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `text` on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        if self.loss.n_logit_samples == 0 {
            return Err(Error::Config("n_logit_samples must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let (n, t, l) = (&self.net, &self.train, &self.loss);
        let weight = |w: Option<f64>| w.map_or_else(|| "auto".to_string(), |v| format!("{v:?}"));
        let values = [
            n.in_channels.to_string(),
            n.base_channels.to_string(),
            n.depth.to_string(),
            n.latent_dim.to_string(),
            n.skip_connections.to_string(),
            n.bayesian_weights.to_string(),
            t.batch_size.to_string(),
            t.optimizer.to_string(),
            format!("{:?}", t.learning_rate),
            format!("{:?}", t.momentum),
            format!("{:?}", t.weight_decay),
            t.scheduler.to_string(),
            t.plateau_patience.to_string(),
            format!("{:?}", t.plateau_factor),
            format!("{:?}", t.cyclical_gamma),
            t.cyclical_period.to_string(),
            t.max_epochs.to_string(),
            t.seed.to_string(),
            t.mc_train_samples.to_string(),
            format!("{:?}", t.latent_lr_multiplier),
            format!("{:?}", l.dice_weight),
            format!("{:?}", l.ce_weight),
            weight(l.kl_weight_weights),
            weight(l.kl_weight_latent),
            l.use_nll.to_string(),
            l.n_logit_samples.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
