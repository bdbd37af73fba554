use std::path::Path;

use bimamba::model::{parse_key_values, parse_value, ModelConfig};
use bimamba::train::TrainConfig;
use bimamba::{Error, Result};

/// Model and optimizer settings for one run. Starts from the desk-scale
/// model and the default recipe; a file and then `--set` pairs override it.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const TRAIN_KEYS: [&str; 10] = [
    "lr_init",
    "weight_decay",
    "batch_size",
    "epochs",
    "beta1",
    "beta2",
    "eps",
    "warmup_steps",
    "clip_norm",
    "augment",
];

/// Every key a config file may contain, in dump order.
pub fn all_keys() -> Vec<&'static str> {
    ModelConfig::KEYS.iter().chain(TRAIN_KEYS.iter()).copied().collect()
}

fn train_entries(t: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("lr_init", t.lr_init.to_string()),
        ("weight_decay", t.weight_decay.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("epochs", t.epochs.to_string()),
        ("beta1", t.beta1.to_string()),
        ("beta2", t.beta2.to_string()),
        ("eps", t.eps.to_string()),
        ("warmup_steps", t.warmup_steps.to_string()),
        ("clip_norm", t.clip_norm.map_or("none".into(), |c| c.to_string())),
        ("augment", t.augment.to_string()),
    ]
}

fn set_train(t: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "lr_init" => t.lr_init = parse_value(key, value)?,
        "weight_decay" => t.weight_decay = parse_value(key, value)?,
        "batch_size" => t.batch_size = parse_value(key, value)?,
        "epochs" => t.epochs = parse_value(key, value)?,
        "beta1" => t.beta1 = parse_value(key, value)?,
        "beta2" => t.beta2 = parse_value(key, value)?,
        "eps" => t.eps = parse_value(key, value)?,
        "warmup_steps" => t.warmup_steps = parse_value(key, value)?,
        "clip_norm" => t.clip_norm = if value == "none" { None } else { Some(parse_value(key, value)?) },
        "augment" => t.augment = parse_value(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// A named model preset with the default recipe.
    pub fn preset(name: &str) -> Option<Self> {
        let model = match name {
            "desk" => ModelConfig::desk(),
            "toy" => ModelConfig::toy(),
            "full" => ModelConfig::full(),
            _ => return None,
        };
        Some(RunConfig {
            model,
            ..RunConfig::default()
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? || set_train(&mut self.train, key, value)? {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key {key:?}")))
        }
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// `pair` is `key=value`.
    pub fn apply_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    /// `source` is a preset name or a config file applied over the desk
    /// preset.
    pub fn load(source: &str) -> Result<Self> {
        if let Some(cfg) = RunConfig::preset(source) {
            return Ok(cfg);
        }
        RunConfig::from_text(&std::fs::read_to_string(Path::new(source))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_text(&self) -> String {
        self.model
            .entries()
            .into_iter()
            .chain(train_entries(&self.train))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
