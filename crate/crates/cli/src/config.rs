//! Run configuration: built-in defaults, then a `key = value` file, then flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use neurodx::model::{ModelConfig, SequenceMode};
use neurodx::optim::TrainConfig;

use crate::CliError;

pub const RESOLVED_NAME: &str = "resolved.cfg";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub preset: String,
    pub sequence_mode: SequenceMode,
    pub train_fraction: f64,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            out: PathBuf::from("neurodx-out"),
            checkpoint: None,
            preset: "paper".into(),
            sequence_mode: SequenceMode::Spatial,
            train_fraction: 0.8,
            train: TrainConfig::default(),
        }
    }
}

/// Values given on the command line; `None` leaves the lower layer in place.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub preset: Option<String>,
    pub sequence_mode: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub max_rotation_deg: Option<f64>,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value {value:?} for {key}")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Defaults < `config` file < `flags`.
    pub fn resolve(config: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = config {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_overrides(flags)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "data" => self.data = optional_path(value),
            "out" => self.out = PathBuf::from(value),
            "checkpoint" => self.checkpoint = optional_path(value),
            "preset" => self.preset = value.to_string(),
            "sequence_mode" => {
                self.sequence_mode = value.parse().map_err(|e: neurodx::Error| CliError::Usage(e.to_string()))?
            }
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "learning_rate" | "lr" => self.train.learning_rate = parse(key, value)?,
            "beta1" => self.train.beta1 = parse(key, value)?,
            "beta2" => self.train.beta2 = parse(key, value)?,
            "epsilon" => self.train.epsilon = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "max_rotation_deg" => self.train.max_rotation_deg = parse(key, value)?,
            other => return Err(CliError::Usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    fn apply_overrides(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(v) = &o.data {
            self.data = Some(v.clone());
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = &o.checkpoint {
            self.checkpoint = Some(v.clone());
        }
        if let Some(v) = &o.preset {
            self.preset = v.clone();
        }
        if let Some(v) = &o.sequence_mode {
            self.set("sequence_mode", v)?;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = o.learning_rate {
            self.train.learning_rate = v;
        }
        if let Some(v) = o.seed {
            self.train.seed = v;
        }
        if let Some(v) = o.max_rotation_deg {
            self.train.max_rotation_deg = v;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let t = &self.train;
        let bad = |msg: &str| Err(CliError::Usage(msg.to_string()));
        ModelConfig::preset(&self.preset).map_err(|e| CliError::Usage(e.to_string()))?;
        if t.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(t.learning_rate.is_finite() && t.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(t.epsilon.is_finite() && t.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(t.max_rotation_deg.is_finite() && (0.0..=180.0).contains(&t.max_rotation_deg)) {
            return bad("max_rotation_deg must lie in [0, 180]");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie strictly between 0 and 1");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::preset(&self.preset).expect("preset validated");
        m.sequence_mode = self.sequence_mode;
        m
    }

    /// Every key in a fixed order; feeding this back through [`RunConfig::apply_text`]
    /// reproduces `self`.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let t = &self.train;
        let mut s = String::new();
        let rows: [(&str, String); 14] = [
            ("data", path(&self.data)),
            ("out", self.out.display().to_string()),
            ("checkpoint", path(&self.checkpoint)),
            ("preset", self.preset.clone()),
            ("sequence_mode", self.sequence_mode.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("epsilon", t.epsilon.to_string()),
            ("seed", t.seed.to_string()),
            ("max_rotation_deg", t.max_rotation_deg.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Creates the output directory and writes `resolved.cfg` into it.
    pub fn write_resolved(&self) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.out).map_err(neurodx::Error::from)?;
        let path = self.out.join(RESOLVED_NAME);
        fs::write(&path, self.to_text()).map_err(neurodx::Error::from)?;
        Ok(path)
    }
}
