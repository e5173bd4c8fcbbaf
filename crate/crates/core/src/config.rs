//! Training run configuration and its flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! data = train.jsonl
//! variant = ADE+REG
//! steps = 2000
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::Pooling;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// JSONL training dialogues; only the command-line front end reads it.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Where to write the training report as JSON.
    pub report: Option<PathBuf>,
    pub variant: Variant,
    pub batch_size: usize,
    pub lr: f64,
    /// Critic learning rate; the encoder rate when unset.
    pub critic_lr: Option<f64>,
    pub gamma: f64,
    pub beta: f64,
    pub alpha: f64,
    pub steps: usize,
    pub critic_steps: usize,
    pub seed: u64,
    /// Validate and checkpoint every this many steps; 0 disables.
    pub eval_every: usize,
    pub validation_fraction: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub symmetric_reg: bool,
    pub pooling: Pooling,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub word_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub min_count: usize,
    /// Size of the fixed candidate list stored with the checkpoint.
    pub candidates: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        Self {
            data: None,
            checkpoint: None,
            report: None,
            variant: Variant::AdeWeReg,
            batch_size: 64,
            lr: 1e-4,
            critic_lr: None,
            gamma: 1.0,
            beta: 1.0,
            alpha: enc.alpha,
            steps: 1000,
            critic_steps: 1,
            seed: 0,
            eval_every: 0,
            validation_fraction: 0.1,
            clip_norm: 5.0,
            ema_decay: 0.99,
            symmetric_reg: false,
            pooling: Pooling::Max,
            layers: enc.layers,
            model_dim: enc.model_dim,
            heads: enc.heads,
            word_dim: enc.word_dim,
            ffn_dim: enc.ffn_dim,
            max_len: enc.max_len,
            dropout: enc.dropout,
            min_count: 1,
            candidates: 1000,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

impl TrainConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            model_dim: self.model_dim,
            heads: self.heads,
            word_dim: self.word_dim,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            alpha: self.alpha,
            dropout: self.dropout,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder_config(),
            variant: self.variant,
            pooling: self.pooling,
            symmetric_reg: self.symmetric_reg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps < 1 {
            return bad(format!("steps ≥ 1 required, got {}", self.steps));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.lr > 0.0) || self.critic_lr.is_some_and(|l| !(l > 0.0)) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction {} outside [0, 1)", self.validation_fraction));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema_decay {} outside (0, 1)", self.ema_decay));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        self.encoder_config().validate()
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = |v: &str| Some(PathBuf::from(v));
        match key {
            "data" => self.data = path(value),
            "checkpoint" => self.checkpoint = path(value),
            "report" => self.report = path(value),
            "variant" => self.variant = value.parse()?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "critic_lr" => self.critic_lr = Some(parse_value(key, value)?),
            "gamma" => self.gamma = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "critic_steps" => self.critic_steps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            "validation_fraction" => self.validation_fraction = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            "ema_decay" => self.ema_decay = parse_value(key, value)?,
            "symmetric_reg" => self.symmetric_reg = parse_value(key, value)?,
            "pooling" => self.pooling = value.parse()?,
            "layers" => self.layers = parse_value(key, value)?,
            "model_dim" => self.model_dim = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "word_dim" => self.word_dim = parse_value(key, value)?,
            "ffn_dim" => self.ffn_dim = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "min_count" => self.min_count = parse_value(key, value)?,
            "candidates" => self.candidates = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses the flat text format on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", n + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.checkpoint, &mut cfg.report].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Renders every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        for (k, p) in [("data", &self.data), ("checkpoint", &self.checkpoint), ("report", &self.report)] {
            if let Some(p) = p {
                put(k, p.display().to_string());
            }
        }
        put("variant", self.variant.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", self.lr.to_string());
        if let Some(l) = self.critic_lr {
            put("critic_lr", l.to_string());
        }
        put("gamma", self.gamma.to_string());
        put("beta", self.beta.to_string());
        put("alpha", self.alpha.to_string());
        put("steps", self.steps.to_string());
        put("critic_steps", self.critic_steps.to_string());
        put("seed", self.seed.to_string());
        put("eval_every", self.eval_every.to_string());
        put("validation_fraction", self.validation_fraction.to_string());
        put("clip_norm", self.clip_norm.to_string());
        put("ema_decay", self.ema_decay.to_string());
        put("symmetric_reg", self.symmetric_reg.to_string());
        put(
            "pooling",
            match self.pooling {
                Pooling::Max => "max",
                Pooling::Mean => "mean",
            }
            .into(),
        );
        put("layers", self.layers.to_string());
        put("model_dim", self.model_dim.to_string());
        put("heads", self.heads.to_string());
        put("word_dim", self.word_dim.to_string());
        put("ffn_dim", self.ffn_dim.to_string());
        put("max_len", self.max_len.to_string());
        put("dropout", self.dropout.to_string());
        put("min_count", self.min_count.to_string());
        put("candidates", self.candidates.to_string());
        out
    }
}
