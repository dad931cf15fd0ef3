//! Flat `key=value` run configuration.
//!
//! Files hold one `key=value` per line; `#` starts a comment. Overrides
//! use the same syntax and are applied after the file. Unknown keys are
//! rejected. [`RunConfig::render`] prints every key with its effective
//! value, and parsing that output reproduces the configuration exactly.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::harness::schedule::{BatchSchedule, LrSchedule};
use crate::harness::TrainConfig;
use crate::ldrscm::ResidualStrategy;
use crate::model::ModelConfig;
use crate::nn::Activation;
use crate::scalar::Precision;

pub const KEYS: &[&str] = &[
    // model
    "vocab",
    "d_model",
    "n_heads",
    "n_layers",
    "ffn_mult",
    "kernels",
    "activation",
    "residual",
    "n_depths",
    "gammas",
    "lambda_mpt",
    "max_seq_len",
    "tie_head",
    "init_std",
    "precision",
    "init_seed",
    // training
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "weight_decay",
    "clip_norm",
    "peak_lr",
    "final_lr",
    "tail_lr",
    "warmup_steps",
    "constant_steps",
    "decay_steps",
    "tail_steps",
    "batch_schedule",
    "seq_len",
    "total_steps",
    "seed",
    "lookahead",
    "heldout_frac",
    "eval_every",
    "eval_rows",
    "checkpoint_every",
    "shards",
    // run
    "data",
    "heldout_data",
    "out",
    "resume",
    "checkpoint",
    "gc_entries",
    "gc_seq_len",
    "gc_batch",
];

/// Keys whose defaults are derived from `total_steps`, `peak_lr` and `final_lr`.
const DERIVED: &[&str] = &[
    "tail_lr",
    "warmup_steps",
    "constant_steps",
    "decay_steps",
    "tail_steps",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training corpus (raw bytes).
    pub data: Option<PathBuf>,
    /// Separate held-out file; without one the tail of `data` is used.
    pub heldout_data: Option<PathBuf>,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    /// Checkpoint read by `eval` and `decode`.
    pub checkpoint: Option<PathBuf>,
    /// Entries checked per tensor by `gradcheck`; 0 checks all.
    pub gc_entries: usize,
    pub gc_seq_len: usize,
    pub gc_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: None,
            heldout_data: None,
            out: PathBuf::from("runs/default"),
            resume: None,
            checkpoint: None,
            gc_entries: 8,
            gc_seq_len: 8,
            gc_batch: 2,
        }
    }
}

fn invalid(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("`{key}={value}`: expected {what}"))
}

fn num<N: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<N> {
    value.parse().map_err(|_| invalid(key, value, what))
}

fn list<N: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<Vec<N>> {
    value.split(',').map(|v| num(key, v.trim(), what)).collect()
}

fn path(value: &str) -> Option<PathBuf> {
    (value != "none" && !value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or("none".into(), |p| p.display().to_string())
}

fn join<N: ToString>(v: &[N]) -> String {
    v.iter().map(N::to_string).collect::<Vec<_>>().join(",")
}

/// `key=value` pairs of a config file, in order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        pairs.push(
            parse_override(line)
                .map_err(|_| Error::Config(format!("line {}: `{raw}` is not key=value", n + 1)))?,
        );
    }
    Ok(pairs)
}

pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("`{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    /// Applies `pairs` over the defaults. Schedule phase lengths not given
    /// explicitly are derived from the final `total_steps`.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        RunConfig::default().with_pairs(pairs)
    }

    pub fn with_pairs(mut self, pairs: &[(String, String)]) -> Result<Self> {
        for (k, _) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!(
                    "unknown key `{k}`; valid keys: {}",
                    KEYS.join(", ")
                )));
            }
        }
        let derived_set = pairs.iter().any(|(k, _)| DERIVED.contains(&k.as_str()));
        for (k, v) in pairs.iter().filter(|(k, _)| !DERIVED.contains(&k.as_str())) {
            self.set(k, v)?;
        }
        let schedule_inputs = ["total_steps", "peak_lr", "final_lr"];
        if derived_set
            || pairs
                .iter()
                .any(|(k, _)| schedule_inputs.contains(&k.as_str()))
        {
            let lr = &self.train.lr;
            self.train.lr = LrSchedule::scaled(self.train.total_steps, lr.peak_lr, lr.final_lr);
        }
        for (k, v) in pairs.iter().filter(|(k, _)| DERIVED.contains(&k.as_str())) {
            self.set(k, v)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        RunConfig::from_pairs(&parse_pairs(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seq_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "seq_len {} exceeds max_seq_len {}",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        if self.train.lookahead < self.model.n_depths {
            return Err(Error::Config(format!(
                "lookahead {} is smaller than n_depths {}",
                self.train.lookahead, self.model.n_depths
            )));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        let uint = "a non-negative integer";
        let real = "a number";
        match key {
            "vocab" => m.vocab = num(key, value, uint)?,
            "d_model" => m.d_model = num(key, value, uint)?,
            "n_heads" => m.n_heads = num(key, value, uint)?,
            "n_layers" => m.n_layers = num(key, value, uint)?,
            "ffn_mult" => m.ffn_mult = num(key, value, uint)?,
            "kernels" => {
                m.kernels = if value == "none" {
                    Vec::new()
                } else {
                    list(key, value, "kernel lengths like 3,15 or none")?
                }
            }
            "activation" => {
                m.activation = Activation::parse(value)
                    .ok_or_else(|| invalid(key, value, "swish or eswish"))?
            }
            "residual" => {
                m.residual = ResidualStrategy::parse(value).ok_or_else(|| {
                    invalid(key, value, "learnable_dense, fixed_dense or standard")
                })?
            }
            "n_depths" => m.n_depths = num(key, value, uint)?,
            "gammas" => {
                m.gammas = if value == "uniform" {
                    None
                } else {
                    Some(list(key, value, "uniform or a list of weights")?)
                }
            }
            "lambda_mpt" => m.lambda_mpt = num(key, value, real)?,
            "max_seq_len" => m.max_seq_len = num(key, value, uint)?,
            "tie_head" => m.tie_head = num(key, value, "true or false")?,
            "init_std" => m.init_std = num(key, value, real)?,
            "precision" => {
                m.precision = Precision::parse(value)
                    .ok_or_else(|| invalid(key, value, "single or double"))?
            }
            "init_seed" => m.seed = num(key, value, uint)?,
            "adam_beta1" => t.adam_beta1 = num(key, value, real)?,
            "adam_beta2" => t.adam_beta2 = num(key, value, real)?,
            "adam_eps" => t.adam_eps = num(key, value, real)?,
            "weight_decay" => t.weight_decay = num(key, value, real)?,
            "clip_norm" => t.clip_norm = num(key, value, real)?,
            "peak_lr" => t.lr.peak_lr = num(key, value, real)?,
            "final_lr" => t.lr.final_lr = num(key, value, real)?,
            "tail_lr" => t.lr.tail_lr = num(key, value, real)?,
            "warmup_steps" => t.lr.warmup_steps = num(key, value, uint)?,
            "constant_steps" => t.lr.constant_steps = num(key, value, uint)?,
            "decay_steps" => t.lr.decay_steps = num(key, value, uint)?,
            "tail_steps" => t.lr.tail_steps = num(key, value, uint)?,
            "batch_schedule" => t.batch = BatchSchedule::parse(value)?,
            "seq_len" => t.seq_len = num(key, value, uint)?,
            "total_steps" => t.total_steps = num(key, value, uint)?,
            "seed" => t.seed = num(key, value, uint)?,
            "lookahead" => t.lookahead = num(key, value, uint)?,
            "heldout_frac" => t.heldout_frac = num(key, value, real)?,
            "eval_every" => t.eval_every = num(key, value, uint)?,
            "eval_rows" => t.eval_rows = num(key, value, uint)?,
            "checkpoint_every" => t.checkpoint_every = num(key, value, uint)?,
            "shards" => t.shards = num(key, value, uint)?,
            "data" => self.data = path(value),
            "heldout_data" => self.heldout_data = path(value),
            "out" => self.out = PathBuf::from(value),
            "resume" => self.resume = path(value),
            "checkpoint" => self.checkpoint = path(value),
            "gc_entries" => self.gc_entries = num(key, value, uint)?,
            "gc_seq_len" => self.gc_seq_len = num(key, value, uint)?,
            "gc_batch" => self.gc_batch = num(key, value, uint)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}`; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t) = (&self.model, &self.train);
        Some(match key {
            "vocab" => m.vocab.to_string(),
            "d_model" => m.d_model.to_string(),
            "n_heads" => m.n_heads.to_string(),
            "n_layers" => m.n_layers.to_string(),
            "ffn_mult" => m.ffn_mult.to_string(),
            "kernels" if m.kernels.is_empty() => "none".into(),
            "kernels" => join(&m.kernels),
            "activation" => m.activation.name().into(),
            "residual" => m.residual.name().into(),
            "n_depths" => m.n_depths.to_string(),
            "gammas" => m.gammas.as_ref().map_or("uniform".into(), |g| join(g)),
            "lambda_mpt" => m.lambda_mpt.to_string(),
            "max_seq_len" => m.max_seq_len.to_string(),
            "tie_head" => m.tie_head.to_string(),
            "init_std" => m.init_std.to_string(),
            "precision" => m.precision.name().into(),
            "init_seed" => m.seed.to_string(),
            "adam_beta1" => t.adam_beta1.to_string(),
            "adam_beta2" => t.adam_beta2.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "clip_norm" => t.clip_norm.to_string(),
            "peak_lr" => t.lr.peak_lr.to_string(),
            "final_lr" => t.lr.final_lr.to_string(),
            "tail_lr" => t.lr.tail_lr.to_string(),
            "warmup_steps" => t.lr.warmup_steps.to_string(),
            "constant_steps" => t.lr.constant_steps.to_string(),
            "decay_steps" => t.lr.decay_steps.to_string(),
            "tail_steps" => t.lr.tail_steps.to_string(),
            "batch_schedule" => t.batch.render(),
            "seq_len" => t.seq_len.to_string(),
            "total_steps" => t.total_steps.to_string(),
            "seed" => t.seed.to_string(),
            "lookahead" => t.lookahead.to_string(),
            "heldout_frac" => t.heldout_frac.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "eval_rows" => t.eval_rows.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "shards" => t.shards.to_string(),
            "data" => show_path(&self.data),
            "heldout_data" => show_path(&self.heldout_data),
            "out" => self.out.display().to_string(),
            "resume" => show_path(&self.resume),
            "checkpoint" => show_path(&self.checkpoint),
            "gc_entries" => self.gc_entries.to_string(),
            "gc_seq_len" => self.gc_seq_len.to_string(),
            "gc_batch" => self.gc_batch.to_string(),
            _ => return None,
        })
    }

    /// Every key with its effective value, one `key=value` per line.
    pub fn render(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("every listed key renders")))
            .collect()
    }
}
