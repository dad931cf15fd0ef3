//! The deterministic training loop and held-out evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{eval_rows, BatchSampler, Corpus};
use super::metrics::{MetricsRow, MetricsSink};
use super::optim::{clip_grad_norm, AdamW, AdamWConfig};
use super::schedule::{BatchSchedule, LrSchedule};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::mtpim::required_len;
use crate::nn::TokenIds;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub lr: LrSchedule,
    pub batch: BatchSchedule,
    pub seq_len: usize,
    pub total_steps: u64,
    /// Data sampling seed, independent of the parameter init seed.
    pub seed: u64,
    /// Lookahead tokens reserved per sampled row; at least the number of
    /// prediction depths. Runs sharing it sample identical windows.
    pub lookahead: usize,
    pub heldout_frac: f64,
    /// Held-out evaluation cadence in steps; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Cap on held-out rows per evaluation.
    pub eval_rows: usize,
    /// Checkpoint cadence in steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Independent slices of each batch, run in parallel.
    pub shards: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk(3000)
    }
}

impl TrainConfig {
    pub fn desk(total_steps: u64) -> Self {
        TrainConfig {
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
            lr: LrSchedule::scaled(total_steps, 1e-3, 1e-4),
            batch: BatchSchedule::constant(16),
            seq_len: 128,
            total_steps,
            seed: 0,
            lookahead: 8,
            heldout_frac: 0.1,
            eval_every: 500,
            eval_rows: 64,
            checkpoint_every: 0,
            shards: 1,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        self.batch.validate()?;
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(unit(self.adam_beta1) && unit(self.adam_beta2)) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0 && self.clip_norm > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "adam_eps and clip_norm must be positive, weight_decay non-negative".into(),
            ));
        }
        if self.seq_len == 0 || self.shards == 0 {
            return Err(Error::Config("seq_len and shards must be positive".into()));
        }
        Ok(())
    }
}

/// Held-out loss summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub loss_total: f64,
    pub loss_main: f64,
    pub loss_mpt: Vec<f64>,
    pub bits_per_byte: f64,
    pub rows: usize,
}

struct BatchResult<T: Scalar> {
    grads: Vec<Tensor<T>>,
    total: f64,
    main: f64,
    mpt: Vec<f64>,
}

/// Loss values (and gradients if `grads`) of the batch mean, from
/// `shards` slices reduced in slice order.
fn batch_pass<T: Scalar>(
    model: &LanguageModel<T>,
    tokens: &TokenIds,
    seq_len: usize,
    shards: usize,
    grads: bool,
) -> Result<BatchResult<T>> {
    let b = tokens.batch();
    let shards = shards.min(b).max(1);
    let bounds: Vec<(usize, usize)> = (0..shards)
        .map(|s| (s * b / shards, (s + 1) * b / shards))
        .collect();
    let run = |&(lo, hi): &(usize, usize)| -> Result<BatchResult<T>> {
        let rows: Vec<Vec<usize>> = (lo..hi).map(|r| tokens.row(r).to_vec()).collect();
        let part = if lo == 0 && hi == b {
            tokens.clone()
        } else {
            TokenIds::from_rows(&rows)?
        };
        let g = Graph::new();
        let loss = model.loss(model.scope(&g), &part, seq_len)?;
        let mut acc = Vec::new();
        let scale = T::of((hi - lo) as f64 / b as f64);
        if grads {
            acc = model.store.zero_grads();
            g.backward(loss.total)?.accumulate_into(&mut acc, scale);
        }
        let w = (hi - lo) as f64 / b as f64;
        Ok(BatchResult {
            grads: acc,
            total: loss.total.item().as_f64() * w,
            main: loss.main.item().as_f64() * w,
            mpt: loss.depths.iter().map(|d| d.item().as_f64() * w).collect(),
        })
    };
    let mut parts = if shards == 1 {
        vec![run(&bounds[0])?]
    } else {
        bounds.par_iter().map(run).collect::<Result<Vec<_>>>()?
    };
    let mut out = parts.remove(0);
    for p in parts {
        for (a, g) in out.grads.iter_mut().zip(&p.grads) {
            a.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(x, &y)| *x += y);
        }
        out.total += p.total;
        out.main += p.main;
        out.mpt.iter_mut().zip(&p.mpt).for_each(|(x, y)| *x += y);
    }
    Ok(out)
}

/// Model, optimizer and sampler state of one run.
pub struct Trainer<T: Scalar> {
    pub model: LanguageModel<T>,
    pub opt: AdamW<T>,
    pub config: TrainConfig,
    pub sampler: BatchSampler,
    /// Completed optimizer steps.
    pub step: u64,
    pub tokens_seen: u64,
    grads: Vec<Tensor<T>>,
    started: Instant,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: LanguageModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.lookahead < model.config.n_depths {
            return Err(Error::Config(format!(
                "lookahead {} is smaller than n_depths {}",
                config.lookahead, model.config.n_depths
            )));
        }
        if config.seq_len > model.config.max_seq_len {
            return Err(Error::Config(format!(
                "seq_len {} exceeds max_seq_len {}",
                config.seq_len, model.config.max_seq_len
            )));
        }
        Ok(Trainer {
            opt: AdamW::new(&model.store, config.adamw()),
            sampler: BatchSampler::new(config.seed, config.seq_len, config.lookahead),
            grads: model.store.zero_grads(),
            model,
            config,
            step: 0,
            tokens_seen: 0,
            started: Instant::now(),
        })
    }

    fn wall_ms(&self) -> f64 {
        self.started.elapsed().as_secs_f64() * 1e3
    }

    /// One optimizer step on a freshly sampled batch; the row carries the
    /// pre-update loss and the pre-clip gradient norm.
    pub fn train_step(&mut self, data: &[usize]) -> Result<MetricsRow> {
        let batch = self.config.batch.size_at(self.step);
        let tokens = self
            .sampler
            .sample(data, batch, self.model.config.n_depths)?;
        let res = batch_pass(
            &self.model,
            &tokens,
            self.config.seq_len,
            self.config.shards,
            true,
        )?;
        for (acc, g) in self.grads.iter_mut().zip(&res.grads) {
            acc.data_mut().copy_from_slice(g.data());
        }
        let grad_norm = clip_grad_norm(&mut self.grads, self.config.clip_norm);
        let lr = self.config.lr.lr_at(self.step);
        self.opt.step(&mut self.model.store, &mut self.grads, lr)?;
        let row = MetricsRow {
            step: self.step,
            split: "train".into(),
            loss_total: res.total,
            loss_main: res.main,
            loss_mpt: res.mpt,
            lr,
            grad_norm,
            tokens_seen: self.tokens_seen + (batch * self.config.seq_len) as u64,
            wall_ms: self.wall_ms(),
        };
        self.step += 1;
        self.tokens_seen = row.tokens_seen;
        Ok(row)
    }

    pub fn evaluate(&self, data: &[usize]) -> Result<EvalResult> {
        evaluate(
            &self.model,
            data,
            self.config.seq_len,
            self.config.eval_rows,
            self.config.shards,
        )
    }

    fn eval_row(&self, data: &[usize]) -> Result<MetricsRow> {
        let e = self.evaluate(data)?;
        Ok(MetricsRow {
            step: self.step,
            split: "heldout".into(),
            loss_total: e.loss_total,
            loss_main: e.loss_main,
            loss_mpt: e.loss_mpt,
            lr: self.config.lr.lr_at(self.step),
            grad_norm: 0.0,
            tokens_seen: self.tokens_seen,
            wall_ms: self.wall_ms(),
        })
    }

    /// Trains until `config.total_steps`, evaluating on the held-out split
    /// at the configured cadence and at the end. With a checkpoint path,
    /// saves at the checkpoint cadence, at the end, and before returning a
    /// numeric failure (the saved state is the last good one).
    pub fn run(
        &mut self,
        corpus: &Corpus,
        sink: &mut MetricsSink,
        checkpoint: Option<&Path>,
    ) -> Result<()> {
        let c = self.config.clone();
        let eval_now = |step: u64| {
            c.eval_every > 0 && step.is_multiple_of(c.eval_every) && !corpus.heldout.is_empty()
        };
        while self.step < c.total_steps {
            if eval_now(self.step) {
                let row = self.eval_row(&corpus.heldout)?;
                sink.push(row)?;
            }
            let row = match self.train_step(&corpus.train) {
                Ok(r) => r,
                Err(e) if e.is_numeric() => {
                    if let Some(p) = checkpoint {
                        super::checkpoint::save(p, self)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            sink.push(row)?;
            if let Some(p) = checkpoint {
                if c.checkpoint_every > 0 && self.step.is_multiple_of(c.checkpoint_every) {
                    super::checkpoint::save(p, self)?;
                }
            }
        }
        if !corpus.heldout.is_empty()
            && sink
                .rows()
                .last()
                .is_none_or(|r| r.split != "heldout" || r.step != self.step)
        {
            let row = self.eval_row(&corpus.heldout)?;
            sink.push(row)?;
        }
        if let Some(p) = checkpoint {
            super::checkpoint::save(p, self)?;
        }
        Ok(())
    }
}

/// Mean losses over consecutive held-out windows; bits per byte come from
/// the main head.
pub fn evaluate<T: Scalar>(
    model: &LanguageModel<T>,
    data: &[usize],
    seq_len: usize,
    max_rows: usize,
    shards: usize,
) -> Result<EvalResult> {
    let row_len = required_len(seq_len, model.config.n_depths);
    let rows = eval_rows(data, seq_len, row_len, max_rows);
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "held-out data holds {} tokens, at least {row_len} needed",
            data.len()
        )));
    }
    let mut sum = EvalResult {
        loss_total: 0.0,
        loss_main: 0.0,
        loss_mpt: vec![0.0; model.config.n_depths],
        bits_per_byte: 0.0,
        rows: rows.len(),
    };
    for chunk in rows.chunks(16) {
        let r = batch_pass(model, &TokenIds::from_rows(chunk)?, seq_len, shards, false)?;
        let w = chunk.len() as f64 / rows.len() as f64;
        sum.loss_total += r.total * w;
        sum.loss_main += r.main * w;
        sum.loss_mpt
            .iter_mut()
            .zip(&r.mpt)
            .for_each(|(a, b)| *a += b * w);
    }
    sum.bits_per_byte = sum.loss_main / std::f64::consts::LN_2;
    Ok(sum)
}

/// Trains a fresh run and returns the trainer.
pub fn train<T: Scalar>(
    model: LanguageModel<T>,
    corpus: &Corpus,
    config: TrainConfig,
    sink: &mut MetricsSink,
    checkpoint: Option<PathBuf>,
) -> Result<Trainer<T>> {
    let mut t = Trainer::new(model, config)?;
    t.run(corpus, sink, checkpoint.as_deref())?;
    Ok(t)
}
