//! The full byte-level language model: token plus learned position
//! embeddings, a dense-skip stack of blocks, a final norm and main
//! next-token head, and the multi-token prediction heads.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ldrscm::{stack_forward, ResidualStrategy, Stack, StackOutput};
use crate::mtpim::{joint_loss, mtpim_forward, LossParts, MtpimParams};
use crate::nn::{self, Activation, Scope, TokenIds};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;
use crate::transformerx::{BlockConfig, TransformerXBlock};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_mult: usize,
    /// Convolution kernel lengths per block; empty disables the branches.
    pub kernels: Vec<usize>,
    pub activation: Activation,
    pub residual: ResidualStrategy,
    pub n_depths: usize,
    /// Per-depth loss weights; `None` is uniform.
    pub gammas: Option<Vec<f64>>,
    pub lambda_mpt: f64,
    pub max_seq_len: usize,
    pub tie_head: bool,
    pub init_std: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: crate::harness::data::VOCAB,
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            ffn_mult: 4,
            kernels: vec![3, 15],
            activation: Activation::ESwish,
            residual: ResidualStrategy::LearnableDense,
            n_depths: 2,
            gammas: None,
            lambda_mpt: 0.3,
            max_seq_len: 128,
            tie_head: false,
            init_std: 0.006,
            precision: Precision::Single,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab < 2 {
            return fail(format!("vocab must be at least 2, got {}", self.vocab));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.ffn_mult == 0 {
            return fail("ffn_mult must be at least 1".into());
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be at least 1".into());
        }
        if !(self.lambda_mpt >= 0.0 && self.lambda_mpt.is_finite()) {
            return fail(format!(
                "lambda_mpt must be finite and non-negative, got {}",
                self.lambda_mpt
            ));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail(format!("init_std must be positive, got {}", self.init_std));
        }
        if let Some(g) = &self.gammas {
            if g.len() != self.n_depths {
                return fail(format!(
                    "{} gammas given for {} depths",
                    g.len(),
                    self.n_depths
                ));
            }
        }
        Ok(())
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            ffn_mult: self.ffn_mult,
            kernels: self.kernels.clone(),
            activation: self.activation,
            init_std: self.init_std,
        }
    }

    /// Uniform-logit loss of a freshly initialised model: `ln V * (1 + lambda * sum(gamma))`.
    pub fn uniform_loss(&self) -> f64 {
        let gamma_sum = match &self.gammas {
            Some(g) => g.iter().sum(),
            None if self.n_depths > 0 => 1.0,
            None => 0.0,
        };
        (self.vocab as f64).ln() * (1.0 + self.lambda_mpt * gamma_sum)
    }
}

/// Gradient routing switches for the shared embedding table.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub detach_backbone_embedding: bool,
    pub detach_shifted_embedding: bool,
}

#[derive(Debug, Clone)]
pub struct LanguageModel<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    /// `[V, d]`, shared by the backbone and every prediction depth.
    pub embed: ParamId,
    /// `[max_seq_len, d]`
    pub pos: ParamId,
    pub stack: Stack,
    pub final_norm: ParamId,
    /// `[d, V]`; `None` when the head is tied to the embedding table.
    pub head: Option<ParamId>,
    pub mtpim: MtpimParams,
}

pub type Model32 = LanguageModel<f32>;
pub type Model64 = LanguageModel<f64>;

impl<T: Scalar> LanguageModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.precision != T::PRECISION {
            return Err(Error::Config(format!(
                "config asks for {} precision but the model is {}",
                config.precision.name(),
                T::PRECISION.name()
            )));
        }
        let (d, v, std, seed) = (config.d_model, config.vocab, config.init_std, config.seed);
        let mut store = ParamStore::new();
        let embed = store.add_normal("embed", &[v, d], std, seed)?;
        let pos = store.add_normal("pos", &[config.max_seq_len, d], std, seed)?;
        let bc = config.block_config();
        let blocks = (0..config.n_layers)
            .map(|l| TransformerXBlock::init(&mut store, &format!("layer{l}"), &bc, seed))
            .collect::<Result<Vec<_>>>()?;
        let stack = Stack::new(&mut store, blocks, config.residual)?;
        let final_norm = store.add("final_norm", Tensor::ones(&[d]))?;
        let head = if config.tie_head {
            None
        } else {
            Some(store.add_normal("head", &[d, v], std, seed)?)
        };
        let mtpim = MtpimParams::init(
            &mut store,
            d,
            config.n_heads,
            v,
            config.n_depths,
            config.gammas.clone(),
            std,
            seed,
        )?;
        Ok(LanguageModel {
            config,
            store,
            embed,
            pos,
            stack,
            final_norm,
            head,
            mtpim,
        })
    }

    pub fn scope<'g>(&'g self, g: &'g Graph<T>) -> Scope<'g, T> {
        Scope::new(g, &self.store)
    }

    /// `H[0]`: token plus position embeddings.
    pub fn embed_input<'g>(
        &self,
        sc: Scope<'g, T>,
        table: &Var<'g, T>,
        tokens: &TokenIds,
    ) -> Result<Var<'g, T>> {
        let len = tokens.len();
        if len == 0 || len > self.config.max_seq_len {
            return Err(Error::contract(format!(
                "sequence length {len} outside 1..={}",
                self.config.max_seq_len
            )));
        }
        let pos = sc.p(self.pos).slice(0, 0, len)?;
        nn::embed(table, tokens)?.add(&pos)
    }

    pub fn backbone<'g>(&self, sc: Scope<'g, T>, tokens: &TokenIds) -> Result<StackOutput<'g, T>> {
        let h0 = self.embed_input(sc, &sc.p(self.embed), tokens)?;
        stack_forward(sc, &h0, &self.stack)
    }

    pub fn head_logits<'g>(&self, sc: Scope<'g, T>, h: &Var<'g, T>) -> Result<Var<'g, T>> {
        let normed = nn::rms_norm(sc, h, self.final_norm)?;
        match self.head {
            Some(w) => normed.matmul(&sc.p(w)),
            None => normed.matmul_nt(&sc.p(self.embed)),
        }
    }

    /// Main-head logits `[B, L, V]`.
    pub fn logits<'g>(&self, sc: Scope<'g, T>, tokens: &TokenIds) -> Result<Var<'g, T>> {
        let h = self.backbone(sc, tokens)?.last;
        self.head_logits(sc, &h)
    }

    /// Main logits and depth logits over the first `seq_len` positions of `tokens`.
    pub fn all_logits<'g>(
        &self,
        sc: Scope<'g, T>,
        tokens: &TokenIds,
        seq_len: usize,
        opts: ForwardOptions,
    ) -> Result<(Var<'g, T>, Vec<Var<'g, T>>)> {
        let table = sc.p(self.embed);
        let detached = |on: bool| if on { table.detach() } else { table };
        let input = tokens.window(0, seq_len)?;
        let h0 = self.embed_input(sc, &detached(opts.detach_backbone_embedding), &input)?;
        let h = stack_forward(sc, &h0, &self.stack)?.last;
        let main = self.head_logits(sc, &h)?;
        let depths = mtpim_forward(
            sc,
            &h,
            &detached(opts.detach_shifted_embedding),
            tokens,
            &self.mtpim,
        )?;
        Ok((main, depths))
    }

    /// Joint training loss on rows of `seq_len + n_depths + 1` tokens.
    pub fn loss<'g>(
        &self,
        sc: Scope<'g, T>,
        tokens: &TokenIds,
        seq_len: usize,
    ) -> Result<LossParts<'g, T>> {
        self.loss_with(sc, tokens, seq_len, ForwardOptions::default())
    }

    pub fn loss_with<'g>(
        &self,
        sc: Scope<'g, T>,
        tokens: &TokenIds,
        seq_len: usize,
        opts: ForwardOptions,
    ) -> Result<LossParts<'g, T>> {
        let (main, depths) = self.all_logits(sc, tokens, seq_len, opts)?;
        joint_loss(
            &main,
            &depths,
            tokens,
            &self.mtpim.gammas,
            self.config.lambda_mpt,
        )
    }

    /// Greedy main-head prediction after `context`, reading at most the
    /// last `max_seq_len` tokens.
    pub fn greedy_next(&self, context: &[usize]) -> Result<usize> {
        if context.is_empty() {
            return Err(Error::contract("cannot predict from an empty context"));
        }
        let window = &context[context.len().saturating_sub(self.config.max_seq_len)..];
        let g = Graph::new();
        let logits = self.logits(self.scope(&g), &TokenIds::single(window))?;
        let v = self.config.vocab;
        let last = logits.value();
        Ok(argmax(&last.data()[(window.len() - 1) * v..]))
    }

    /// Plain greedy decoding; returns only the generated tokens.
    pub fn greedy_decode(&self, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
        let mut seq = prompt.to_vec();
        for _ in 0..max_new {
            let t = self.greedy_next(&seq)?;
            seq.push(t);
        }
        Ok(seq.split_off(prompt.len()))
    }

    /// The same model at another precision.
    pub fn cast<U: Scalar>(&self) -> Result<LanguageModel<U>> {
        let mut m = LanguageModel::<U>::new(ModelConfig {
            precision: U::PRECISION,
            ..self.config.clone()
        })?;
        for (id, p) in self.store.iter() {
            *m.store.value_mut(id) = p.value.cast();
        }
        Ok(m)
    }

    /// Every adaptive-activation scalar in the stack.
    pub fn activation_params(&self) -> Vec<ParamId> {
        self.stack
            .blocks
            .iter()
            .flat_map(|b| b.activation_params())
            .collect()
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
