//! Learnable dense residual skip connections over a stack of blocks.
//!
//! With the learnable strategy, layer `l` computes
//!
//! ```text
//! H[l+1] = Layer(H[l]) + sum_{i=0..=l} softmax(a[l])_i * H[i]
//! ```
//!
//! where `a[l]` is a vector of `l + 1` raw logits initialised to zero and
//! `Layer` is the block's residual transformation
//! ([`block_residual`](crate::transformerx::block_residual)). The fixed
//! strategy uses the uniform weights `1 / (l + 1)`; the standard strategy is
//! `Layer(H[l]) + H[l]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{analytic_grads, central_difference};
use crate::nn::Scope;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transformerx::{block_residual, TransformerXBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualStrategy {
    LearnableDense,
    FixedDense,
    Standard,
}

impl ResidualStrategy {
    pub const ALL: [ResidualStrategy; 3] = [
        ResidualStrategy::LearnableDense,
        ResidualStrategy::FixedDense,
        ResidualStrategy::Standard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ResidualStrategy::LearnableDense => "learnable_dense",
            ResidualStrategy::FixedDense => "fixed_dense",
            ResidualStrategy::Standard => "standard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ResidualStrategy::ALL.into_iter().find(|r| r.name() == s)
    }
}

/// Raw skip logits; layer `l` owns a vector of length `l + 1`.
#[derive(Debug, Clone)]
pub struct AlphaBank {
    pub logits: Vec<ParamId>,
}

impl AlphaBank {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, depth: usize) -> Result<Self> {
        let logits = (0..depth)
            .map(|l| store.add(format!("alpha{l}"), Tensor::zeros(&[l + 1])))
            .collect::<Result<Vec<_>>>()?;
        Ok(AlphaBank { logits })
    }

    pub fn depth(&self) -> usize {
        self.logits.len()
    }
}

/// Softmax-normalised skip weights of layer `l`.
pub fn normalized_alphas<T: Scalar>(
    store: &ParamStore<T>,
    bank: &AlphaBank,
    l: usize,
) -> Result<Vec<T>> {
    let id = *bank.logits.get(l).ok_or(Error::Index {
        what: "layer",
        index: l,
        len: bank.depth(),
    })?;
    let g = Graph::new();
    let w = g.param(store, id).softmax(0)?;
    Ok(w.value().data().to_vec())
}

#[derive(Debug, Clone)]
pub struct Stack {
    pub blocks: Vec<TransformerXBlock>,
    /// Present exactly when the strategy is learnable.
    pub alphas: Option<AlphaBank>,
    pub strategy: ResidualStrategy,
}

impl Stack {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        blocks: Vec<TransformerXBlock>,
        strategy: ResidualStrategy,
    ) -> Result<Self> {
        let alphas = match strategy {
            ResidualStrategy::LearnableDense => Some(AlphaBank::init(store, blocks.len())?),
            _ => None,
        };
        Ok(Stack {
            blocks,
            alphas,
            strategy,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Layer outputs retained during a forward pass: `H[0] ..= H[depth]`.
    pub fn retained_taps(&self) -> usize {
        self.depth() + 1
    }
}

pub struct StackOutput<'g, T: Scalar> {
    pub last: Var<'g, T>,
    /// `H[0] ..= H[depth]`.
    pub taps: Vec<Var<'g, T>>,
    /// Normalised skip weights used at each layer (absent for the standard strategy).
    pub weights: Vec<Option<Var<'g, T>>>,
}

pub fn stack_forward<'g, T: Scalar>(
    sc: Scope<'g, T>,
    h0: &Var<'g, T>,
    stack: &Stack,
) -> Result<StackOutput<'g, T>> {
    let mut taps = Vec::with_capacity(stack.retained_taps());
    let mut weights = Vec::with_capacity(stack.depth());
    taps.push(*h0);
    for (l, blk) in stack.blocks.iter().enumerate() {
        let h = taps[l];
        let layer = block_residual(sc, &h, blk)?;
        let (next, w) = match stack.strategy {
            ResidualStrategy::Standard => (layer.add(&h)?, None),
            ResidualStrategy::LearnableDense => {
                let bank = stack
                    .alphas
                    .as_ref()
                    .ok_or_else(|| Error::contract("learnable dense stack without skip logits"))?;
                let w = sc.p(bank.logits[l]).softmax(0)?;
                (layer.add(&sc.graph.weighted_sum(&taps, w)?)?, Some(w))
            }
            ResidualStrategy::FixedDense => {
                let uniform = T::one() / T::of((l + 1) as f64);
                let w = sc.constant(Tensor::full(&[l + 1], uniform));
                (layer.add(&sc.graph.weighted_sum(&taps, w)?)?, Some(w))
            }
        };
        taps.push(next);
        weights.push(w);
    }
    Ok(StackOutput {
        last: *taps.last().expect("h0 is always retained"),
        taps,
        weights,
    })
}

/// One skip weight in the gradient report.
#[derive(Debug, Clone, Serialize)]
pub struct AlphaGradRow {
    pub layer: usize,
    pub alpha_index: usize,
    pub normalized_value: f64,
    pub analytic_grad: f64,
    pub fd_grad: f64,
}

/// Analytic and central-difference gradients of every raw skip logit.
/// Empty for stacks without learnable skips.
pub fn alpha_grad_report<T, F>(
    store: &mut ParamStore<T>,
    stack: &Stack,
    eps: T,
    loss_fn: F,
) -> Result<Vec<AlphaGradRow>>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &'g ParamStore<T>) -> Result<Var<'g, T>>,
{
    let Some(bank) = &stack.alphas else {
        return Ok(Vec::new());
    };
    let analytic = analytic_grads(store, &bank.logits, &loss_fn)?;
    let mut rows = Vec::new();
    for (l, (&id, grad)) in bank.logits.iter().zip(&analytic).enumerate() {
        let normalized = normalized_alphas(store, bank, l)?;
        for (i, &a) in grad.iter().enumerate() {
            let fd = central_difference(store, id, i, eps, &loss_fn)?;
            rows.push(AlphaGradRow {
                layer: l,
                alpha_index: i,
                normalized_value: normalized[i].as_f64(),
                analytic_grad: a.as_f64(),
                fd_grad: fd.as_f64(),
            });
        }
    }
    Ok(rows)
}
