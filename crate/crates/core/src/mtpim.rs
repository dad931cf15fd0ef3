//! Multi-token prediction heads.
//!
//! Depth `j` (1-based) cross-attends from the previous depth's hidden state
//! to the shared token embeddings shifted left by `j`, then predicts the
//! token `j + 1` positions ahead:
//!
//! ```text
//! h[j]      = h[j-1] + attn_j(norm(h[j-1]), norm(embed(tokens[j .. j+L])))
//! logits[j] = norm(h[j]) * O_j
//! ```
//!
//! `h[0]` is the backbone output. The attention is causal, so the depth-`j`
//! prediction at position `i` reads tokens up to `i + j` only.

use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{argmax, LanguageModel};
use crate::nn::{self, AttentionParams, Mask, Scope, TokenIds};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct DepthParams {
    pub q_norm: ParamId,
    pub kv_norm: ParamId,
    pub out_norm: ParamId,
    pub cross_attn: AttentionParams,
    /// `[d, V]`
    pub head: ParamId,
}

#[derive(Debug, Clone)]
pub struct MtpimParams {
    pub depths: Vec<DepthParams>,
    pub gammas: Vec<f64>,
}

impl MtpimParams {
    /// `gammas` defaults to uniform `1 / n_depths`.
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        d_model: usize,
        n_heads: usize,
        vocab: usize,
        n_depths: usize,
        gammas: Option<Vec<f64>>,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        let gammas = match gammas {
            Some(g) => g,
            None => vec![1.0 / n_depths as f64; n_depths],
        };
        if gammas.len() != n_depths {
            return Err(Error::Config(format!(
                "expected {n_depths} depth weights, got {}",
                gammas.len()
            )));
        }
        if gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::Config(format!(
                "depth weights must be finite and non-negative, got {gammas:?}"
            )));
        }
        let mut depths = Vec::with_capacity(n_depths);
        for j in 1..=n_depths {
            let pre = format!("mtp{j}");
            let ones = |store: &mut ParamStore<T>, n: &str| {
                store.add(format!("{pre}.{n}"), Tensor::ones(&[d_model]))
            };
            depths.push(DepthParams {
                q_norm: ones(store, "q_norm")?,
                kv_norm: ones(store, "kv_norm")?,
                out_norm: ones(store, "out_norm")?,
                cross_attn: AttentionParams::init(
                    store,
                    &format!("{pre}.xattn"),
                    d_model,
                    n_heads,
                    std,
                    seed,
                )?,
                head: store.add_normal(&format!("{pre}.head"), &[d_model, vocab], std, seed)?,
            });
        }
        Ok(MtpimParams { depths, gammas })
    }

    pub fn n_depths(&self) -> usize {
        self.depths.len()
    }

    fn depth(&self, j: usize) -> Result<&DepthParams> {
        if j == 0 || j > self.depths.len() {
            return Err(Error::Index {
                what: "prediction depth",
                index: j,
                len: self.depths.len(),
            });
        }
        Ok(&self.depths[j - 1])
    }
}

/// One depth of the chain (`j` is 1-based).
pub fn depth_step<'g, T: Scalar>(
    sc: Scope<'g, T>,
    h_prev: &Var<'g, T>,
    shifted_emb: &Var<'g, T>,
    j: usize,
    p: &MtpimParams,
) -> Result<Var<'g, T>> {
    let dp = p.depth(j)?;
    let q = nn::rms_norm(sc, h_prev, dp.q_norm)?;
    let kv = nn::rms_norm(sc, shifted_emb, dp.kv_norm)?;
    h_prev.add(&nn::attention(sc, &q, &kv, &dp.cross_attn, Mask::Causal)?)
}

pub fn depth_logits<'g, T: Scalar>(
    sc: Scope<'g, T>,
    h: &Var<'g, T>,
    j: usize,
    p: &MtpimParams,
) -> Result<Var<'g, T>> {
    let dp = p.depth(j)?;
    nn::rms_norm(sc, h, dp.out_norm)?.matmul(&sc.p(dp.head))
}

/// Token columns a batch must hold for a window of `seq_len` positions.
pub fn required_len(seq_len: usize, n_depths: usize) -> usize {
    seq_len + n_depths + 1
}

fn check_lookahead(tokens: &TokenIds, seq_len: usize, n_depths: usize) -> Result<()> {
    let need = required_len(seq_len, n_depths);
    if tokens.len() < need {
        return Err(Error::contract(format!(
            "batch holds {} tokens per row, {need} needed for {n_depths} prediction depths",
            tokens.len()
        )));
    }
    Ok(())
}

/// Depth logits `[B, L, V]` for `j = 1 ..= n_depths`, where `L` is the
/// backbone's sequence length and `embed_table` is the backbone's own
/// embedding parameter.
pub fn mtpim_forward<'g, T: Scalar>(
    sc: Scope<'g, T>,
    h_backbone: &Var<'g, T>,
    embed_table: &Var<'g, T>,
    tokens: &TokenIds,
    p: &MtpimParams,
) -> Result<Vec<Var<'g, T>>> {
    let seq_len = h_backbone.shape()[1];
    check_lookahead(tokens, seq_len, p.n_depths())?;
    let mut h = *h_backbone;
    let mut out = Vec::with_capacity(p.n_depths());
    for j in 1..=p.n_depths() {
        let shifted = nn::embed(embed_table, &tokens.window(j, seq_len)?)?;
        h = depth_step(sc, &h, &shifted, j, p)?;
        out.push(depth_logits(sc, &h, j, p)?);
    }
    Ok(out)
}

/// Total loss together with its parts.
pub struct LossParts<'g, T: Scalar> {
    pub total: Var<'g, T>,
    pub main: Var<'g, T>,
    pub depths: Vec<Var<'g, T>>,
}

/// `CE(main) + lambda * sum_j gamma_j * CE(depth j)`. Main targets are
/// `tokens[i + 1]`, depth-`j` targets are `tokens[i + j + 1]`.
pub fn joint_loss<'g, T: Scalar>(
    main_logits: &Var<'g, T>,
    depth_logits: &[Var<'g, T>],
    tokens: &TokenIds,
    gammas: &[f64],
    lambda_mpt: f64,
) -> Result<LossParts<'g, T>> {
    if !(lambda_mpt >= 0.0 && lambda_mpt.is_finite()) {
        return Err(Error::Config(format!(
            "lambda_mpt must be finite and non-negative, got {lambda_mpt}"
        )));
    }
    if gammas.len() != depth_logits.len() {
        return Err(Error::contract(format!(
            "{} depth weights for {} depths",
            gammas.len(),
            depth_logits.len()
        )));
    }
    let seq_len = main_logits.shape()[1];
    check_lookahead(tokens, seq_len, depth_logits.len())?;
    let main = nn::cross_entropy(main_logits, &tokens.window(1, seq_len)?)?;
    let depths = depth_logits
        .iter()
        .enumerate()
        .map(|(i, logits)| nn::cross_entropy(logits, &tokens.window(i + 2, seq_len)?))
        .collect::<Result<Vec<_>>>()?;
    let mut weighted: Option<Var<'g, T>> = None;
    for (ce, &g) in depths.iter().zip(gammas) {
        let term = ce.scale(T::of(g))?;
        weighted = Some(match weighted {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let total = match weighted {
        Some(w) => main.add(&w.scale(T::of(lambda_mpt))?)?,
        None => main,
    };
    Ok(LossParts {
        total,
        main,
        depths,
    })
}

/// Per-step draft statistics of [`draft_verify_decode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DecodeStep {
    pub step: usize,
    pub drafted: usize,
    pub accepted: usize,
    /// Tokens appended this step (the verified token, accepted drafts and
    /// the main head's correction, if any).
    pub emitted: usize,
}

#[derive(Debug, Clone, Default)]
pub struct DecodeOutput {
    /// Generated tokens, prompt excluded.
    pub tokens: Vec<usize>,
    pub steps: Vec<DecodeStep>,
}

impl DecodeOutput {
    pub fn drafted(&self) -> usize {
        self.steps.iter().map(|s| s.drafted).sum()
    }

    pub fn accepted(&self) -> usize {
        self.steps.iter().map(|s| s.accepted).sum()
    }

    pub fn acceptance_rate(&self) -> f64 {
        match self.drafted() {
            0 => 0.0,
            n => self.accepted() as f64 / n as f64,
        }
    }
}

/// Greedy speculative decoding. Each step takes the main head's greedy
/// token, lets the prediction depths draft the tokens after it, and keeps
/// the longest draft prefix the main head reproduces. The output equals
/// [`LanguageModel::greedy_decode`] token for token.
pub fn draft_verify_decode<T: Scalar>(
    model: &LanguageModel<T>,
    prompt: &[usize],
    max_new: usize,
) -> Result<DecodeOutput> {
    if max_new == 0 {
        return Err(Error::contract("max_new must be positive"));
    }
    if prompt.is_empty() {
        return Err(Error::contract("prompt must hold at least one token"));
    }
    let max_len = model.config.max_seq_len;
    let mut seq = prompt.to_vec();
    let mut out = DecodeOutput::default();
    while seq.len() - prompt.len() < max_new {
        let remaining = max_new - (seq.len() - prompt.len());
        let (first, drafts) = propose(model, &seq, remaining - 1)?;
        let before = seq.len();
        seq.push(first);
        let mut accepted = 0;
        let mut correction = None;
        if !drafts.is_empty() {
            if seq.len() + drafts.len() - 1 <= max_len {
                // one causal pass scores every draft at once
                let mut cand = seq.clone();
                cand.extend_from_slice(&drafts[..drafts.len() - 1]);
                let g = Graph::new();
                let logits = model
                    .logits(model.scope(&g), &TokenIds::single(&cand))?
                    .value();
                let v = model.config.vocab;
                for (k, &d) in drafts.iter().enumerate() {
                    let p = seq.len() - 1 + k;
                    let pred = argmax(&logits.data()[p * v..(p + 1) * v]);
                    if pred != d {
                        correction = Some(pred);
                        break;
                    }
                    accepted += 1;
                }
            } else {
                // the window slides, so each position gets its own pass
                let mut ctx = seq.clone();
                for &d in &drafts {
                    let pred = model.greedy_next(&ctx)?;
                    if pred != d {
                        correction = Some(pred);
                        break;
                    }
                    ctx.push(d);
                    accepted += 1;
                }
            }
        }
        seq.extend_from_slice(&drafts[..accepted]);
        if let Some(c) = correction {
            seq.push(c);
        }
        out.steps.push(DecodeStep {
            step: out.steps.len(),
            drafted: drafts.len(),
            accepted,
            emitted: seq.len() - before,
        });
    }
    out.tokens = seq.split_off(prompt.len());
    Ok(out)
}

/// The main head's greedy token after `seq` plus up to `max_drafts` depth drafts.
fn propose<T: Scalar>(
    model: &LanguageModel<T>,
    seq: &[usize],
    max_drafts: usize,
) -> Result<(usize, Vec<usize>)> {
    let ctx = &seq[seq.len().saturating_sub(model.config.max_seq_len)..];
    let len = ctx.len();
    let v = model.config.vocab;
    let g = Graph::new();
    let sc = model.scope(&g);
    let tokens = TokenIds::single(ctx);
    let mut h = model.backbone(sc, &tokens)?.last;
    let main = model.head_logits(sc, &h)?.value();
    let first = argmax(&main.data()[(len - 1) * v..]);

    let n = model.mtpim.n_depths().min(max_drafts);
    let table = sc.p(model.embed);
    let mut full = ctx.to_vec();
    full.push(first);
    let mut drafts = Vec::with_capacity(n);
    for j in 1..=n {
        let shifted = TokenIds::single(&full[j..j + len]);
        h = depth_step(sc, &h, &nn::embed(&table, &shifted)?, j, &model.mtpim)?;
        let logits = depth_logits(sc, &h, j, &model.mtpim)?.value();
        let d = argmax(&logits.data()[(len - 1) * v..]);
        drafts.push(d);
        full.push(d);
    }
    Ok((first, drafts))
}
