//! The multi-scale convolution transformer block.
//!
//! After causal self-attention, each scale branch runs a causal depthwise
//! separable 1-D convolution followed by an adaptive activation. The branch
//! features are then fused into the attention stream one branch at a time
//! through cross-attention and an MLP, and the block ends with the FFN.
//!
//! Everything is pre-norm and every sublayer is wrapped residually, so a
//! block whose matrices are all zero is exactly the identity map.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, AttentionParams, ESwishParam, FfnParams, Mask, Scope};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct DsConvParams {
    pub kernel_len: usize,
    pub channels: usize,
    /// `[k, C]`
    pub depthwise: ParamId,
    /// `[1, C, C]`
    pub pointwise: ParamId,
}

impl DsConvParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kernel_len: usize,
        channels: usize,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        if kernel_len == 0 {
            return Err(Error::Config("kernel lengths must be at least 1".into()));
        }
        Ok(DsConvParams {
            kernel_len,
            channels,
            depthwise: store.add_normal(
                &format!("{prefix}.kd"),
                &[kernel_len, channels],
                std,
                seed,
            )?,
            pointwise: store.add_normal(
                &format!("{prefix}.kp"),
                &[1, channels, channels],
                std,
                seed,
            )?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScaleBranch {
    pub conv: DsConvParams,
    /// Activation applied to the convolution output.
    pub act: ESwishParam,
    pub fusion_attn: AttentionParams,
    pub fusion_mlp: FfnParams,
}

#[derive(Debug, Clone)]
pub struct TransformerXBlock {
    pub self_attn: AttentionParams,
    pub branches: Vec<ScaleBranch>,
    pub ffn: FfnParams,
    pub norm_attn: ParamId,
    /// Present when the block has convolution branches.
    pub norm_branch: Option<ParamId>,
    pub norm_ffn: ParamId,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    /// Kernel lengths in fusion order; empty for a plain attention + FFN layer.
    pub kernels: Vec<usize>,
    pub activation: Activation,
    pub init_std: f64,
}

impl BlockConfig {
    /// Closed-form scalar parameter count of one block.
    pub fn num_scalars(&self) -> usize {
        let d = self.d_model;
        let attn = 4 * d * d;
        let ffn = FfnParams::num_scalars(d, self.ffn_mult);
        let norms = if self.kernels.is_empty() {
            2 * d
        } else {
            3 * d
        };
        let branches: usize = self
            .kernels
            .iter()
            .map(|&k| k * d + d * d + 1 + attn + ffn)
            .sum();
        attn + ffn + norms + branches
    }
}

impl TransformerXBlock {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &BlockConfig,
        seed: u64,
    ) -> Result<Self> {
        let monotone = cfg.kernels.windows(2).all(|w| w[0] < w[1])
            || cfg.kernels.windows(2).all(|w| w[0] > w[1]);
        if !monotone {
            return Err(Error::Config(format!(
                "kernel lengths must be strictly ordered, got {:?}",
                cfg.kernels
            )));
        }
        let (d, std) = (cfg.d_model, cfg.init_std);
        let ones = |store: &mut ParamStore<T>, n: &str| {
            store.add(format!("{prefix}.{n}"), Tensor::ones(&[d]))
        };
        let self_attn =
            AttentionParams::init(store, &format!("{prefix}.attn"), d, cfg.n_heads, std, seed)?;
        let mut branches = Vec::with_capacity(cfg.kernels.len());
        for (i, &k) in cfg.kernels.iter().enumerate() {
            let bp = format!("{prefix}.branch{i}");
            branches.push(ScaleBranch {
                conv: DsConvParams::init(store, &format!("{bp}.conv"), k, d, std, seed)?,
                act: ESwishParam::init(store, &format!("{bp}.beta"))?,
                fusion_attn: AttentionParams::init(
                    store,
                    &format!("{bp}.xattn"),
                    d,
                    cfg.n_heads,
                    std,
                    seed,
                )?,
                fusion_mlp: FfnParams::init(
                    store,
                    &format!("{bp}.mlp"),
                    d,
                    cfg.ffn_mult,
                    std,
                    seed,
                )?,
            });
        }
        let ffn = FfnParams::init(store, &format!("{prefix}.ffn"), d, cfg.ffn_mult, std, seed)?;
        let block = TransformerXBlock {
            self_attn,
            norm_attn: ones(store, "norm_attn")?,
            norm_branch: if branches.is_empty() {
                None
            } else {
                Some(ones(store, "norm_branch")?)
            },
            norm_ffn: ones(store, "norm_ffn")?,
            branches,
            ffn,
            activation: cfg.activation,
        };
        if block.activation == Activation::Swish {
            for id in block.activation_params() {
                store.set_frozen(id, true);
            }
        }
        Ok(block)
    }

    /// Every adaptive-activation scalar in the block.
    pub fn activation_params(&self) -> Vec<ParamId> {
        let mut v = vec![self.ffn.eswish.beta];
        for b in &self.branches {
            v.push(b.act.beta);
            v.push(b.fusion_mlp.eswish.beta);
        }
        v
    }
}

/// Causal depthwise convolution followed by pointwise channel mixing.
pub fn ds_conv_1d<'g, T: Scalar>(
    sc: Scope<'g, T>,
    x: &Var<'g, T>,
    p: &DsConvParams,
) -> Result<Var<'g, T>> {
    let c = p.channels;
    let depthwise = x.causal_depthwise_conv(&sc.p(p.depthwise))?;
    let pointwise = sc.p(p.pointwise).reshape(&[c, c])?;
    depthwise.matmul(&pointwise)
}

/// `act(ds_conv_1d(x))`, the per-branch feature map.
pub fn branch_features<'g, T: Scalar>(
    sc: Scope<'g, T>,
    x: &Var<'g, T>,
    conv: &DsConvParams,
    es: ESwishParam,
    act: Activation,
) -> Result<Var<'g, T>> {
    nn::activate(sc, &ds_conv_1d(sc, x, conv)?, es, act)
}

/// Runs the fusion steps and also returns each step's residual increment.
fn fusion_steps<'g, T: Scalar>(
    sc: Scope<'g, T>,
    x0: &Var<'g, T>,
    hs: &[Var<'g, T>],
    branches: &[ScaleBranch],
    act: Activation,
) -> Result<(Var<'g, T>, Vec<Var<'g, T>>)> {
    if hs.len() != branches.len() {
        return Err(Error::contract(format!(
            "fusion chain got {} feature maps for {} branches",
            hs.len(),
            branches.len()
        )));
    }
    if branches.is_empty() {
        return Err(Error::contract("fusion chain needs at least one branch"));
    }
    let mut x = *x0;
    let mut deltas = Vec::with_capacity(hs.len());
    for (h, br) in hs.iter().zip(branches) {
        let attended = nn::attention(sc, &x, h, &br.fusion_attn, Mask::Causal)?;
        let delta = nn::ffn(sc, &x.add(&attended)?, &br.fusion_mlp, act)?;
        x = x.add(&delta)?;
        deltas.push(delta);
    }
    Ok((x, deltas))
}

/// Sequential fusion: `x <- x + mlp_i(x + cross_attn_i(x, h_i))` for each branch in order.
pub fn fusion_chain<'g, T: Scalar>(
    sc: Scope<'g, T>,
    x0: &Var<'g, T>,
    hs: &[Var<'g, T>],
    branches: &[ScaleBranch],
    act: Activation,
) -> Result<Var<'g, T>> {
    fusion_steps(sc, x0, hs, branches, act).map(|(x, _)| x)
}

struct BlockPass<'g, T: Scalar> {
    out: Var<'g, T>,
    residual: Var<'g, T>,
}

fn block_pass<'g, T: Scalar>(
    sc: Scope<'g, T>,
    x: &Var<'g, T>,
    blk: &TransformerXBlock,
) -> Result<BlockPass<'g, T>> {
    let act = blk.activation;
    let normed = nn::rms_norm(sc, x, blk.norm_attn)?;
    let s = nn::attention(sc, &normed, &normed, &blk.self_attn, Mask::Causal)?;
    let a = x.add(&s)?;
    let (f, mut residual) = match blk.norm_branch {
        Some(norm) => {
            let normed = nn::rms_norm(sc, &a, norm)?;
            let hs = blk
                .branches
                .iter()
                .map(|br| branch_features(sc, &normed, &br.conv, br.act, act))
                .collect::<Result<Vec<_>>>()?;
            let (f, deltas) = fusion_steps(sc, &a, &hs, &blk.branches, act)?;
            let mut r = s;
            for d in &deltas {
                r = r.add(d)?;
            }
            (f, r)
        }
        None => (a, s),
    };
    let m = nn::ffn(sc, &nn::rms_norm(sc, &f, blk.norm_ffn)?, &blk.ffn, act)?;
    residual = residual.add(&m)?;
    Ok(BlockPass {
        out: f.add(&m)?,
        residual,
    })
}

/// Full block output: attention, convolution fusion and FFN, each residual.
pub fn block_forward<'g, T: Scalar>(
    sc: Scope<'g, T>,
    x: &Var<'g, T>,
    blk: &TransformerXBlock,
) -> Result<Var<'g, T>> {
    block_pass(sc, x, blk).map(|p| p.out)
}

/// The block's transformation with its identity path removed, i.e. the sum
/// of all residual increments. Dense skip stacks add their own weighted
/// identity paths on top of this.
pub fn block_residual<'g, T: Scalar>(
    sc: Scope<'g, T>,
    x: &Var<'g, T>,
    blk: &TransformerXBlock,
) -> Result<Var<'g, T>> {
    block_pass(sc, x, blk).map(|p| p.residual)
}
