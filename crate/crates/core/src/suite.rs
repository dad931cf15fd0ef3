//! Finite-difference check of every parameter of a full model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::ldrscm::ResidualStrategy;
use crate::model::{LanguageModel, ModelConfig};
use crate::mtpim::required_len;
use crate::nn::{Activation, Scope, TokenIds};
use crate::scalar::Precision;

/// Small double-precision model that exercises every parameter class.
pub fn suite_config() -> ModelConfig {
    ModelConfig {
        vocab: 17,
        d_model: 16,
        n_heads: 2,
        n_layers: 3,
        ffn_mult: 2,
        kernels: vec![3, 5],
        activation: Activation::ESwish,
        residual: ResidualStrategy::LearnableDense,
        n_depths: 2,
        gammas: None,
        lambda_mpt: 0.3,
        max_seq_len: 8,
        tie_head: false,
        init_std: 0.2,
        precision: Precision::Double,
        seed: 11,
    }
}

/// Coarse module a parameter belongs to, from its name.
pub fn module_of(name: &str) -> &'static str {
    if name.starts_with("mtp") {
        "mtpim"
    } else if name.starts_with("alpha") {
        "ldrscm"
    } else if name.contains(".beta") {
        "eswish"
    } else if name.contains(".conv.") {
        "ds_conv"
    } else if name.contains(".xattn.") {
        "fusion_attention"
    } else if name.contains(".mlp.") {
        "fusion_mlp"
    } else if name.contains(".attn.") {
        "attention"
    } else if name.contains(".ffn.") {
        "ffn"
    } else if name.contains("norm") {
        "rms_norm"
    } else if name == "embed" || name == "pos" {
        "embedding"
    } else {
        "head"
    }
}

/// Moves skip logits, activation scalars and norm gains off their
/// initial values so the check does not sit on a symmetric point.
pub fn perturb(model: &mut LanguageModel<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.get(id).name.clone();
        let spread = match module_of(&name) {
            "ldrscm" => 0.5,
            "eswish" => 0.3,
            _ if name.contains("norm") => 0.1,
            _ => continue,
        };
        for x in model.store.value_mut(id).data_mut() {
            *x += spread * n.sample(&mut rng);
        }
    }
}

pub fn random_tokens(vocab: usize, batch: usize, len: usize, seed: u64) -> TokenIds {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..batch * len)
        .map(|_| rng.random_range(0..vocab))
        .collect();
    TokenIds::new(batch, len, ids).expect("sizes agree")
}

pub struct SuiteReport {
    pub report: GradCheckReport,
    /// Largest relative error per module.
    pub modules: BTreeMap<&'static str, f64>,
}

/// Checks the joint loss gradient of every parameter on random tokens.
/// `max_entries` caps the entries checked per tensor (`None` checks all).
pub fn run_suite(
    model: &mut LanguageModel<f64>,
    seq_len: usize,
    batch: usize,
    max_entries: Option<usize>,
    seed: u64,
) -> Result<SuiteReport> {
    let tokens = random_tokens(
        model.config.vocab,
        batch,
        required_len(seq_len, model.config.n_depths),
        seed,
    );
    let ids: Vec<_> = model.store.ids().collect();
    let shape = model.clone();
    let report = grad_check(&mut model.store, &ids, 1e-6, max_entries, |g, st| {
        Ok(shape.loss(Scope::new(g, st), &tokens, seq_len)?.total)
    })?;
    let mut modules = BTreeMap::new();
    for p in &report.params {
        let e = modules.entry(module_of(&p.name)).or_insert(0.0f64);
        *e = e.max(p.max_rel_err);
    }
    Ok(SuiteReport { report, modules })
}
