#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfx::autodiff::{Graph, Var};
use tfx::harness::schedule::{BatchSchedule, LrSchedule};
use tfx::harness::{Corpus, TrainConfig};
use tfx::{ModelConfig, Result, Tensor};

pub fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Largest `|analytic - fd| / max(1, |fd|)` over every input entry of
/// `sum(f(inputs) * r)` for a fixed random `r`.
pub fn op_grad_err<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let loss = |vals: &[Tensor<f64>], grads: bool| -> (f64, Vec<Tensor<f64>>) {
        let g = Graph::new();
        let vars: Vec<_> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&g, &vars).unwrap();
        let r = g.constant(rand_tensor(&out.shape(), 99, 1.0));
        let l = out.mul(&r).unwrap().sum().unwrap();
        let v = l.item();
        if !grads {
            return (v, Vec::new());
        }
        let gr = g.backward(l).unwrap();
        (v, vars.iter().map(|x| gr.get(x)).collect())
    };
    let (_, analytic) = loss(inputs, true);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= eps;
            let fd = (loss(&plus, false).0 - loss(&minus, false).0) / (2.0 * eps);
            let a = analytic[i].data()[e];
            worst = worst.max((a - fd).abs() / fd.abs().max(1.0));
        }
    }
    worst
}

/// A model small enough to train for a few hundred steps inside a test.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 2,
        n_layers: 2,
        ffn_mult: 2,
        kernels: vec![3, 5],
        max_seq_len: 32,
        init_std: 0.02,
        ..ModelConfig::default()
    }
}

pub fn small_train(steps: u64) -> TrainConfig {
    TrainConfig {
        lr: LrSchedule::scaled(steps, 3e-3, 3e-4),
        batch: BatchSchedule::constant(8),
        seq_len: 32,
        total_steps: steps,
        eval_every: 0,
        eval_rows: 8,
        ..TrainConfig::desk(steps)
    }
}

/// A corpus of a 64-byte pattern repeated.
pub fn pattern_corpus(reps: usize) -> Corpus {
    let pattern: Vec<usize> = (0..64u32).map(|i| ((i * 37 + 11) % 251) as usize).collect();
    let ids: Vec<usize> = pattern.iter().copied().cycle().take(64 * reps).collect();
    Corpus::split(ids, 0.1).unwrap()
}

pub fn text_corpus() -> Corpus {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/moby_dick.txt");
    Corpus::from_file(&path, 0.1).unwrap()
}

/// Largest change in any logit that must not see a perturbed token:
/// main logits before position `p` and depth-`j` logits at `i` with
/// `i + j < p`, after replacing `tokens[p]`.
pub fn causality_violation(model: &tfx::LanguageModel<f64>, seq_len: usize, seed: u64) -> f64 {
    use tfx::model::ForwardOptions;
    use tfx::nn::TokenIds;
    let n = model.config.n_depths;
    let v = model.config.vocab;
    let total = tfx::mtpim::required_len(seq_len, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row: Vec<usize> = (0..total).map(|_| rng.random_range(0..v)).collect();
    let p = rng.random_range(1..total);
    let mut changed = row.clone();
    changed[p] = (row[p] + 1 + rng.random_range(0..v - 1)) % v;

    let run = |r: &[usize]| {
        let g = Graph::new();
        let (main, depths) = model
            .all_logits(
                model.scope(&g),
                &TokenIds::single(r),
                seq_len,
                ForwardOptions::default(),
            )
            .unwrap();
        let mut all = vec![(*main.value()).clone()];
        all.extend(depths.iter().map(|d| (*d.value()).clone()));
        all
    };
    let (a, b) = (run(&row), run(&changed));
    let mut worst = 0.0f64;
    // head 0 is the main head and sees tokens <= i; depth j sees tokens <= i + j
    for (j, (x, y)) in a.iter().zip(&b).enumerate() {
        for i in (0..seq_len).filter(|&i| i + j < p) {
            for c in 0..v {
                worst = worst.max((x.data()[i * v + c] - y.data()[i * v + c]).abs());
            }
        }
    }
    worst
}

/// Zero-padded causal depthwise convolution and pointwise mix, written
/// in lag form: `y[t, c] = sum_s w[k-1-s, c] * x[t-s, c]`, then `y @ P`.
#[allow(clippy::needless_range_loop)]
pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, p: &Tensor<f64>) -> Vec<f64> {
    let (b, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[0];
    let mut out = vec![0.0; b * l * c];
    for bi in 0..b {
        for t in 0..l {
            let mut y = vec![0.0; c];
            for s in 0..k {
                if s > t {
                    break;
                }
                for ch in 0..c {
                    y[ch] += w.at(&[k - 1 - s, ch]) * x.at(&[bi, t - s, ch]);
                }
            }
            for o in 0..c {
                out[(bi * l + t) * c + o] = (0..c).map(|i| y[i] * p.at(&[0, i, o])).sum();
            }
        }
    }
    out
}
