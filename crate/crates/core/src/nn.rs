//! Shared neural building blocks: activations, RMSNorm, multi-head
//! attention, the position-wise FFN, token embedding and cross-entropy.
//!
//! Linear maps carry no bias. Every block function takes a [`Scope`], which
//! binds stored parameters into the graph being built.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// RMSNorm epsilon.
pub const NORM_EPS: f64 = 1e-6;

/// A graph under construction together with the parameters it reads.
#[derive(Clone, Copy)]
pub struct Scope<'g, T: Scalar> {
    pub graph: &'g Graph<T>,
    pub store: &'g ParamStore<T>,
}

impl<'g, T: Scalar> Scope<'g, T> {
    pub fn new(graph: &'g Graph<T>, store: &'g ParamStore<T>) -> Self {
        Scope { graph, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        self.graph.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'g, T> {
        self.graph.constant(t)
    }
}

/// Row-major `[batch, len]` token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenIds {
    ids: Vec<usize>,
    batch: usize,
    len: usize,
}

impl TokenIds {
    pub fn new(batch: usize, len: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != batch * len {
            return Err(Error::shape("token ids", &[batch, len], &[ids.len()]));
        }
        Ok(TokenIds { ids, batch, len })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::contract("token rows have different lengths"));
        }
        Ok(TokenIds {
            ids: rows.concat(),
            batch: rows.len(),
            len,
        })
    }

    pub fn single(row: &[usize]) -> Self {
        TokenIds {
            ids: row.to_vec(),
            batch: 1,
            len: row.len(),
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    /// Columns `start .. start + len` of every row.
    pub fn window(&self, start: usize, len: usize) -> Result<TokenIds> {
        if start + len > self.len {
            return Err(Error::Index {
                what: "token window end",
                index: start + len,
                len: self.len,
            });
        }
        let ids = (0..self.batch)
            .flat_map(|b| self.row(b)[start..start + len].iter().copied())
            .collect();
        Ok(TokenIds {
            ids,
            batch: self.batch,
            len,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `x * sigmoid(x)`, the FFN's adaptive parameter stays frozen at 1.
    Swish,
    /// `x * sigmoid(beta * x)` with a learned scalar `beta`.
    ESwish,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Swish => "swish",
            Activation::ESwish => "eswish",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "swish" => Some(Activation::Swish),
            "eswish" => Some(Activation::ESwish),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    /// Query `p` attends keys `<= p`; requires equal query and key lengths.
    Causal,
    None,
}

/// One learnable activation scalar, initialised to 1.
#[derive(Debug, Clone, Copy)]
pub struct ESwishParam {
    pub beta: ParamId,
}

impl ESwishParam {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str) -> Result<Self> {
        Ok(ESwishParam {
            beta: store.add(name, Tensor::ones(&[1]))?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub n_heads: usize,
    pub d_model: usize,
}

impl AttentionParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        let mut mat =
            |n: &str| store.add_normal(&format!("{prefix}.{n}"), &[d_model, d_model], std, seed);
        Ok(AttentionParams {
            w_q: mat("wq")?,
            w_k: mat("wk")?,
            w_v: mat("wv")?,
            w_o: mat("wo")?,
            n_heads,
            d_model,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn num_scalars(&self) -> usize {
        4 * self.d_model * self.d_model
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub w_in: ParamId,
    pub w_out: ParamId,
    pub eswish: ESwishParam,
    pub mult: usize,
}

impl FfnParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        mult: usize,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        if mult == 0 {
            return Err(Error::Config("ffn_mult must be positive".into()));
        }
        let hidden = mult * d_model;
        Ok(FfnParams {
            w_in: store.add_normal(&format!("{prefix}.w_in"), &[d_model, hidden], std, seed)?,
            w_out: store.add_normal(&format!("{prefix}.w_out"), &[hidden, d_model], std, seed)?,
            eswish: ESwishParam::init(store, &format!("{prefix}.beta"))?,
            mult,
        })
    }

    pub fn num_scalars(d_model: usize, mult: usize) -> usize {
        2 * mult * d_model * d_model + 1
    }
}

pub fn swish<'g, T: Scalar>(x: &Var<'g, T>) -> Result<Var<'g, T>> {
    x.swish()
}

pub fn eswish<'g, T: Scalar>(
    sc: Scope<'g, T>,
    x: &Var<'g, T>,
    p: ESwishParam,
) -> Result<Var<'g, T>> {
    x.eswish(sc.p(p.beta))
}

pub fn activate<'g, T: Scalar>(
    sc: Scope<'g, T>,
    x: &Var<'g, T>,
    p: ESwishParam,
    act: Activation,
) -> Result<Var<'g, T>> {
    match act {
        Activation::ESwish => eswish(sc, x, p),
        Activation::Swish => swish(x),
    }
}

pub fn rms_norm<'g, T: Scalar>(
    sc: Scope<'g, T>,
    x: &Var<'g, T>,
    gain: ParamId,
) -> Result<Var<'g, T>> {
    x.rms_norm(&sc.p(gain), T::of(NORM_EPS))
}

/// `[len, len]` additive mask: 0 on and below the diagonal, a large negative above.
pub fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[len, len]);
    for q in 0..len {
        for k in q + 1..len {
            m.set(&[q, k], T::mask_fill());
        }
    }
    m
}

fn split_heads<'g, T: Scalar>(x: &Var<'g, T>, heads: usize) -> Result<Var<'g, T>> {
    let s = x.shape();
    let (b, l, d) = (s[0], s[1], s[2]);
    x.reshape(&[b, l, heads, d / heads])?.permute(&[0, 2, 1, 3])
}

/// Multi-head scaled dot-product attention; returns the output and the
/// `[B, heads, Lq, Lk]` attention weights.
pub fn attention_with_weights<'g, T: Scalar>(
    sc: Scope<'g, T>,
    q_in: &Var<'g, T>,
    kv_in: &Var<'g, T>,
    p: &AttentionParams,
    mask: Mask,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let (qs, ks) = (q_in.shape(), kv_in.shape());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != p.d_model || ks[2] != p.d_model
    {
        return Err(Error::shape("attention", &qs, &ks));
    }
    let (b, lq, lk) = (qs[0], qs[1], ks[1]);
    if lq == 0 || lk == 0 {
        return Err(Error::contract(
            "attention needs at least one query and one key",
        ));
    }
    if mask == Mask::Causal && lq != lk {
        return Err(Error::contract(format!(
            "causal attention needs equal query and key lengths, got {lq} and {lk}"
        )));
    }
    let h = p.n_heads;
    let scale = T::one() / T::of(p.head_dim() as f64).sqrt();
    // scaling the queries is cheaper than scaling the score matrix
    let q = split_heads(&q_in.matmul(&sc.p(p.w_q))?.scale(scale)?, h)?;
    let k = split_heads(&kv_in.matmul(&sc.p(p.w_k))?, h)?;
    let v = split_heads(&kv_in.matmul(&sc.p(p.w_v))?, h)?;
    let mut scores = q.matmul_nt(&k)?;
    if mask == Mask::Causal {
        scores = scores.add(&sc.constant(causal_mask(lq)))?;
    }
    let weights = scores.softmax(3)?;
    let ctx = weights
        .matmul(&v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, lq, p.d_model])?;
    Ok((ctx.matmul(&sc.p(p.w_o))?, weights))
}

/// `Softmax(Q K^T / sqrt(d_k)) V` followed by the output projection.
/// Self-attention is the call with `kv_in == q_in`.
pub fn attention<'g, T: Scalar>(
    sc: Scope<'g, T>,
    q_in: &Var<'g, T>,
    kv_in: &Var<'g, T>,
    p: &AttentionParams,
    mask: Mask,
) -> Result<Var<'g, T>> {
    attention_with_weights(sc, q_in, kv_in, p, mask).map(|(out, _)| out)
}

/// `w_out * act(w_in * x)`.
pub fn ffn<'g, T: Scalar>(
    sc: Scope<'g, T>,
    x: &Var<'g, T>,
    p: &FfnParams,
    act: Activation,
) -> Result<Var<'g, T>> {
    let hidden = x.matmul(&sc.p(p.w_in))?;
    activate(sc, &hidden, p.eswish, act)?.matmul(&sc.p(p.w_out))
}

pub fn embed<'g, T: Scalar>(table: &Var<'g, T>, tokens: &TokenIds) -> Result<Var<'g, T>> {
    table.embedding(tokens.ids(), &[tokens.batch(), tokens.len()])
}

/// Mean next-token loss of `[B, L, V]` logits.
pub fn cross_entropy<'g, T: Scalar>(logits: &Var<'g, T>, targets: &TokenIds) -> Result<Var<'g, T>> {
    logits.cross_entropy(targets.ids())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::params::normal_tensor;

    fn store_with_attention(
        d: usize,
        heads: usize,
        std: f64,
    ) -> (ParamStore<f64>, AttentionParams) {
        let mut s = ParamStore::new();
        let p = AttentionParams::init(&mut s, "att", d, heads, std, 3).unwrap();
        (s, p)
    }

    #[test]
    fn swish_examples() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2], &[0.0, 2.0]).unwrap());
        let y = swish(&x).unwrap().value();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 1.761_594_155_955_764_9).abs() < 1e-12);
    }

    #[test]
    fn eswish_reductions() {
        let mut s = ParamStore::<f64>::new();
        let p = ESwishParam::init(&mut s, "b").unwrap();
        let xs = normal_tensor::<f64>(&[50], 3.0, 1);
        let g = Graph::new();
        let sc = Scope::new(&g, &s);
        let x = g.constant(xs.clone());
        // beta = 1 is exactly swish
        assert_eq!(
            eswish(sc, &x, p).unwrap().value().data(),
            swish(&x).unwrap().value().data()
        );
        // beta = 0 halves
        let zero = g.constant(Tensor::zeros(&[1]));
        let half = x.eswish(zero).unwrap().value();
        for (h, v) in half.data().iter().zip(xs.data()) {
            assert_eq!(*h, v / 2.0);
        }
        let zeros = g.constant(Tensor::zeros(&[3]));
        assert!(zeros
            .eswish(g.constant(Tensor::scalar(-4.0)))
            .unwrap()
            .value()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn eswish_beta_gradient_matches_fd() {
        let mut s = ParamStore::<f64>::new();
        let p = ESwishParam::init(&mut s, "b").unwrap();
        let r = grad_check(&mut s, &[p.beta], 1e-6, None, |g, st| {
            let sc = Scope::new(g, st);
            let x = g.constant(Tensor::scalar(1.0));
            eswish(sc, &x, p)?.sum()
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn rms_norm_properties() {
        let mut s = ParamStore::<f64>::new();
        let gain = s.add("g", Tensor::ones(&[6])).unwrap();
        let g = Graph::new();
        let sc = Scope::new(&g, &s);
        let ones = g.constant(Tensor::ones(&[1, 6]));
        let y = rms_norm(sc, &ones, gain).unwrap().value();
        assert!(y.data().iter().all(|v| (v - 1.0).abs() < 1e-5));

        let xs = normal_tensor::<f64>(&[2, 6], 1.0, 9);
        let a = rms_norm(sc, &g.constant(xs.clone()), gain).unwrap().value();
        let b = rms_norm(sc, &g.constant(xs.map(|v| 37.5 * v)), gain)
            .unwrap()
            .value();
        assert!(a.max_abs_diff(&b) < 1e-5);
        // direct formula
        for r in 0..2 {
            let row = &xs.data()[r * 6..(r + 1) * 6];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / 6.0;
            for c in 0..6 {
                assert!((a.data()[r * 6 + c] - row[c] / (ms + 1e-6).sqrt()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_key_attention_is_value_path() {
        let (s, p) = store_with_attention(4, 2, 0.5);
        let g = Graph::new();
        let sc = Scope::new(&g, &s);
        let q = g.constant(normal_tensor(&[1, 3, 4], 1.0, 11));
        let kv = g.constant(normal_tensor(&[1, 1, 4], 1.0, 12));
        let out = attention(sc, &q, &kv, &p, Mask::None).unwrap();
        let direct = kv
            .matmul(&sc.p(p.w_v))
            .unwrap()
            .matmul(&sc.p(p.w_o))
            .unwrap()
            .value();
        let out = out.value();
        for l in 0..3 {
            for c in 0..4 {
                assert!((out.at(&[0, l, c]) - direct.at(&[0, 0, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_weights_are_exactly_zero_above_diagonal() {
        let (s, p) = store_with_attention(4, 2, 0.5);
        let g = Graph::new();
        let sc = Scope::new(&g, &s);
        let x = g.constant(normal_tensor(&[2, 5, 4], 1.0, 13));
        let (_, w) = attention_with_weights(sc, &x, &x, &p, Mask::Causal).unwrap();
        let w = w.value();
        for b in 0..2 {
            for h in 0..2 {
                for q in 0..5 {
                    let mut total = 0.0;
                    for k in 0..5 {
                        let v = w.at(&[b, h, q, k]);
                        if k > q {
                            assert_eq!(v, 0.0);
                        }
                        total += v;
                    }
                    assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn causal_mask_requires_equal_lengths() {
        let (s, p) = store_with_attention(4, 1, 0.5);
        let g = Graph::new();
        let sc = Scope::new(&g, &s);
        let q = g.constant(Tensor::zeros(&[1, 3, 4]));
        let kv = g.constant(Tensor::zeros(&[1, 2, 4]));
        assert!(matches!(
            attention(sc, &q, &kv, &p, Mask::Causal),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn two_by_two_hand_computation() {
        // single head, identity projections: out = softmax(x x^T / sqrt(2)) x
        let mut s = ParamStore::<f64>::new();
        let eye = |s: &mut ParamStore<f64>, n: &str| s.add(n, Tensor::eye(2)).unwrap();
        let p = AttentionParams {
            w_q: eye(&mut s, "q"),
            w_k: eye(&mut s, "k"),
            w_v: eye(&mut s, "v"),
            w_o: eye(&mut s, "o"),
            n_heads: 1,
            d_model: 2,
        };
        let x = [[1.0, 0.0], [0.5, 2.0]];
        let g = Graph::new();
        let sc = Scope::new(&g, &s);
        let xv = g.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 0.0, 0.5, 2.0]).unwrap());
        let out = attention(sc, &xv, &xv, &p, Mask::None).unwrap().value();
        for q in 0..2 {
            let scores: Vec<f64> = (0..2)
                .map(|k| (x[q][0] * x[k][0] + x[q][1] * x[k][1]) / 2f64.sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for c in 0..2 {
                let expect: f64 = (0..2).map(|k| scores[k].exp() / z * x[k][c]).sum();
                assert!((out.at(&[0, q, c]) - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ffn_reductions_and_beta_gradient() {
        let mut s = ParamStore::<f64>::new();
        let p = FfnParams::init(&mut s, "ffn", 4, 2, 0.5, 5).unwrap();
        let g = Graph::new();
        let sc = Scope::new(&g, &s);
        let zero = g.constant(Tensor::zeros(&[1, 2, 4]));
        assert!(ffn(sc, &zero, &p, Activation::ESwish)
            .unwrap()
            .value()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let x = g.constant(normal_tensor(&[1, 3, 4], 1.0, 6));
        assert_eq!(
            ffn(sc, &x, &p, Activation::ESwish).unwrap().value().data(),
            ffn(sc, &x, &p, Activation::Swish).unwrap().value().data()
        );
        drop(g);
        let xs = normal_tensor::<f64>(&[1, 3, 4], 1.0, 6);
        let ids: Vec<_> = s.ids().collect();
        let r = grad_check(&mut s, &ids, 1e-6, None, |g, st| {
            let sc = Scope::new(g, st);
            ffn(sc, &g.constant(xs.clone()), &p, Activation::ESwish)?.sum()
        })
        .unwrap();
        assert!(
            r.max_for("beta").unwrap() < 1e-5 && r.max_rel_err < 1e-5,
            "{r:?}"
        );
    }

    #[test]
    fn embedding_gathers_and_accumulates() {
        let mut s = ParamStore::<f64>::new();
        let table = s.add("emb", normal_tensor(&[5, 3], 1.0, 2)).unwrap();
        let g = Graph::new();
        let sc = Scope::new(&g, &s);
        let t = sc.p(table);
        let tokens = TokenIds::new(1, 4, vec![2, 0, 2, 4]).unwrap();
        let e = embed(&t, &tokens).unwrap();
        let tv = s.value(table);
        for (p, &id) in tokens.ids().iter().enumerate() {
            for c in 0..3 {
                assert_eq!(e.value().at(&[0, p, c]), tv.at(&[id, c]));
            }
        }
        let w = g.constant(normal_tensor(&[1, 4, 3], 1.0, 3));
        let loss = e.mul(&w).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        let gt = grads.param(table).unwrap();
        for c in 0..3 {
            let expect = w.value().at(&[0, 0, c]) + w.value().at(&[0, 2, c]);
            assert!((gt.at(&[2, c]) - expect).abs() < 1e-15);
            assert_eq!(gt.at(&[1, c]), 0.0);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let g = Graph::<f64>::new();
        let v = 7;
        let uniform = g.constant(Tensor::zeros(&[2, 3, v]));
        let targets = TokenIds::new(2, 3, vec![0, 1, 6, 3, 3, 2]).unwrap();
        let l = cross_entropy(&uniform, &targets).unwrap().item();
        assert!((l - (v as f64).ln()).abs() < 1e-12);

        let mut sharp = Tensor::<f64>::zeros(&[1, 1, v]);
        sharp.set(&[0, 0, 4], 1e4);
        let l = cross_entropy(&g.constant(sharp), &TokenIds::single(&[4]))
            .unwrap()
            .item();
        assert!(l < 1e-3);

        let z = normal_tensor::<f64>(&[2, 3, v], 2.0, 4);
        let l = cross_entropy(&g.constant(z.clone()), &targets)
            .unwrap()
            .item();
        let mut naive = 0.0;
        for r in 0..6 {
            let row = &z.data()[r * v..(r + 1) * v];
            let denom: f64 = row.iter().map(|x| x.exp()).sum();
            naive -= (row[targets.ids()[r]].exp() / denom).ln();
        }
        assert!((l - naive / 6.0).abs() < 1e-8);

        let bad = TokenIds::single(&[9]);
        let err = cross_entropy(&g.constant(Tensor::zeros(&[1, 1, v])), &bad).unwrap_err();
        assert!(matches!(err, Error::Vocab { id: 9, .. }));
    }
}
