mod common;

use common::{conv_oracle, op_grad_err, rand_tensor};
use proptest::prelude::*;
use tfx::nn::{Scope, TokenIds};
use tfx::transformerx::{ds_conv_1d, DsConvParams};
use tfx::{Graph, ParamStore, Tensor};

const TOL: f64 = 1e-7;

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(24)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn broadcast_binary_grads(lead in 1usize..4, tail in prop::collection::vec(1usize..4, 1..3), seed in 0u64..1000, flip: bool) {
        let mut long = vec![lead];
        long.extend(&tail);
        let a = rand_tensor(&long, seed, 1.0);
        let b = rand_tensor(&tail, seed + 1, 1.0);
        let (x, y) = if flip { (b, a) } else { (a, b) };
        let err = op_grad_err(&[x, y], |_, v| v[0].mul(&v[1])?.add(&v[1])?.sub(&v[0]));
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn softmax_grads(shape in prop::collection::vec(1usize..5, 1..4), axis_pick in 0usize..3, seed in 0u64..1000) {
        let axis = axis_pick % shape.len();
        let x = rand_tensor(&shape, seed, 3.0);
        let err = op_grad_err(&[x], |_, v| v[0].softmax(axis));
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one(shape in prop::collection::vec(1usize..6, 1..4), axis_pick in 0usize..3, seed in 0u64..1000) {
        let axis = axis_pick % shape.len();
        let g = Graph::new();
        let y = g.constant(rand_tensor(&shape, seed, 40.0)).softmax(axis).unwrap();
        let s = y.sum_axis(axis).unwrap().value();
        for &v in s.data() {
            prop_assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rms_norm_grads(rows in 1usize..4, d in 1usize..6, seed in 0u64..1000) {
        let x = rand_tensor(&[rows, d], seed, 1.0);
        let gain = rand_tensor(&[d], seed + 7, 1.0);
        let err = op_grad_err(&[x, gain], |_, v| v[0].rms_norm(&v[1], 1e-6));
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn matmul_grads(batch in 1usize..3, m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in 0u64..1000, nt: bool) {
        let a = rand_tensor(&[batch, m, k], seed, 1.0);
        let b = if nt { rand_tensor(&[n, k], seed + 3, 1.0) } else { rand_tensor(&[k, n], seed + 3, 1.0) };
        let err = op_grad_err(&[a, b], |_, v| if nt { v[0].matmul_nt(&v[1]) } else { v[0].matmul(&v[1]) });
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn permute_grads(shape in prop::collection::vec(1usize..4, 2..5), perm_seed in 0u64..1000) {
        let mut axes: Vec<usize> = (0..shape.len()).collect();
        // Fisher-Yates driven by the seed
        let mut s = perm_seed;
        for i in (1..axes.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            axes.swap(i, (s >> 33) as usize % (i + 1));
        }
        let x = rand_tensor(&shape, perm_seed, 1.0);
        let err = op_grad_err(&[x], |_, v| v[0].permute(&axes));
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn eswish_grads(n in 1usize..8, beta in -2.0f64..2.0, seed in 0u64..1000) {
        let x = rand_tensor(&[n], seed, 3.0);
        let b = Tensor::from_f64(&[1], &[beta]).unwrap();
        let err = op_grad_err(&[x, b], |_, v| v[0].eswish(v[1]));
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn cross_entropy_grads(rows in 1usize..4, v in 2usize..6, seed in 0u64..1000) {
        let z = rand_tensor(&[rows, v], seed, 2.0);
        let targets: Vec<usize> = (0..rows).map(|r| (r * 7 + seed as usize) % v).collect();
        let err = op_grad_err(&[z], |_, x| x[0].cross_entropy(&targets));
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn structural_grads(n in 1usize..4, d in 1usize..4, seed in 0u64..1000) {
        let a = rand_tensor(&[n, d], seed, 1.0);
        let b = rand_tensor(&[n, d], seed + 1, 1.0);
        let w = rand_tensor(&[2], seed + 2, 1.0);
        let err = op_grad_err(&[a, b, w], |g, v| {
            let cat = g.concat(&[v[0], v[1]], 1)?;
            let mixed = g.weighted_sum(&[v[0], v[1]], v[2])?;
            cat.slice(1, d / 2, d)?.add(&mixed)?.sum_axis(0)
        });
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn conv_grads(b in 1usize..3, l in 1usize..6, c in 1usize..4, k in 1usize..5, seed in 0u64..1000) {
        let x = rand_tensor(&[b, l, c], seed, 1.0);
        let w = rand_tensor(&[k, c], seed + 5, 1.0);
        let err = op_grad_err(&[x, w], |_, v| v[0].causal_depthwise_conv(&v[1]));
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn ds_conv_matches_oracle(b in 1usize..3, l in 1usize..9, c in 1usize..5, k in 1usize..8, seed in 0u64..1000) {
        let mut store = ParamStore::<f64>::new();
        let p = DsConvParams::init(&mut store, "c", k, c, 1.0, seed).unwrap();
        let x = rand_tensor(&[b, l, c], seed, 1.0);
        let expect = conv_oracle(&x, store.value(p.depthwise), store.value(p.pointwise));
        let g = Graph::new();
        let y = ds_conv_1d(Scope::new(&g, &store), &g.constant(x), &p).unwrap().value();
        for (a, e) in y.data().iter().zip(&expect) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_grads(vocab in 1usize..5, d in 1usize..4, n in 1usize..6, seed in 0u64..1000) {
        let table = rand_tensor(&[vocab, d], seed, 1.0);
        let ids: Vec<usize> = (0..n).map(|i| (i * 3 + seed as usize) % vocab).collect();
        let tokens = TokenIds::new(1, n, ids).unwrap();
        let err = op_grad_err(&[table], |_, v| tfx::nn::embed(&v[0], &tokens));
        prop_assert!(err < TOL, "err {err}");
    }
}

#[test]
fn non_finite_outputs_are_rejected() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(&[2], &[800.0, 1.0]).unwrap(), true);
    assert!(matches!(x.exp(), Err(tfx::Error::NonFinite { .. })));
    let z = g.leaf(Tensor::from_f64(&[1], &[0.0]).unwrap(), true);
    assert!(matches!(z.log(), Err(tfx::Error::NonFinite { .. })));
}
