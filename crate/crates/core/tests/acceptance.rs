//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Set `TFX_SKIP_DESK=1` to skip the hour-scale desk training
//! (criterion 7 then reports SKIP and criterion 9 trains a small model).

mod common;

use std::time::Instant;

use common::{
    causality_violation, conv_oracle, pattern_corpus, rand_tensor, small_model, small_train,
    text_corpus,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfx::harness::ablate::{ablate, AblationGrid};
use tfx::harness::data::unigram_entropy_bits;
use tfx::harness::{checkpoint, evaluate, MetricsSink, TrainConfig, Trainer};
use tfx::ldrscm::{normalized_alphas, AlphaBank, ResidualStrategy};
use tfx::mtpim::{draft_verify_decode, required_len};
use tfx::nn::{Activation, Scope};
use tfx::suite::{perturb, random_tokens, run_suite, suite_config};
use tfx::transformerx::{block_forward, ds_conv_1d, DsConvParams};
use tfx::{Graph, LanguageModel, ModelConfig, ParamStore};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut model = LanguageModel::<f64>::new(suite_config()).map_err(|e| e.to_string())?;
    perturb(&mut model, 1);
    let r = run_suite(&mut model, 8, 2, None, 7).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = r
        .modules
        .iter()
        .map(|(m, e)| format!("{m}={e:.1e}"))
        .collect::<Vec<_>>()
        .join(" ");
    check(
        r.report.max_rel_err < 1e-5 && secs < 120.0,
        format!("max {:.2e} in {secs:.1}s [{worst}]", r.report.max_rel_err),
    )
}

fn c2_alpha_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=32);
        let mut s = ParamStore::<f32>::new();
        let bank = AlphaBank::init(&mut s, n).map_err(|e| e.to_string())?;
        for v in s.value_mut(bank.logits[n - 1]).data_mut() {
            *v = rng.random_range(-50.0..=50.0);
        }
        let w = normalized_alphas(&s, &bank, n - 1).map_err(|e| e.to_string())?;
        worst = worst.max((w.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs());
    }
    let mut s = ParamStore::<f32>::new();
    let bank = AlphaBank::init(&mut s, 32).map_err(|e| e.to_string())?;
    let uniform = (0..32).all(|l| {
        normalized_alphas(&s, &bank, l)
            .map(|w| w.iter().all(|&x| x == 1.0 / (l + 1) as f32))
            .unwrap_or(false)
    });
    check(
        worst < 1e-6 && uniform,
        format!("max |sum - 1| {worst:.1e} (single), zero logits uniform: {uniform}"),
    )
}

fn logits_of(model: &LanguageModel<f64>, tokens: &tfx::nn::TokenIds) -> tfx::Tensor<f64> {
    let g = Graph::new();
    (*model.logits(model.scope(&g), tokens).unwrap().value()).clone()
}

fn c3_reductions() -> Outcome {
    let tokens = random_tokens(17, 2, 8, 3);
    let mk = |cfg: ModelConfig| LanguageModel::<f64>::new(cfg).unwrap();

    // (a) one layer: every skip strategy is Layer(H) + H
    let mut reference = mk(ModelConfig {
        n_layers: 1,
        ..suite_config()
    });
    perturb(&mut reference, 4);
    let outs: Vec<_> = ResidualStrategy::ALL
        .iter()
        .map(|&r| {
            let mut m = mk(ModelConfig {
                n_layers: 1,
                residual: r,
                ..suite_config()
            });
            let ids: Vec<_> = m.store.ids().collect();
            for id in ids {
                if let Some(src) = reference.store.id(&m.store.get(id).name) {
                    *m.store.value_mut(id) = reference.store.value(src).clone();
                }
            }
            logits_of(&m, &tokens)
        })
        .collect();
    let a = outs[0]
        .max_abs_diff(&outs[1])
        .max(outs[0].max_abs_diff(&outs[2]));

    // (b) eswish with beta = 1 against plain swish
    let e = logits_of(&mk(suite_config()), &tokens);
    let s = logits_of(
        &mk(ModelConfig {
            activation: Activation::Swish,
            ..suite_config()
        }),
        &tokens,
    );
    let b = e.max_abs_diff(&s);

    // (c) lambda = 0 leaves the main cross-entropy
    let m = mk(ModelConfig {
        lambda_mpt: 0.0,
        ..suite_config()
    });
    let rows = random_tokens(17, 2, required_len(8, 2), 5);
    let g = Graph::new();
    let parts = m.loss(m.scope(&g), &rows, 8).unwrap();
    let plain = m
        .logits(m.scope(&g), &rows.window(0, 8).unwrap())
        .unwrap()
        .cross_entropy(rows.window(1, 8).unwrap().ids())
        .unwrap();
    let c = (parts.total.item() - plain.item()).abs();

    // (d) a block whose weights are all zero is the identity
    let mut z = mk(suite_config());
    let ids: Vec<_> = z
        .store
        .ids()
        .filter(|&id| z.store.get(id).name.starts_with("layer0."))
        .collect();
    for id in ids {
        z.store.value_mut(id).data_mut().fill(0.0);
    }
    let x = rand_tensor(&[2, 8, 16], 6, 1.0);
    let g = Graph::new();
    let y = block_forward(z.scope(&g), &g.constant(x.clone()), &z.stack.blocks[0])
        .unwrap()
        .value();
    let d = y.max_abs_diff(&x);

    check(
        a.max(b).max(c).max(d) < 1e-12,
        format!("depth-1 {a:.1e}, eswish(1) {b:.1e}, lambda=0 {c:.1e}, zero block {d:.1e}"),
    )
}

fn c4_causality() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let mut m = LanguageModel::<f64>::new(ModelConfig {
            n_layers: 2,
            d_model: 32,
            max_seq_len: 16,
            ..suite_config()
        })
        .map_err(|e| e.to_string())?;
        perturb(&mut m, seed);
        worst = worst.max(causality_violation(&m, 16, 1000 + seed));
    }
    check(
        worst < 1e-9,
        format!("50 seeds, max change {worst:.1e} (main head and both depths)"),
    )
}

fn c5_conv_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let (b, l, c, k) = (
            rng.random_range(1..4),
            rng.random_range(1..20),
            rng.random_range(1..9),
            rng.random_range(1..16),
        );
        let mut store = ParamStore::<f64>::new();
        let p = DsConvParams::init(&mut store, "c", k, c, 1.0, case).map_err(|e| e.to_string())?;
        let x = rand_tensor(&[b, l, c], case, 1.0);
        let expect = conv_oracle(&x, store.value(p.depthwise), store.value(p.pointwise));
        let g = Graph::new();
        let y = ds_conv_1d(Scope::new(&g, &store), &g.constant(x), &p)
            .map_err(|e| e.to_string())?
            .value();
        for (a, e) in y.data().iter().zip(&expect) {
            worst = worst.max((a - e).abs());
        }
    }
    check(worst < 1e-9, format!("200 cases, max diff {worst:.1e}"))
}

fn c6_step0(corpus: &tfx::harness::Corpus) -> Outcome {
    let cfg = ModelConfig::default();
    let expect = cfg.uniform_loss();
    let mut t = Trainer::new(
        LanguageModel::<f32>::new(cfg).map_err(|e| e.to_string())?,
        TrainConfig::desk(3000),
    )
    .map_err(|e| e.to_string())?;
    let row = t.train_step(&corpus.train).map_err(|e| e.to_string())?;
    let rel = (row.loss_total - expect).abs() / expect;
    check(
        rel < 0.05,
        format!(
            "loss {:.4} vs {expect:.4} ({:.2}% off)",
            row.loss_total,
            100.0 * rel
        ),
    )
}

fn c7_desk(corpus: &tfx::harness::Corpus) -> (Outcome, Option<LanguageModel<f32>>) {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut cfg = TrainConfig::desk(3000);
    cfg.shards = cores.min(4);
    let start = Instant::now();
    let run = || -> tfx::Result<(Trainer<f32>, f64)> {
        let mut t = Trainer::new(
            LanguageModel::<f32>::new(ModelConfig::default())?,
            cfg.clone(),
        )?;
        t.run(corpus, &mut MetricsSink::memory(), None)?;
        let held = evaluate(
            &t.model,
            &corpus.heldout,
            cfg.seq_len,
            usize::MAX,
            cfg.shards,
        )?;
        Ok((t, held.bits_per_byte))
    };
    let (t, bpb) = match run() {
        Ok(x) => x,
        Err(e) => return (Err(e.to_string()), None),
    };
    let mins = start.elapsed().as_secs_f64() / 60.0;
    let entropy = unigram_entropy_bits(&corpus.heldout);
    let timing = if cores >= 4 { mins < 30.0 } else { true };
    let note = if cores >= 4 {
        String::new()
    } else {
        format!(", runtime target is for 4 cores, this host has {cores}")
    };
    (
        check(
            bpb < entropy && timing,
            format!("held-out {bpb:.3} bits/byte vs unigram {entropy:.3}, {mins:.1} min{note}"),
        ),
        Some(t.model),
    )
}

fn c8_ablation(corpus: &tfx::harness::Corpus) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = small_model();
    let grid = AblationGrid::parse("full", &cfg).map_err(|e| e.to_string())?;
    let report = ablate::<f32>(&cfg, &small_train(4), &grid, corpus, Some(dir.path()))
        .map_err(|e| e.to_string())?;
    let files = report.cells.iter().all(|c| {
        dir.path().join(format!("{}.jsonl", c.cell)).exists()
            && dir
                .path()
                .join("csv")
                .join(format!("{}.csv", c.cell))
                .exists()
    });
    let summary = dir.path().join("summary.csv").exists() && dir.path().join("summary.md").exists();
    let mut pairs = 0;
    let mut equal = true;
    for ld in report
        .cells
        .iter()
        .filter(|c| c.cell.starts_with("learnable_dense"))
    {
        let twin = ld.cell.replacen("learnable_dense", "fixed_dense", 1);
        let fd = report
            .cells
            .iter()
            .find(|c| c.cell == twin)
            .ok_or("missing fixed-dense twin")?;
        equal &= ld.step0_loss.to_bits() == fd.step0_loss.to_bits();
        pairs += 1;
    }
    check(
        report.cells.len() == 12 && files && summary && equal && pairs == 4,
        format!(
            "{} cells, files {files}, summary {summary}, step-0 LD == FD in {pairs} pairs: {equal}",
            report.cells.len()
        ),
    )
}

fn c9_decode(corpus: &tfx::harness::Corpus, trained: Option<LanguageModel<f32>>) -> Outcome {
    let (model, which) = match trained {
        Some(m) => (m, "desk model"),
        None => {
            let mut t = Trainer::new(
                LanguageModel::<f32>::new(small_model()).map_err(|e| e.to_string())?,
                small_train(300),
            )
            .map_err(|e| e.to_string())?;
            t.run(corpus, &mut MetricsSink::memory(), None)
                .map_err(|e| e.to_string())?;
            (t.model, "small model")
        }
    };
    let held = &corpus.heldout;
    let (mut same, mut drafted, mut accepted) = (0, 0, 0);
    for p in 0..20 {
        let at = p * (held.len() - 64) / 20;
        let prompt = &held[at..at + 24];
        let spec = draft_verify_decode(&model, prompt, 32).map_err(|e| e.to_string())?;
        let greedy = model.greedy_decode(prompt, 32).map_err(|e| e.to_string())?;
        same += usize::from(spec.tokens == greedy);
        drafted += spec.drafted();
        accepted += spec.accepted();
    }
    let rate = accepted as f64 / drafted.max(1) as f64;
    check(
        same == 20,
        format!("{same}/20 identical ({which}), acceptance rate {rate:.3} ({accepted}/{drafted})"),
    )
}

fn c10_determinism() -> Outcome {
    let corpus = pattern_corpus(200);
    let go = || -> tfx::Result<(Trainer<f32>, Vec<tfx::harness::MetricsRow>)> {
        let mut sink = MetricsSink::memory();
        let t = tfx::harness::train(
            LanguageModel::<f32>::new(small_model())?,
            &corpus,
            small_train(8),
            &mut sink,
            None,
        )?;
        Ok((t, sink.into_rows()))
    };
    let (ta, a) = go().map_err(|e| e.to_string())?;
    let (_, b) = go().map_err(|e| e.to_string())?;
    let repeat = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.same_values(y));

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ck.bin");
    checkpoint::save(&path, &ta).map_err(|e| e.to_string())?;
    let back = checkpoint::load::<f32>(&path).map_err(|e| e.to_string())?;
    let bits = ta.model.store.iter().all(|(id, p)| {
        p.value
            .data()
            .iter()
            .zip(back.model.store.value(id).data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
    }) && ta
        .opt
        .m
        .iter()
        .zip(&back.opt.m)
        .all(|(x, y)| x.data() == y.data())
        && ta
            .opt
            .v
            .iter()
            .zip(&back.opt.v)
            .all(|(x, y)| x.data() == y.data())
        && back.step == ta.step;
    check(
        repeat && bits,
        format!("repeat run identical: {repeat}, checkpoint bit-identical: {bits}"),
    )
}

fn main() {
    let corpus = text_corpus();
    let skip_desk = std::env::var("TFX_SKIP_DESK").is_ok_and(|v| v == "1");
    let mut results: Vec<(u32, &str, Option<Outcome>)> = vec![
        (1, "gradient suite", Some(c1_gradients())),
        (
            2,
            "skip weight normalisation",
            Some(c2_alpha_normalization()),
        ),
        (3, "reduction identities", Some(c3_reductions())),
        (4, "causality", Some(c4_causality())),
        (5, "convolution oracle", Some(c5_conv_oracle())),
        (6, "step-0 loss", Some(c6_step0(&corpus))),
    ];
    let trained = if skip_desk {
        results.push((7, "desk training", None));
        None
    } else {
        let (o, m) = c7_desk(&corpus);
        results.push((7, "desk training", Some(o)));
        m
    };
    results.push((8, "ablation grid", Some(c8_ablation(&corpus))));
    results.push((9, "decode equivalence", Some(c9_decode(&corpus, trained))));
    results.push((10, "determinism and checkpoints", Some(c10_determinism())));

    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Some(Ok(d)) => println!("criterion {n:>2} {name}: PASS ({d})"),
            Some(Err(d)) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({d})");
            }
            None => println!("criterion {n:>2} {name}: SKIP (TFX_SKIP_DESK=1)"),
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
