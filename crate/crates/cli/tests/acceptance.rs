//! Acceptance gate. Each test prints one `PASS` or `FAIL` line for its
//! criterion before asserting it.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tjepa::analysis::{
    embedding_variance, kendall_tau, kl_divergence, mean_pairwise, rank_by_variance, uniformity, PairwiseMetric,
};
use tjepa::data::{encode_rows, EncodedSample, FeatureKind, Split, UnseenTally};
use tjepa::downstream::{HeadSpec, ProbeResult};
use tjepa::masking::{check_feasible, sample_mask_set, share_count, ShareBounds};
use tjepa::model::{BindMode, Binder, Checkpoint, ModelConfig, ModelState};
use tjepa::numeric::nn::{transformer_block, BlockVars};
use tjepa::numeric::{
    grad_check, layer_norm, linear_forward, multi_head_self_attention, relative_error, AttentionVars, Graph, Tensor,
    Var,
};
use tjepa::training::{
    cosine_lr, ema_scalar, momentum_schedule, prepare, sample_loss, tjepa_loss, Gradients, LossNormalization,
    TrainConfig, Trainer, EPOCH_LOG,
};
use tjepa::Parallelism;
use tjepa_cli::commands::{
    arm_dir, checkpoint_path, fitted_dataset, load_features, load_labels, raw_splits, representation_splits, run_probe,
    AblationReport, ABLATION_REPORT,
};

fn verdict(name: &str, pass: bool, detail: impl AsRef<str>) {
    println!("{} {name}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    assert!(pass, "{name}: {}", detail.as_ref());
}

fn run(args: &[&str]) -> String {
    let mut argv = vec!["tjepa".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    tjepa_cli::run(&argv).unwrap_or_else(|e| panic!("{args:?}: {}", e.to_json_line()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

// ---------------------------------------------------------------- gradients

type Objective = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> tjepa::Result<Var>>;

fn probed(f: impl Fn(&mut Graph<f64>, &[Var]) -> tjepa::Result<Var> + 'static, seed: u64) -> Objective {
    Box::new(move |g, v| {
        let y = f(g, v)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = g.constant(rand_tensor(g.shape(y), &mut rng));
        let m = g.mul(y, c)?;
        Ok(g.sum(m))
    })
}

fn op_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, Objective)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[3, 4], &mut rng);
    let w = rand_tensor(&[4, 5], &mut rng);
    let r = rand_tensor(&[4], &mut rng);
    let kinkless = a.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
    let x = rand_tensor(&[5, 8], &mut rng);
    let mut attn = vec![x.clone()];
    for _ in 0..4 {
        attn.push(rand_tensor(&[8, 8], &mut rng).map(|v| v * 0.5));
        attn.push(rand_tensor(&[8], &mut rng).map(|v| v * 0.1));
    }
    let mut block = attn.clone();
    // ln1 gain/bias, ln2 gain/bias, ff1 weight/bias, ff2 weight/bias
    block.push(rand_tensor(&[8], &mut rng).map(|v| 1.0 + 0.2 * v));
    block.push(rand_tensor(&[8], &mut rng).map(|v| 0.1 * v));
    block.push(rand_tensor(&[8], &mut rng).map(|v| 1.0 + 0.2 * v));
    block.push(rand_tensor(&[8], &mut rng).map(|v| 0.1 * v));
    block.push(rand_tensor(&[8, 16], &mut rng).map(|v| 0.5 * v));
    block.push(rand_tensor(&[16], &mut rng).map(|v| 0.1 * v));
    block.push(rand_tensor(&[16, 8], &mut rng).map(|v| 0.5 * v));
    block.push(rand_tensor(&[8], &mut rng).map(|v| 0.1 * v));
    let av = |v: &[Var]| AttentionVars {
        wq: v[1],
        bq: v[2],
        wk: v[3],
        bk: v[4],
        wv: v[5],
        bv: v[6],
        wo: v[7],
        bo: v[8],
    };
    let two = vec![a.clone(), b.clone()];
    vec![
        ("matmul", vec![a.clone(), w], probed(|g, v| g.matmul(v[0], v[1]), 10)),
        ("transpose", vec![a.clone()], probed(|g, v| g.transpose(v[0]), 11)),
        ("add", two.clone(), probed(|g, v| g.add(v[0], v[1]), 12)),
        ("sub", two.clone(), probed(|g, v| g.sub(v[0], v[1]), 13)),
        ("mul", two.clone(), probed(|g, v| g.mul(v[0], v[1]), 14)),
        ("add_row", vec![a.clone(), r.clone()], probed(|g, v| g.add_row(v[0], v[1]), 15)),
        ("mul_row", vec![a.clone(), r], probed(|g, v| g.mul_row(v[0], v[1]), 16)),
        ("scale", vec![a.clone()], probed(|g, v| Ok(g.scale(v[0], -1.7)), 17)),
        ("gelu", vec![a.clone()], probed(|g, v| Ok(g.gelu(v[0])), 18)),
        ("relu", vec![kinkless], probed(|g, v| Ok(g.relu(v[0])), 19)),
        ("softmax_rows", vec![a.clone()], probed(|g, v| Ok(g.softmax_rows(v[0])), 20)),
        ("normalize_rows", vec![a.clone()], probed(|g, v| Ok(g.normalize_rows(v[0], 1e-5)), 21)),
        (
            "gather",
            vec![a.clone()],
            probed(|g, v| g.gather(v[0], &[Some(3), None, Some(0), Some(3), Some(11), Some(7)], &[2, 3]), 22),
        ),
        ("select_rows", vec![a.clone()], probed(|g, v| g.select_rows(v[0], &[2, 0, 2]), 23)),
        ("slice_cols", vec![a.clone()], probed(|g, v| g.slice_cols(v[0], 1, 2), 24)),
        ("concat_rows", two.clone(), probed(|g, v| g.concat_rows(&[v[0], v[1]]), 25)),
        ("concat_cols", two, probed(|g, v| g.concat_cols(&[v[0], v[1]]), 26)),
        ("reshape", vec![a.clone()], probed(|g, v| g.reshape(v[0], &[6, 2]), 27)),
        ("sum", vec![a.clone()], Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        })),
        ("sum_sq", vec![a.clone()], Box::new(|g, v| Ok(g.sum_sq(v[0])))),
        ("row_mean", vec![a.clone()], probed(|g, v| Ok(g.row_mean(v[0])), 28)),
        ("row_max", vec![a.clone()], probed(|g, v| g.row_max(v[0]), 29)),
        (
            "window_max",
            vec![a.clone()],
            probed(|g, v| g.window_max(v[0], &[vec![0, 1, 4, 5], vec![2, 3], vec![11]], &[3]), 30),
        ),
        ("softmax_cross_entropy", vec![a], Box::new(|g, v| g.softmax_cross_entropy(v[0], &[1, 3, 0]))),
        (
            "linear",
            vec![x.clone(), rand_tensor(&[8, 3], &mut rng), rand_tensor(&[3], &mut rng)],
            probed(|g, v| linear_forward(g, v[0], v[1], v[2]), 40),
        ),
        (
            "layer_norm",
            vec![x, rand_tensor(&[8], &mut rng), rand_tensor(&[8], &mut rng)],
            probed(|g, v| layer_norm(g, v[0], v[1], v[2], 1e-5), 41),
        ),
        ("attention", attn, probed(move |g, v| multi_head_self_attention(g, v[0], &av(v), 2), 42)),
        (
            "transformer_block",
            block,
            probed(
                move |g, v| {
                    let bv = BlockVars {
                        ln1_g: v[9],
                        ln1_b: v[10],
                        attn: av(v),
                        ln2_g: v[11],
                        ln2_b: v[12],
                        ff1_w: v[13],
                        ff1_b: v[14],
                        ff2_w: v[15],
                        ff2_b: v[16],
                    };
                    transformer_block(g, v[0], &bv, 2, 0.0, None)
                },
                43,
            ),
        ),
    ]
}

fn step_model() -> ModelState<f64> {
    let cfg = ModelConfig {
        cardinalities: vec![1, 1, 3, 1],
        kinds: vec![FeatureKind::Numerical, FeatureKind::Numerical, FeatureKind::Categorical, FeatureKind::Numerical],
        hidden: 8,
        num_heads: 2,
        num_layers: 1,
        feedforward: 16,
        dropout: 0.0,
        pred_hidden: 4,
        pred_num_heads: 2,
        pred_num_layers: 1,
        pred_feedforward: 16,
        pred_dropout: 0.0,
        n_reg: 1,
    };
    let mut state = ModelState::<f64>::new(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in state.store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
    }
    state
}

/// Training objective with the target representation frozen at `h_target`.
fn frozen_target_loss(
    state: &ModelState<f64>,
    sample: &EncodedSample<f64>,
    masks: &tjepa::masking::MaskSet,
    h_target: &Tensor<f64>,
) -> f64 {
    let mut g = Graph::no_grad();
    let mut b = Binder::new(&state.store);
    let (mut preds, mut targets) = (Vec::new(), Vec::new());
    for cm in &masks.context {
        let z = state.embed_sample(&mut g, &mut b, sample, Some(cm), BindMode::Train).unwrap();
        let h = state.context_forward(&mut g, &mut b, z, None).unwrap();
        let h = state.strip_reg(&mut g, h).unwrap();
        for tm in &masks.target {
            preds.push(state.predict_targets(&mut g, &mut b, h, tm, None).unwrap());
            targets.push(g.constant(tjepa::masking::apply_target_mask(h_target, tm).unwrap()));
        }
    }
    let l = tjepa_loss(&mut g, &preds, &targets, masks.context.len(), masks.target.len(), LossNormalization::Sum).unwrap();
    g.value(l).data()[0]
}

#[test]
fn gradient_correctness() {
    const STEP: f64 = 1e-5;
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    let cases = op_cases();
    let n_ops = cases.len();
    for (name, params, f) in cases {
        let r = grad_check(f, &params, STEP, 1e-4).unwrap();
        worst = worst.max(r.max_rel_err);
        if !r.passed {
            failed.push(name);
        }
    }

    let mut state = step_model();
    let sample = EncodedSample {
        features: vec![vec![0.7], vec![-1.2], vec![0.0, 1.0, 0.0], vec![0.3]],
    };
    let masks = sample_mask_set(4, 2, 2, ShareBounds::new(0.25, 0.5), ShareBounds::new(0.25, 0.5), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mut sl = sample_loss(&state, &sample, &masks, LossNormalization::Sum, None).unwrap();
    sl.graph.backward(sl.loss).unwrap();
    let mut grads = Gradients::new(state.store.len());
    grads.accumulate_graph(&sl.graph);
    let h_target = {
        let mut g = Graph::no_grad();
        let mut b = Binder::new(&state.store);
        let z = state.embed_sample(&mut g, &mut b, &sample, None, BindMode::Frozen).unwrap();
        let h = state.target_forward(&mut g, &mut b, z).unwrap();
        let h = state.strip_reg(&mut g, h).unwrap();
        g.value(h).clone()
    };
    let mut step_worst: f64 = 0.0;
    let mut coords = 0;
    for id in state.trainable_ids() {
        let n = state.store.get(id).numel();
        let analytic = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for k in 0..n {
            let orig = state.store.get(id).data()[k];
            state.store.get_mut(id).data_mut()[k] = orig + STEP;
            let up = frozen_target_loss(&state, &sample, &masks, &h_target);
            state.store.get_mut(id).data_mut()[k] = orig - STEP;
            let down = frozen_target_loss(&state, &sample, &masks, &h_target);
            state.store.get_mut(id).data_mut()[k] = orig;
            step_worst = step_worst.max(relative_error(analytic[k], (up - down) / (2.0 * STEP)));
            coords += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = failed.is_empty() && step_worst < 1e-4 && elapsed < Duration::from_secs(120);
    verdict(
        "gradient correctness",
        pass,
        format!(
            "{n_ops} ops max rel err {worst:.2e} (failed: {failed:?}); full step {coords} coords max rel err {step_worst:.2e}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- masking

#[test]
fn mask_law_suite() {
    let start = Instant::now();
    let mut meta = ChaCha8Rng::seed_from_u64(77);
    let mut drawn = 0;
    let mut violations = 0usize;
    let reg_state = {
        let mut cfg = step_model().config;
        cfg.n_reg = 2;
        ModelState::<f64>::new(cfg, 0).unwrap()
    };
    let reg = reg_state.store.get(reg_state.embedding.reg.unwrap()).clone();
    let reg_sample = EncodedSample {
        features: vec![vec![0.1], vec![0.2], vec![1.0, 0.0, 0.0], vec![0.4]],
    };
    while drawn < 10_000 {
        let d = meta.random_range(2..=32);
        let pick = |rng: &mut ChaCha8Rng| {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            ShareBounds::new(a.min(b), a.max(b))
        };
        let (ctx, tgt) = (pick(&mut meta), pick(&mut meta));
        if check_feasible(d, ctx, tgt).is_err() {
            continue;
        }
        let (nc, nt) = (meta.random_range(1..=3), meta.random_range(1..=4));
        let seed: u64 = meta.random();
        let ms = sample_mask_set(d, nc, nt, ctx, tgt, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        drawn += 1;
        if sample_mask_set(d, nc, nt, ctx, tgt, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap() != ms {
            violations += 1;
        }
        let (tlo, thi) = (share_count(tgt.min, d, d - 1), share_count(tgt.max, d, d - 1));
        for t in &ms.target {
            let k = t.visible_count();
            violations += usize::from(t.d() != d || k < tlo || k > thi);
        }
        let clo = share_count(ctx.min, d, d - 1);
        let chi = share_count(ctx.max, d, d - ms.target_pool().len());
        for c in &ms.context {
            let k = c.visible_count();
            violations += usize::from(c.d() != d || k < clo.min(chi) || k > chi || k == 0);
            for t in &ms.target {
                violations += usize::from(c.visible().iter().any(|j| !t.is_masked(*j)));
            }
        }
        if d == 4 && drawn % 10 == 0 {
            for m in ms.context.iter().chain(&ms.target) {
                let mut g = Graph::no_grad();
                let mut b = Binder::new(&reg_state.store);
                let z = reg_state.embed_sample(&mut g, &mut b, &reg_sample, Some(m), BindMode::Constant).unwrap();
                let l = m.visible_count();
                violations += usize::from(&g.value(z).data()[l * 8..] != reg.data());
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "mask laws",
        violations == 0 && elapsed < Duration::from_secs(60),
        format!("{drawn} mask sets, {violations} violations, {:.2}s", elapsed.as_secs_f64()),
    );
}

// ---------------------------------------------------------------- loss

fn loss_of(preds: &[Tensor<f64>], targets: &[Tensor<f64>], nc: usize, nt: usize) -> f64 {
    let mut g = Graph::no_grad();
    let p: Vec<Var> = preds.iter().map(|t| g.constant(t.clone())).collect();
    let t: Vec<Var> = targets.iter().map(|t| g.constant(t.clone())).collect();
    let l = tjepa_loss(&mut g, &p, &t, nc, nt, LossNormalization::Sum).unwrap();
    g.value(l).data()[0]
}

#[test]
fn loss_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&[2, 3], &mut rng);
    let identity = loss_of(std::slice::from_ref(&x), std::slice::from_ref(&x), 1, 1);
    let ones = loss_of(&[Tensor::ones(&[2, 3])], &[Tensor::zeros(&[2, 3])], 1, 1);

    let blocks: Vec<Tensor<f64>> = (0..8).map(|k| Tensor::full(&[1, 2], k as f64)).collect();
    let zeros = vec![Tensor::zeros(&[1, 2]); 8];
    let averaged = loss_of(&blocks, &zeros, 2, 4);
    let sum: f64 = (0..8).map(|k| 2.0 * (k * k) as f64).sum();
    let exact_div = averaged == sum / 8.0;

    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (nc, nt) = (rng.random_range(1..4), rng.random_range(1..5));
        let rows: Vec<usize> = (0..nt).map(|_| rng.random_range(1..4)).collect();
        let mut mk = || -> Vec<Tensor<f64>> {
            (0..nc * nt).map(|i| rand_tensor(&[rows[i % nt], 4], &mut rng)).collect()
        };
        let (p, t) = (mk(), mk());
        let mut cp: Vec<usize> = (0..nc).collect();
        let mut tp: Vec<usize> = (0..nt).collect();
        cp.shuffle(&mut rng);
        tp.shuffle(&mut rng);
        let re = |v: &[Tensor<f64>]| -> Vec<Tensor<f64>> {
            cp.iter().flat_map(|&c| tp.iter().map(move |&k| v[c * nt + k].clone())).collect()
        };
        worst = worst.max((loss_of(&p, &t, nc, nt) - loss_of(&re(&p), &re(&t), nc, nt)).abs());
    }
    let pass = identity == 0.0 && ones == 6.0 && exact_div && worst <= 1e-12;
    verdict(
        "loss algebra",
        pass,
        format!("identity {identity}, all-ones {ones}, 2x4 average {averaged} = {sum}/8: {exact_div}, reorder max diff {worst:.1e}"),
    );
}

// ---------------------------------------------------------------- EMA

fn synthetic_csv(dir: &Path, n: usize, d: usize, seed: u64) -> PathBuf {
    let p = dir.join(format!("syn_{n}_{d}_{seed}.csv"));
    run(&["make-synthetic", "--n", &n.to_string(), "--d", &d.to_string(), "--task", "cls", "--seed", &seed.to_string(), "--out", s(&p)]);
    p
}

#[test]
fn ema_stop_gradient_contract() {
    let dir = tempfile::tempdir().unwrap();
    let csv = synthetic_csv(dir.path(), 200, 5, 3);
    let cfg = TrainConfig {
        batch_size: 32,
        n_context: 2,
        n_target: 2,
        model_dim_hidden: 8,
        model_num_layers: 1,
        model_dim_feedforward: 16,
        pred_num_layers: 1,
        pred_embed_dim: 4,
        pred_num_heads: 1,
        mask_min_ctx_share: 0.2,
        mask_max_ctx_share: 0.5,
        mask_min_trgt_share: 0.2,
        mask_max_trgt_share: 0.4,
        ..TrainConfig::default()
    };
    let ds = load_features(&csv, &cfg).unwrap();
    let data = prepare::<f64>(&ds, &cfg).unwrap();
    let mut trainer = Trainer::<f64>::new(cfg, &data.schema, 20).unwrap();
    let pairs = trainer.state.ema_pairs();
    let (mut ulps, mut compared, mut leaked) = (0u64, 0usize, 0usize);
    for step in 0..8 {
        let batch: Vec<&EncodedSample<f64>> = data.train.iter().skip(step * 16).take(32).collect();
        let (_, grads) = trainer.batch_gradients(&batch).unwrap();
        leaked += pairs.iter().filter(|(t, _)| grads.get(*t).is_some()).count();
        let before: Vec<Vec<f64>> = pairs.iter().map(|&(t, _)| trainer.state.store.get(t).data().to_vec()).collect();
        let rec = trainer.train_step(&batch, 1).unwrap();
        for (k, &(t, c)) in pairs.iter().enumerate() {
            let ctx = trainer.state.store.get(c).data();
            for (i, got) in trainer.state.store.get(t).data().iter().enumerate() {
                let want = ema_scalar(before[k][i], ctx[i], rec.momentum);
                ulps = ulps.max(got.to_bits().abs_diff(want.to_bits()));
                compared += 1;
            }
        }
    }

    let state = &trainer.state;
    let mut g = Graph::new();
    let mut b = Binder::new(&state.store);
    let z = state.embed_sample(&mut g, &mut b, &data.train[0], None, BindMode::Train).unwrap();
    let h = state.target_forward(&mut g, &mut b, z).unwrap();
    let l = g.sum_sq(h);
    let contract = matches!(g.backward(l), Err(tjepa::Error::Contract(_)));

    verdict(
        "EMA / stop-gradient",
        ulps == 0 && leaked == 0 && contract && compared > 0,
        format!("8 steps, {compared} EMA coords replayed, max {ulps} ulps; {leaked} target gradients; target backward contract error: {contract}"),
    );
}

// ---------------------------------------------------------------- metrics

fn softmax(v: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = v.iter().map(|x| x.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

#[test]
fn metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = [0.0f64; 5];
    for _ in 0..100 {
        let n = rng.random_range(2..12);
        let w = rng.random_range(1..8);
        let e = rand_tensor(&[n, w], &mut rng);
        let t = rng.random_range(0.5..4.0);
        let (mut kl, mut dist, mut gauss, mut pairs) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let (p, q) = (softmax(e.row(i)), softmax(e.row(j)));
                kl += p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
                let sq: f64 = e.row(i).iter().zip(e.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                dist += sq.sqrt();
                gauss += (-t * sq).exp();
                pairs += 1.0;
            }
        }
        let seq = Parallelism::Sequential;
        worst[0] = worst[0].max(rel(mean_pairwise(PairwiseMetric::Kl, &e, 10_000, 0, seq).unwrap(), kl / pairs));
        worst[1] = worst[1].max(rel(mean_pairwise(PairwiseMetric::Euclidean, &e, 10_000, 0, seq).unwrap(), dist / pairs));
        worst[2] = worst[2].max(rel(uniformity(&e, t, 10_000, 0, seq).unwrap(), -(gauss / pairs).ln()));
        let var = embedding_variance(&e);
        for i in 0..n {
            let c: Vec<f64> = (0..w).map(|k| e.row(i)[k] - (0..n).map(|r| e.row(r)[k]).sum::<f64>() / n as f64).collect();
            let m = c.iter().sum::<f64>() / w as f64;
            worst[3] = worst[3].max(rel(var[i], c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / w as f64));
        }
        let k = rng.random_range(2..10);
        let (mut a, mut b): (Vec<usize>, Vec<usize>) = ((0..k).collect(), (0..k).collect());
        a.shuffle(&mut rng);
        b.shuffle(&mut rng);
        let mut score = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                score += ((a[i] as f64 - a[j] as f64) * (b[i] as f64 - b[j] as f64)).signum();
            }
        }
        let tau = score / (k * (k - 1) / 2) as f64;
        worst[4] = worst[4].max(rel(kendall_tau(&a, &b).unwrap().0, tau));
    }
    let two = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    let closed = [
        (kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs(),
        (uniformity(&two, 2.0, 10_000, 0, Parallelism::Sequential).unwrap() - 2.0).abs(),
        (kendall_tau(&[0, 1, 2, 3], &[3, 2, 1, 0]).unwrap().0 + 1.0).abs(),
    ];
    let pass = worst.iter().all(|&x| x < 1e-9) && closed.iter().all(|&x| x < 1e-9);
    verdict(
        "metric oracles",
        pass,
        format!(
            "100 instances, max rel err kl {:.1e} dist {:.1e} uniformity {:.1e} variance {:.1e} tau {:.1e}; closed-form errors {closed:?}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    );
}

// ---------------------------------------------------------------- schedules

#[test]
fn schedule_endpoints() {
    let mut ok = true;
    for total in [1u64, 7, 350, 10_000] {
        ok &= momentum_schedule(0, total, 0.996, 1.0) == 0.996;
        ok &= momentum_schedule(total, total, 0.996, 1.0) == 1.0;
        ok &= cosine_lr(total, total, 1e-3).abs() < 1e-18;
        ok &= cosine_lr(0, total, 1e-3) == 1e-3;
        for step in 0..total {
            ok &= momentum_schedule(step, total, 0.996, 1.0) <= momentum_schedule(step + 1, total, 0.996, 1.0);
            ok &= cosine_lr(step, total, 1e-3) >= cosine_lr(step + 1, total, 1e-3);
        }
    }
    verdict(
        "schedule endpoints",
        ok,
        format!(
            "momentum 0.996 -> {}, lr(T) = {:e}, monotone over every step of T in {{1, 7, 350, 10000}}",
            momentum_schedule(350, 350, 0.996, 1.0),
            cosine_lr(350, 350, 1e-3)
        ),
    );
}

// ---------------------------------------------------------------- smoke

fn write_config(path: &Path, v: &Value) -> PathBuf {
    std::fs::write(path, v.to_string()).unwrap();
    path.to_path_buf()
}

#[test]
fn end_to_end_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let csv = synthetic_csv(dir.path(), 2048, 8, 0);
    let cfg = write_config(
        &dir.path().join("smoke.json"),
        &serde_json::json!({
            "epochs": 50, "batch_size": 256, "model_dim_hidden": 16, "model_num_layers": 2,
            "n_reg_tokens": 1, "seed": 0, "exp_lr": 0.003, "checkpoint_every": 10
        }),
    );
    let mut times = Vec::new();
    for name in ["a", "b"] {
        let t = Instant::now();
        run(&["pretrain", "--config", s(&cfg), "--data", s(&csv), "--out", s(&dir.path().join(name))]);
        times.push(t.elapsed());
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let identical = [0, 10, 20, 30, 40, 50].iter().all(|&e| {
        let (ja, jb) = (checkpoint_path(&a, e), checkpoint_path(&b, e));
        std::fs::read(&ja).unwrap() == std::fs::read(&jb).unwrap()
            && std::fs::read(ja.with_extension("bin")).unwrap() == std::fs::read(jb.with_extension("bin")).unwrap()
    });
    let epochs: Vec<Value> = std::fs::read_to_string(a.join(EPOCH_LOG))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let steps: Vec<Value> = std::fs::read_to_string(a.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mut per_epoch = vec![(0.0, 0usize); 51];
    for r in &steps {
        let e = r["epoch"].as_u64().unwrap() as usize;
        per_epoch[e].0 += r["loss"].as_f64().unwrap();
        per_epoch[e].1 += 1;
    }
    let means: Vec<f64> = per_epoch[1..].iter().map(|(s, n)| s / *n as f64).collect();
    let final_loss = *means.last().unwrap();
    let max_loss = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let u0 = epochs[0]["uniformity"].as_f64().unwrap();
    let u_final = epochs.last().unwrap()["uniformity"].as_f64().unwrap();
    let slowest = times.iter().max().unwrap();
    let pass = *slowest < Duration::from_secs(600) && final_loss < max_loss && u_final > u0 && identical;
    verdict(
        "end-to-end smoke",
        pass,
        format!(
            "{:.0}s/{:.0}s per run; final loss {final_loss:.4} < max epoch loss {max_loss:.4}; uniformity {u0:.4} -> {u_final:.4}; checkpoints bit-identical: {identical}",
            times[0].as_secs_f64(),
            times[1].as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- 10-seed runs

const SEEDS: u64 = 10;
const RELEVANCE_EPOCHS: usize = 20;

struct SeedRun {
    tjepa: ProbeResult,
    raw: ProbeResult,
    /// Sum of the informative features' variance ranks (0 = most salient).
    rank_init: usize,
    rank_final: usize,
}

fn rank_sum(ckpt: &Checkpoint, samples: &[EncodedSample<f32>]) -> usize {
    let r = rank_by_variance(&ckpt.state, samples, Parallelism::Parallel).unwrap().ranks();
    r[0] + r[1]
}

fn seed_runs() -> &'static Vec<SeedRun> {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        (0..SEEDS)
            .map(|seed| {
                let csv = synthetic_csv(dir.path(), 1024, 8, seed);
                let out = dir.path().join(format!("run_{seed}"));
                let cfg_path = write_config(
                    &dir.path().join(format!("cfg_{seed}.json")),
                    &serde_json::json!({
                        "epochs": RELEVANCE_EPOCHS, "batch_size": 256, "exp_lr": 0.003, "seed": seed,
                        "checkpoint_every": RELEVANCE_EPOCHS
                    }),
                );
                run(&["pretrain", "--config", s(&cfg_path), "--data", s(&csv), "--out", s(&out)]);
                let cfg = tjepa_cli::load_config(&cfg_path).unwrap();
                let ds = load_features(&csv, &cfg).unwrap();
                let labels = load_labels(&csv, &cfg).unwrap();
                let init = Checkpoint::load(&checkpoint_path(&out, 0)).unwrap();
                let last = Checkpoint::load(&checkpoint_path(&out, RELEVANCE_EPOCHS)).unwrap();
                let spec = HeadSpec {
                    seed,
                    ..HeadSpec::default()
                };
                let tjepa = run_probe(&spec, &representation_splits(&last, &ds, &labels).unwrap()).unwrap();
                let raw = run_probe(&spec, &raw_splits(&ds, &labels, seed).unwrap()).unwrap();
                let (fitted, schema) = fitted_dataset(&ds, seed).unwrap();
                let rows = fitted.rows_in(Split::Train);
                let samples: Vec<EncodedSample<f32>> =
                    encode_rows(&fitted, &schema, &rows, &mut UnseenTally::default()).unwrap();
                SeedRun {
                    tjepa,
                    raw,
                    rank_init: rank_sum(&init, &samples),
                    rank_final: rank_sum(&last, &samples),
                }
            })
            .collect()
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn probe_non_inferiority() {
    let runs = seed_runs();
    let t: Vec<f64> = runs.iter().map(|r| r.tjepa.value).collect();
    let r: Vec<f64> = runs.iter().map(|r| r.raw.value).collect();
    let (mt, mr) = (median(t.clone()), median(r.clone()));
    verdict(
        "probe non-inferiority",
        mt >= mr,
        format!("median test accuracy T-JEPA {mt:.4} vs raw {mr:.4} over {SEEDS} seeds (T-JEPA {t:.3?}, raw {r:.3?})"),
    );
}

#[test]
fn feature_relevance_trend() {
    let runs = seed_runs();
    let improved = runs.iter().filter(|r| r.rank_final < r.rank_init).count();
    let trace: Vec<String> = runs.iter().map(|r| format!("{}->{}", r.rank_init, r.rank_final)).collect();
    verdict(
        "feature relevance trend",
        improved >= 7,
        format!("informative rank sum improved in {improved}/{SEEDS} seeds (need 7): {}", trace.join(" ")),
    );
}

// ---------------------------------------------------------------- ablation

#[test]
fn ablation_harness() {
    let dir = tempfile::tempdir().unwrap();
    let csv = synthetic_csv(dir.path(), 300, 6, 21);
    let cfg = write_config(
        &dir.path().join("abl.json"),
        &serde_json::json!({
            "epochs": 3, "batch_size": 64, "model_dim_hidden": 8, "model_num_layers": 1,
            "model_dim_feedforward": 16, "pred_num_layers": 1, "pred_embed_dim": 4, "pred_num_heads": 1,
            "metric_samples": 64
        }),
    );
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        run(&["ablate-reg", "--config", s(&cfg), "--data", s(&csv), "--tokens", "0,1", "--out", s(&out)]);
        let r: AblationReport = serde_json::from_slice(&std::fs::read(out.join(ABLATION_REPORT)).unwrap()).unwrap();
        reports.push((out, r));
    }
    let (out, r) = &reports[0];
    let aligned = r.arms.len() == 2
        && r.arms.iter().all(|a| a.epoch_loss.len() == 3 && a.step_loss.len() == r.arms[0].step_loss.len())
        && r.arms.iter().all(|a| a.final_uniformity.is_some_and(f64::is_finite));
    let arm_config = |k: usize| {
        let mut v: Value = serde_json::from_slice(&std::fs::read(arm_dir(out, k).join("config.json")).unwrap()).unwrap();
        let tokens = v.as_object_mut().unwrap().remove("n_reg_tokens");
        (tokens, v)
    };
    let ((k0, c0), (k1, c1)) = (arm_config(0), arm_config(1));
    let configs_differ_only_in_tokens = c0 == c1 && k0 == Some(Value::from(0)) && k1 == Some(Value::from(1));
    let (_, r2) = &reports[1];
    let reproducible = r.arms.iter().zip(&r2.arms).all(|(x, y)| {
        x.epoch_loss == y.epoch_loss && x.step_loss == y.step_loss && x.final_uniformity == y.final_uniformity
    });
    let summary: Vec<String> = r
        .arms
        .iter()
        .map(|a| format!("reg={} final loss {:.4} uniformity {:.4}", a.n_reg_tokens, a.epoch_loss.last().unwrap(), a.final_uniformity.unwrap()))
        .collect();
    verdict(
        "ablation harness",
        aligned && configs_differ_only_in_tokens && reproducible,
        format!(
            "aligned curves: {aligned}; arms differ only in n_reg_tokens: {configs_differ_only_in_tokens}; reproducible: {reproducible}; {}",
            summary.join(", ")
        ),
    );
}
