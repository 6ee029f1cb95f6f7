//! Checks shared by the integration tests and the acceptance harness. Each
//! returns `Ok(detail)` on success and `Err(detail)` on failure.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use apn::apn::{apn_forward, auxiliary_losses, route, ApnConfig, ApnParams, RoutingDecision};
use apn::checkpoint::{self, Checkpoint};
use apn::continual::{build_update_mask, overlap_score, rule_needs_grad, UpdateRule};
use apn::data::{ingest_file, CharVocab, DomainSplit};
use apn::model::{forward, lm_loss, param_counts, FfnKind, ForwardOptions, ModelConfig, ModelState, Role, Trainable};
use apn::monitor::{conditional_loss_decomposition, usage_entropy};
use apn::optim::{optimizer_step, AdamWConfig, OptimizerState};
use apn::tensor::{grad_check, GradCheckConfig, Tensor};
use apn::train::{evaluate_ppl, rng_for, EvalSpec};
use rand::seq::index::sample;
use rand::Rng;

pub type Check = Result<String, String>;

pub fn corpus_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/shakespeare.txt")
}

pub fn corpus() -> (CharVocab, DomainSplit) {
    ingest_file(&corpus_path(), 0.1).expect("corpus")
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_apn")
}

pub fn ensure(ok: bool, pass: String, fail: String) -> Check {
    if ok {
        Ok(pass)
    } else {
        Err(fail)
    }
}

/// The small configuration used by the gradient and locality checks.
pub fn grad_config() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        vocab_size: 11,
        context: 5,
        dropout: 0.0,
        ffn: FfnKind::Apn,
        ffn_ratio: 4,
        apn: ApnConfig {
            patches: 6,
            active: 2,
            code_dim: 3,
            temperature: 0.5,
            // the balance term has a straight-through gradient, which finite
            // differences of the hard usage counts cannot see
            balance_weight: 0.0,
            entropy_weight: 0.05,
            residual_scale_trainable: true,
            ..Default::default()
        },
    }
}

/// Fills the decoders with noise so every path carries gradient.
pub fn randomize_decoders(s: &mut ModelState<f64>, seed: u64) {
    let mut r = rng_for(seed, 99);
    for p in &mut s.params {
        if p.role == Role::ApnDecoders {
            p.value.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        }
    }
}

pub fn check_gradients() -> Check {
    let c = grad_config();
    let mut s = ModelState::<f64>::init(&c, &mut rng_for(4, 0)).map_err(|e| e.to_string())?;
    randomize_decoders(&mut s, 4);
    let x = [1, 4, 2, 8, 5, 7, 3, 0, 10, 6];
    let y = [4, 2, 8, 5, 7, 3, 0, 10, 6, 9];
    let base: Vec<Tensor<f64>> = s.params.iter().map(|p| p.value.clone()).collect();
    let template = s.clone();
    let report = grad_check(&base, &GradCheckConfig::default(), |ps| {
        let mut st = template.clone();
        for (p, v) in st.params.iter_mut().zip(ps) {
            p.value = v.clone();
        }
        let f = forward(&st, &x, Some(&y), 2, ForwardOptions { trainable: Trainable::All, ..ForwardOptions::eval() })?;
        let loss = f.loss.expect("targets");
        let grads = f.graph.backward(loss)?;
        Ok((f.loss_value().expect("targets"), f.params.iter().map(|v| grads.get(*v).expect("leaf").to_vec()).collect()))
    })
    .map_err(|e| e.to_string())?;
    let worst = report.worst().expect("coordinates checked");
    let name = &s.params[worst.param].name;
    ensure(
        report.passed && report.max_rel_error < 1e-4,
        format!("{} coords over {} tensors, max rel err {:.2e} ({name})", report.checks.len(), s.params.len(), report.max_rel_error),
        format!("max rel err {:.2e} at {name}[{}]: analytic {:e} numeric {:e}", report.max_rel_error, worst.coord, worst.analytic, worst.numeric),
    )
}

/// State with two APN layers and an input batch whose routing leaves some
/// patch unused in every layer.
pub fn locality_setup() -> (ModelState<f64>, Vec<usize>, Vec<usize>, usize) {
    let c = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        vocab_size: 11,
        context: 6,
        dropout: 0.0,
        ffn: FfnKind::Apn,
        ffn_ratio: 4,
        apn: ApnConfig {
            patches: 8,
            active: 2,
            code_dim: 4,
            ..Default::default()
        },
    };
    let mut s = ModelState::<f64>::init(&c, &mut rng_for(2, 0)).expect("init");
    randomize_decoders(&mut s, 2);
    let mut r = rng_for(2, 5);
    loop {
        let x: Vec<usize> = (0..6).map(|_| r.random_range(0..11)).collect();
        let y: Vec<usize> = (0..6).map(|_| r.random_range(0..11)).collect();
        let f = forward(&s, &x, Some(&y), 2, ForwardOptions::eval()).expect("forward");
        let unions: Vec<Vec<bool>> = f.decisions().iter().map(|d| d.active_union()).collect();
        if let Some(j) = (0..8).find(|&j| unions.iter().all(|u| !u[j])) {
            return (s, x, y, j);
        }
    }
}

fn patch_rows(s: &ModelState<f64>, role: Role, layer: usize, patch: usize) -> Vec<u64> {
    let t = s.get(role, Some(layer)).expect("apn tensor");
    let w = t.len() / t.shape()[0];
    t.data()[patch * w..(patch + 1) * w].iter().map(|v| v.to_bits()).collect()
}

pub fn check_locality() -> Check {
    let (s, x, y, j) = locality_setup();
    let mut after = s.clone();
    let needs = rule_needs_grad(UpdateRule::PatchLocal, &s);
    let f = forward(&s, &x, Some(&y), 2, ForwardOptions { trainable: Trainable::Mask(&needs), ..ForwardOptions::eval() })
        .map_err(|e| e.to_string())?;
    let mask = build_update_mask(UpdateRule::PatchLocal, &s, &f.decisions());
    let mut g = f.graph.backward(f.loss.expect("targets")).map_err(|e| e.to_string())?;
    let grads: Vec<_> = f.params.iter().map(|v| g.take(*v)).collect();
    let mut opt = OptimizerState::<f64>::new(AdamWConfig::default(), &s);
    optimizer_step(&mut opt, &mut after, &grads, 1e-2, &mask).map_err(|e| e.to_string())?;

    let mut problems = Vec::new();
    for l in 0..2 {
        for role in [Role::ApnDecoders, Role::ApnGateSlope, Role::ApnGateOffset] {
            if patch_rows(&s, role, l, j) != patch_rows(&after, role, l, j) {
                problems.push(format!("{role:?} of patch {j} in layer {l} changed"));
            }
        }
    }
    let mut frozen = 0;
    for (p, q) in s.params.iter().zip(&after.params) {
        if !p.role.is_apn() {
            frozen += 1;
            if p.value.data().iter().zip(q.value.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                problems.push(format!("{} changed", p.name));
            }
        }
    }
    let moved = s
        .params
        .iter()
        .zip(&after.params)
        .filter(|(p, q)| p.role == Role::ApnDecoders && p.value != q.value)
        .count();
    if moved == 0 {
        problems.push("no decoder moved at all".into());
    }
    ensure(
        problems.is_empty(),
        format!("patch {j} absent from the batch: U/a/b bitwise unchanged in both layers; {frozen} non-APN tensors bitwise unchanged"),
        problems.join("; "),
    )
}

pub fn check_identity() -> Check {
    let c = grad_config().apn;
    let d = 8;
    let mut r = rng_for(3, 0);
    let h = Tensor::<f64>::from_fn(&[10, d], |_| r.random_range(-2.0..2.0));
    let mut p = ApnParams::<f64>::init(d, &c, &mut rng_for(3, 1));
    p.gate_offset.data_mut().iter_mut().for_each(|v| *v = 0.3);
    let zero_dec = apn_forward(&h, &p, &c, false, &mut rng_for(0, 0)).map_err(|e| e.to_string())?;
    p.decoders.data_mut().iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    p.residual_scale = 0.0;
    let zero_gamma = apn_forward(&h, &p, &c, false, &mut rng_for(0, 0)).map_err(|e| e.to_string())?;
    let bitwise = |y: &Tensor<f64>| y.data().iter().zip(h.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let mc = grad_config();
    let apn_state = ModelState::<f64>::init(&mc, &mut rng_for(3, 2)).map_err(|e| e.to_string())?;
    let params = apn_state.params.iter().filter(|q| !q.role.is_apn()).cloned().collect();
    let none_state = ModelState::from_params(ModelConfig { ffn: FfnKind::None, ..mc }, params, 0);
    let x = [1, 4, 2, 8, 5, 7, 3, 0, 10, 6];
    let y = [4, 2, 8, 5, 7, 3, 0, 10, 6, 9];
    let a = lm_loss(&apn_state, &x, &y, 2).map_err(|e| e.to_string())?;
    let b = lm_loss(&none_state, &x, &y, 2).map_err(|e| e.to_string())?;
    ensure(
        bitwise(&zero_dec.y) && bitwise(&zero_gamma.y) && (a - b).abs() < 1e-10,
        format!("zero decoders and gamma=0 are bitwise identities; loss gap to deleted sublayer {:.1e}", (a - b).abs()),
        format!(
            "zero-decoder identity {}, zero-gamma identity {}, loss gap {:.3e}",
            bitwise(&zero_dec.y),
            bitwise(&zero_gamma.y),
            (a - b).abs()
        ),
    )
}

/// Distance from `v` to the span of `cols` (modified Gram-Schmidt).
pub fn span_residual(cols: &[Vec<f64>], v: &[f64]) -> f64 {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in cols {
        let mut w = c.clone();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            basis.push(w.iter().map(|x| x / n).collect());
        }
    }
    let mut rres = v.to_vec();
    for _ in 0..2 {
        for b in &basis {
            let dot: f64 = rres.iter().zip(b).map(|(x, y)| x * y).sum();
            rres.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
    }
    rres.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Decoder columns of the given patches, each a `d`-vector.
pub fn decoder_columns(p: &ApnParams<f64>, patches: &[usize]) -> Vec<Vec<f64>> {
    let (d, r) = (p.decoders.shape()[1], p.decoders.shape()[2]);
    let u = p.decoders.data();
    patches
        .iter()
        .flat_map(|&i| (0..r).map(move |c| (0..d).map(|row| u[i * d * r + row * r + c]).collect()))
        .collect()
}

pub fn check_span() -> Check {
    let (d, tokens) = (32, 1000);
    let c = ApnConfig {
        patches: 8,
        active: 2,
        code_dim: 3,
        temperature: 0.3,
        ..Default::default()
    };
    let mut r = rng_for(6, 0);
    let mut p = ApnParams::<f64>::init(d, &c, &mut rng_for(6, 1));
    p.decoders.data_mut().iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    p.gate_offset.data_mut().iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    let h = Tensor::<f64>::from_fn(&[tokens, d], |_| r.random_range(-1.0..1.0));
    let out = apn_forward(&h, &p, &c, false, &mut rng_for(0, 0)).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut control = f64::INFINITY;
    for t in 0..tokens {
        let cols = decoder_columns(&p, out.decision.active(t));
        let delta = out.delta.row(t);
        let scale = delta.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
        worst = worst.max(span_residual(&cols, delta) / scale);
        if t < 50 {
            // a random direction must not lie in a 6-dim subspace of R^32
            let probe: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            control = control.min(span_residual(&cols, &probe));
        }
    }
    ensure(
        worst < 1e-8 && control > 1e-2,
        format!("{tokens} tokens: max residual off span(U_K) {worst:.1e} (rank <= kr = 6 of d = 32); control residual {control:.2}"),
        format!("max residual {worst:.3e}, control {control:.3e}"),
    )
}

pub fn check_routing() -> Check {
    let (d, tokens) = (16, 200);
    let c = ApnConfig {
        patches: 10,
        active: 3,
        code_dim: 4,
        temperature: 0.2,
        ..Default::default()
    };
    let p = ApnParams::<f64>::init(d, &c, &mut rng_for(7, 0));
    let mut r = rng_for(7, 1);
    let z = Tensor::<f64>::from_fn(&[tokens, d], |_| r.random_range(-1.0..1.0));
    let base = route(&z, &p, &c).map_err(|e| e.to_string())?;
    let mut simplex = 0.0f64;
    for t in 0..tokens {
        let w = base.token_weights(t);
        simplex = simplex.max((w.iter().sum::<f64>() - 1.0).abs());
        if w.iter().any(|&x| x < 0.0) {
            return Err(format!("negative weight at token {t}"));
        }
    }
    let mut scale_gap = 0.0f64;
    for lambda in [1e-3, 0.5, 3.0, 1e3] {
        let zs = Tensor::<f64>::from_fn(&[tokens, d], |i| z.data()[i] * lambda);
        let other = route(&zs, &p, &c).map_err(|e| e.to_string())?;
        if other.indices != base.indices {
            return Err(format!("active sets change under z -> {lambda} z"));
        }
        for (a, b) in base.weights.iter().zip(&other.weights) {
            scale_gap = scale_gap.max((a - b).abs());
        }
    }
    // crafted ties: all prototypes identical -> lowest indices win, equal weights
    let mut tied = p.clone();
    tied.prototypes = Tensor::from_fn(&[10, d], |i| ((i % d) as f64 + 1.0).sin());
    let dt = route(&z, &tied, &c).map_err(|e| e.to_string())?;
    let ties_ok = (0..tokens).all(|t| dt.active(t) == [0, 1, 2] && dt.token_weights(t).iter().all(|&w| w == 1.0 / 3.0));
    let again = route(&z, &tied, &c).map_err(|e| e.to_string())?;
    ensure(
        simplex < 1e-12 && scale_gap < 1e-12 && ties_ok && again == dt,
        format!("simplex dev {simplex:.1e}; scale invariance: identical indices, weight gap {scale_gap:.1e}; ties -> lowest indices"),
        format!("simplex dev {simplex:.3e}, scale gap {scale_gap:.3e}, ties ok {ties_ok}"),
    )
}

pub fn decision(indices: Vec<usize>, k: usize, patches: usize) -> RoutingDecision {
    let tokens = indices.len() / k;
    RoutingDecision {
        tokens,
        patches,
        k,
        weights: vec![1.0 / k as f64; indices.len()],
        indices,
        scores: vec![0.0; tokens * patches],
        confidence: vec![0.0; tokens],
    }
}

/// Active sets drawn uniformly among the `k`-subsets of `0..patches`.
pub fn uniform_decision(tokens: usize, patches: usize, k: usize, seed: u64) -> RoutingDecision {
    let mut r = rng_for(seed, 11);
    let indices = (0..tokens).flat_map(|_| sample(&mut r, patches, k).into_vec()).collect();
    decision(indices, k, patches)
}

pub fn check_aux_losses() -> Check {
    let c = ApnConfig {
        patches: 4,
        active: 1,
        code_dim: 2,
        ..Default::default()
    };
    let uniform = decision(vec![0, 1, 2, 3, 3, 2, 1, 0], 1, 4);
    let (bal_u, _) = auxiliary_losses(&[uniform], &c).map_err(|e| e.to_string())?;
    let collapsed = decision(vec![2; 10], 1, 4);
    let (bal_c, _) = auxiliary_losses(&[collapsed], &c).map_err(|e| e.to_string())?;
    let mut h_range = (f64::INFINITY, f64::NEG_INFINITY);
    for seed in 0..20 {
        let k = 1 + seed as usize % 3;
        let d = uniform_decision(1 + seed as usize * 7, 8, k, seed);
        let (_, h) = usage_entropy(&[&d]).map_err(|e| e.to_string())?;
        h_range = (h_range.0.min(h), h_range.1.max(h));
    }
    let collapse_h = usage_entropy(&[&decision(vec![5; 4], 1, 8)]).map_err(|e| e.to_string())?.1;
    let ok = bal_u == 0.0 && (bal_c - 0.75).abs() < 1e-12 && h_range.0 >= -1e-9 && h_range.1 <= 8f64.ln() + 1e-9 && collapse_h.abs() < 1e-9;
    ensure(
        ok,
        format!("L_bal uniform = {bal_u}, collapse(K=4) = {bal_c:.15}; H(q) in [{:.3}, {:.3}] within [0, ln 8]", h_range.0, h_range.1),
        format!("L_bal uniform {bal_u:e}, collapse {bal_c:.15}, H range {h_range:?}"),
    )
}

pub fn check_overlap() -> Check {
    let (pairs, k, patches) = (100_000, 2, 8);
    let a = uniform_decision(4000, patches, k, 1);
    let b = uniform_decision(4000, patches, k, 2);
    let raw = overlap_score(&a, &b, false, pairs, &mut rng_for(3, 0)).map_err(|e| e.to_string())?;
    let norm = overlap_score(&a, &b, true, pairs, &mut rng_for(3, 0)).map_err(|e| e.to_string())?;
    let expected = (k * k) as f64 / patches as f64;
    let sigma = raw.std / (pairs as f64).sqrt();
    let z = (raw.mean - expected).abs() / sigma;
    let bounded = (0.0..=1.0).contains(&norm.mean) && norm.histogram.len() == k + 1;
    let self_overlap = overlap_score(&a, &a.clone(), true, 1000, &mut rng_for(3, 1)).map_err(|e| e.to_string())?;
    ensure(
        z < 3.0 && bounded && self_overlap.mean <= 1.0,
        format!("mean |K_A∩K_B| = {:.4} vs k^2/K = {expected} ({z:.2} sigma); normalized {:.4}", raw.mean, norm.mean),
        format!("mean {:.4} vs {expected}: {z:.2} sigma; normalized {:.4}", raw.mean, norm.mean),
    )
}

pub fn check_decomposition() -> Check {
    let (vocab, a) = corpus();
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        vocab_size: vocab.len(),
        context: 32,
        dropout: 0.0,
        ffn: FfnKind::Apn,
        ffn_ratio: 4,
        apn: ApnConfig {
            patches: 8,
            active: 2,
            code_dim: 4,
            ..Default::default()
        },
    };
    let mut s = ModelState::<f64>::init(&cfg, &mut rng_for(8, 0)).map_err(|e| e.to_string())?;
    randomize_decoders(&mut s, 8);
    let spec = EvalSpec {
        batches: 4,
        batch_size: 8,
        context: 32,
        seed: 3,
    };
    let mut worst = 0.0f64;
    for layer in 0..2 {
        let d = conditional_loss_decomposition(&s, &a.val, &spec, layer).map_err(|e| e.to_string())?;
        worst = worst.max((d.reconstructed() - d.overall).abs());
    }
    let eval = apn::train::evaluate_loss(&s, &a.val, &spec).map_err(|e| e.to_string())?;
    let d0 = conditional_loss_decomposition(&s, &a.val, &spec, 0).map_err(|e| e.to_string())?;
    ensure(
        worst < 1e-9 && (d0.overall - eval).abs() < 1e-9,
        format!("sum_i Pr[I=i] E[l|I=i] - E[l] = {worst:.1e} on {} tokens", d0.counts.iter().sum::<usize>()),
        format!("identity gap {worst:.3e}; overall {} vs eval {}", d0.overall, eval),
    )
}

/// The reduced architecture the desk-scale runs use.
pub fn reduced_model(vocab: usize, ffn: FfnKind) -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        n_heads: 4,
        d_model: 128,
        vocab_size: vocab,
        context: 128,
        dropout: 0.2,
        ffn,
        ffn_ratio: 4,
        apn: ApnConfig {
            patches: 64,
            active: 4,
            code_dim: 16,
            ..Default::default()
        },
    }
}

pub fn check_param_formula() -> Check {
    let cfg = reduced_model(64, FfnKind::Apn);
    let s = ModelState::<f32>::init(&cfg, &mut rng_for(0, 0)).map_err(|e| e.to_string())?;
    let (k, d, r) = (cfg.apn.patches, cfg.d_model, cfg.apn.code_dim);
    let per_layer = k * d + d * r + k * d * r + 2 * k * r;
    let counts = param_counts(&s);
    let mut mismatches = Vec::new();
    for l in 0..cfg.n_layers {
        let n: usize = [Role::ApnPrototypes, Role::ApnCode, Role::ApnDecoders, Role::ApnGateSlope, Role::ApnGateOffset]
            .iter()
            .map(|&role| s.get(role, Some(l)).map_or(0, |t| t.len()))
            .sum();
        if n != per_layer {
            mismatches.push(format!("layer {l}: {n} != {per_layer}"));
        }
    }
    ensure(
        mismatches.is_empty() && counts.apn_core == cfg.n_layers * per_layer,
        format!("Kd + dr + Kdr + 2Kr = {per_layer} per layer, {} total APN core of {} params", counts.apn_core, counts.total),
        format!("{mismatches:?}; apn_core {} vs {}", counts.apn_core, cfg.n_layers * per_layer),
    )
}

/// Seconds-scale configuration file for exercising the binary.
pub fn smoke_config(out: &Path) -> String {
    format!(
        r#"out = "{}"
[data]
corpus = "{}"
[model]
n_layers = 1
n_heads = 2
d_model = 16
context = 16
dropout = 0.1
ffn = "apn"
[model.apn]
patches = 8
active = 2
code_dim = 4
[train]
max_iters = 12
batch_size = 4
context = 16
warmup_iters = 2
eval_interval = 6
eval_batches = 2
[adapt]
iters = 6
batch_size = 4
context = 16
[protocol]
domain_b_tokens = 20000
eval_batches = 2
eval_batch_size = 4
overlap_pairs = 500
[monitor]
overlap_pairs = 500
"#,
        out.display(),
        corpus_path().display()
    )
}

pub fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(bin()).args(args).output().expect("spawn apn binary")
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

pub fn check_bench_table(dir: &Path) -> Check {
    let cfg = dir.join("bench.toml");
    std::fs::write(&cfg, smoke_config(&dir.join("bench"))).map_err(|e| e.to_string())?;
    let out = run_cli(&["bench", "--config", cfg.to_str().unwrap()]);
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let csv = String::from_utf8(read(&dir.join("bench/bench.csv"))?).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let totals_ok = rows.len() == 2 && rows[0][0] == "dense" && rows[1][0] == "apn" && rows.iter().all(|r| r[1].parse::<usize>().is_ok());
    let formula_ok = rows.get(1).is_some_and(|r| r[3] == r[4] && r[3] == (8 * 16 + 16 * 4 + 8 * 16 * 4 + 2 * 8 * 4).to_string());
    ensure(
        totals_ok && formula_ok,
        format!("bench totals dense {} / apn {}", rows[0][1], rows[1][1]),
        format!("bench table malformed:\n{csv}"),
    )
}

pub fn check_reproducible(dir: &Path) -> Check {
    let mut problems = Vec::new();
    let cfg = dir.join("run.toml");
    let work = dir.join("run");
    std::fs::write(&cfg, smoke_config(&work)).map_err(|e| e.to_string())?;
    for run in ["a", "b"] {
        for cmd in ["train", "protocol"] {
            let out_dir = work.join(cmd);
            let out = run_cli(&["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), cmd]);
            if !out.status.success() {
                return Err(format!("{cmd}: {}", String::from_utf8_lossy(&out.stderr)));
            }
        }
        let ck = work.join("train/best.ckpt");
        let out = run_cli(&[
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            work.join("eval").to_str().unwrap(),
            "--checkpoint",
            ck.to_str().unwrap(),
            "eval",
        ]);
        if !out.status.success() {
            return Err(format!("eval: {}", String::from_utf8_lossy(&out.stderr)));
        }
        std::fs::rename(&work, dir.join(run)).map_err(|e| e.to_string())?;
    }
    for f in ["train/config.toml", "train/train.log", "train/metrics.csv", "train/best.ckpt", "train/last.ckpt", "protocol/protocol.csv", "protocol/protocol.txt", "eval/eval.csv"] {
        if read(&dir.join("a").join(f))? != read(&dir.join("b").join(f))? {
            problems.push(format!("{f} differs between reruns"));
        }
    }
    // the evaluation of the reloaded best checkpoint reproduces the logged best exactly
    let log = String::from_utf8(read(&dir.join("a/train/train.log"))?).map_err(|e| e.to_string())?;
    let best = log
        .lines()
        .filter_map(|l| l.split_whitespace().find_map(|kv| kv.strip_prefix("val_ppl=")))
        .map(|v| v.parse::<f64>().unwrap())
        .fold(f64::INFINITY, f64::min);
    let eval = String::from_utf8(read(&dir.join("a/eval/eval.csv"))?).map_err(|e| e.to_string())?;
    let a_val: f64 = eval
        .lines()
        .find_map(|l| l.strip_prefix("a_val,"))
        .ok_or("no a_val row")?
        .parse()
        .map_err(|e| format!("{e}"))?;
    if a_val.to_bits() != best.to_bits() {
        problems.push(format!("reloaded eval {a_val:e} != logged best {best:e}"));
    }
    // library-level round trip in both precisions
    let (vocab, a) = corpus();
    let spec = EvalSpec {
        batches: 2,
        batch_size: 4,
        context: 16,
        seed: 1,
    };
    let mut cfg = grad_config();
    cfg.vocab_size = vocab.len();
    cfg.context = 16;
    for precision in [32, 64] {
        let path = dir.join(format!("rt{precision}.ckpt"));
        let (x, y) = if precision == 32 {
            let s = ModelState::<f32>::init(&cfg, &mut rng_for(1, 0)).map_err(|e| e.to_string())?;
            let ck = Checkpoint { state: s.clone(), vocab: vocab.clone(), optimizer: None };
            checkpoint::save(&path, &ck).map_err(|e| e.to_string())?;
            let back = checkpoint::load::<f32>(&path).map_err(|e| e.to_string())?;
            (evaluate_ppl(&s, &a.val, &spec), evaluate_ppl(&back.state, &a.val, &spec))
        } else {
            let s = ModelState::<f64>::init(&cfg, &mut rng_for(1, 0)).map_err(|e| e.to_string())?;
            let ck = Checkpoint { state: s.clone(), vocab: vocab.clone(), optimizer: None };
            checkpoint::save(&path, &ck).map_err(|e| e.to_string())?;
            let back = checkpoint::load::<f64>(&path).map_err(|e| e.to_string())?;
            (evaluate_ppl(&s, &a.val, &spec), evaluate_ppl(&back.state, &a.val, &spec))
        };
        let (x, y) = (x.map_err(|e| e.to_string())?, y.map_err(|e| e.to_string())?);
        if x.to_bits() != y.to_bits() {
            problems.push(format!("{precision}-bit round trip: {x:e} vs {y:e}"));
        }
    }
    ensure(
        problems.is_empty(),
        format!("train/protocol/eval artifacts bitwise equal on rerun; reloaded best ckpt eval = logged best val ppl {best:.6}"),
        problems.join("; "),
    )
}
