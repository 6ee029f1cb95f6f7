//! Routing and residual diagnostics. Everything here is a pure function of
//! captured routing decisions and activations; nothing touches model state
//! or the training rng streams.

use std::fmt::Write as _;

use crate::apn::{usage_frequencies, RoutingDecision, NORM_EPS};
use crate::continual::{overlap_score, OverlapStats};
use crate::data::batch_at;
use crate::error::{Error, Result};
use crate::model::{forward, FfnKind, ForwardOptions, ModelState};
use crate::tensor::{Real, Tensor};
use crate::train::{eval_offsets, rng_for, streams, EvalSpec};

/// Ratio above which a token's residual counts as a spike.
pub const SPIKE_THRESHOLD: f64 = 1.0;

/// Order statistics of a sample. Quantiles use the nearest-rank rule.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub p5: f64,
    pub p50: f64,
    pub p95: f64,
}

/// Nearest-rank quantile of an ascending sample: element `ceil(p n) - 1`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

impl Summary {
    /// `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Summary {
            count: s.len(),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            min: s[0],
            max: s[s.len() - 1],
            p5: nearest_rank(&s, 0.05),
            p50: nearest_rank(&s, 0.50),
            p95: nearest_rank(&s, 0.95),
        })
    }
}

fn nonempty(decisions: &[&RoutingDecision]) -> Result<()> {
    if decisions.iter().all(|d| d.tokens == 0) {
        return Err(Error::Usage("monitoring needs at least one routed token".into()));
    }
    if decisions.windows(2).any(|w| w[0].patches != w[1].patches || w[0].k != w[1].k) {
        return Err(Error::Usage("decisions come from different routing configs".into()));
    }
    Ok(())
}

/// Usage frequencies `q` (active-set membership, summing to 1) and the
/// entropy `-sum q_i ln(q_i + eps)` over all tokens of the given decisions.
pub fn usage_entropy(decisions: &[&RoutingDecision]) -> Result<(Vec<f64>, f64)> {
    nonempty(decisions)?;
    let patches = decisions[0].patches;
    let all: Vec<usize> = decisions.iter().flat_map(|d| d.indices.iter().copied()).collect();
    let q = usage_frequencies(&all, patches);
    let h = -q.iter().map(|&p| p * (p + NORM_EPS).ln()).sum::<f64>();
    Ok((q, h))
}

/// Raw active-set membership counts per patch; sums to `tokens * k`.
pub fn usage_counts(decisions: &[&RoutingDecision]) -> Vec<usize> {
    let patches = decisions.first().map_or(0, |d| d.patches);
    let mut counts = vec![0; patches];
    for i in decisions.iter().flat_map(|d| d.indices.iter()) {
        counts[*i] += 1;
    }
    counts
}

/// Summary of the per-token confidence `c(h) = max_i s_i`.
pub fn confidence_stats(decisions: &[&RoutingDecision]) -> Result<Summary> {
    nonempty(decisions)?;
    let c: Vec<f64> = decisions
        .iter()
        .flat_map(|d| (0..d.tokens).map(move |t| d.token_scores(t).iter().copied().fold(f64::NEG_INFINITY, f64::max)))
        .collect();
    Ok(Summary::of(&c).expect("nonempty"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStats {
    /// `||delta||_2` per token.
    pub norms: Vec<f64>,
    /// `||delta||_2 / ||h||_2` per token; `None` where `h` is zero.
    pub ratios: Vec<Option<f64>>,
    pub norm_summary: Summary,
    pub ratio_summary: Option<Summary>,
    pub threshold: f64,
    /// Tokens whose ratio exceeds `threshold`.
    pub spikes: Vec<usize>,
}

fn l2(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-token residual magnitudes for matched `[tokens, d]` activations.
pub fn residual_stats<F: Real>(h: &Tensor<F>, delta: &Tensor<F>, threshold: f64) -> Result<ResidualStats> {
    if h.shape() != delta.shape() {
        return Err(Error::shape("residual stats", h.shape(), delta.shape()));
    }
    if h.rows() == 0 {
        return Err(Error::Usage("residual stats need at least one token".into()));
    }
    let mut norms = Vec::with_capacity(h.rows());
    let mut ratios = Vec::with_capacity(h.rows());
    for t in 0..h.rows() {
        let dn = l2(&delta.row(t).iter().map(|v| v.as_f64()).collect::<Vec<_>>());
        let hn = l2(&h.row(t).iter().map(|v| v.as_f64()).collect::<Vec<_>>());
        norms.push(dn);
        ratios.push((hn > 0.0).then(|| dn / hn));
    }
    let present: Vec<f64> = ratios.iter().flatten().copied().collect();
    let spikes = ratios
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_some_and(|r| r > threshold))
        .map(|(t, _)| t)
        .collect();
    Ok(ResidualStats {
        norm_summary: Summary::of(&norms).expect("nonempty"),
        ratio_summary: Summary::of(&present),
        norms,
        ratios,
        threshold,
        spikes,
    })
}

/// Next-token cross-entropy of each logits row against its target.
pub fn token_losses<F: Real>(logits: &Tensor<F>, targets: &[usize]) -> Result<Vec<f64>> {
    if logits.rows() != targets.len() {
        return Err(Error::shape("token losses", logits.shape(), &[targets.len()]));
    }
    Ok(targets
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let row = logits.row(r);
            let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
            m + z.ln() - row[y].as_f64()
        })
        .collect())
}

/// Empirical `Pr[I = i]` and `E[loss | I = i]` for a top-1 assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct LossDecomposition {
    pub layer: usize,
    pub counts: Vec<usize>,
    pub prob: Vec<f64>,
    /// `None` for patches that were never the top-1 choice.
    pub conditional: Vec<Option<f64>>,
    pub overall: f64,
}

impl LossDecomposition {
    /// Groups per-token losses by assigned patch.
    pub fn from_assignment(layer: usize, assign: &[usize], losses: &[f64], patches: usize) -> Result<Self> {
        if assign.len() != losses.len() || assign.is_empty() {
            return Err(Error::shape("loss decomposition", &[assign.len()], &[losses.len()]));
        }
        if let Some(&bad) = assign.iter().find(|&&i| i >= patches) {
            return Err(Error::Usage(format!("patch {bad} out of range for K = {patches}")));
        }
        let n = assign.len() as f64;
        let mut counts = vec![0usize; patches];
        let mut sums = vec![0.0; patches];
        for (&i, &l) in assign.iter().zip(losses) {
            counts[i] += 1;
            sums[i] += l;
        }
        Ok(LossDecomposition {
            layer,
            prob: counts.iter().map(|&c| c as f64 / n).collect(),
            conditional: counts
                .iter()
                .zip(&sums)
                .map(|(&c, &s)| (c > 0).then(|| s / c as f64))
                .collect(),
            counts,
            overall: losses.iter().sum::<f64>() / n,
        })
    }

    /// `sum_i Pr[I = i] E[loss | I = i]`; equals `overall` up to rounding.
    pub fn reconstructed(&self) -> f64 {
        self.prob
            .iter()
            .zip(&self.conditional)
            .filter_map(|(p, c)| c.map(|c| p * c))
            .sum()
    }
}

fn require_apn<F: Real>(state: &ModelState<F>, layer: usize) -> Result<()> {
    if state.config.ffn != FfnKind::Apn {
        return Err(Error::Config("monitoring needs a model with APN sublayers".into()));
    }
    if layer >= state.config.n_layers {
        return Err(Error::Config(format!(
            "layer {layer} out of range for {} layers",
            state.config.n_layers
        )));
    }
    Ok(())
}

/// Decomposes the evaluation loss by the top-1 patch of `layer` over the
/// batches described by `spec`.
pub fn conditional_loss_decomposition<F: Real>(
    state: &ModelState<F>,
    tokens: &[u16],
    spec: &EvalSpec,
    layer: usize,
) -> Result<LossDecomposition> {
    require_apn(state, layer)?;
    let mut assign = Vec::new();
    let mut losses = Vec::new();
    for off in eval_offsets(tokens.len(), spec)? {
        let b = batch_at(tokens, &off, spec.context);
        let f = forward(state, &b.inputs, None, b.batch, ForwardOptions::eval())?;
        let d = &f.decisions()[layer];
        assign.extend((0..d.tokens).map(|t| d.active(t)[0]));
        losses.extend(token_losses(f.graph.value(f.logits), &b.targets)?);
    }
    LossDecomposition::from_assignment(layer, &assign, &losses, state.config.apn.patches)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub layer: usize,
    pub usage: Vec<f64>,
    pub usage_counts: Vec<usize>,
    pub entropy: f64,
    pub confidence: Summary,
    pub residual: ResidualStats,
    /// Unnormalized `|K(h) ∩ K(h')|` over sampled token pairs.
    pub overlap: OverlapStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonitorReport {
    pub layers: Vec<LayerReport>,
    pub decomposition: LossDecomposition,
}

/// Routes the evaluation batches of `tokens` and gathers every metric.
/// With `other`, overlap pairs are drawn across the two streams; otherwise
/// within `tokens`.
pub fn monitor<F: Real>(
    state: &ModelState<F>,
    tokens: &[u16],
    other: Option<&[u16]>,
    spec: &EvalSpec,
    decomposition_layer: usize,
    overlap_pairs: usize,
) -> Result<MonitorReport> {
    require_apn(state, decomposition_layer)?;
    let n_layers = state.config.n_layers;
    let mut decisions: Vec<Vec<RoutingDecision>> = vec![Vec::new(); n_layers];
    let mut h_rows: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    let mut d_rows: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    let mut assign = Vec::new();
    let mut losses = Vec::new();
    let d = state.config.d_model;
    for off in eval_offsets(tokens.len(), spec)? {
        let b = batch_at(tokens, &off, spec.context);
        let f = forward(state, &b.inputs, None, b.batch, ForwardOptions::eval())?;
        for (l, blk) in f.blocks.iter().enumerate() {
            let tr = blk.apn.as_ref().expect("apn model");
            decisions[l].push(tr.decision.clone());
            h_rows[l].extend(f.graph.value(blk.sublayer_input).to_f64());
            d_rows[l].extend(f.graph.value(tr.residual).to_f64());
        }
        let dec = &decisions[decomposition_layer].last().expect("pushed");
        assign.extend((0..dec.tokens).map(|t| dec.active(t)[0]));
        losses.extend(token_losses(f.graph.value(f.logits), &b.targets)?);
    }
    let other_decisions = match other {
        Some(o) => {
            let one = EvalSpec { batches: 1, ..*spec };
            let off = eval_offsets(o.len(), &one)?;
            let b = batch_at(o, &off[0], one.context);
            let f = forward(state, &b.inputs, None, b.batch, ForwardOptions::eval())?;
            Some(f.decisions().into_iter().cloned().collect::<Vec<_>>())
        }
        None => None,
    };
    let mut rng = rng_for(spec.seed, streams::EVAL);
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let refs: Vec<&RoutingDecision> = decisions[l].iter().collect();
        let (usage, entropy) = usage_entropy(&refs)?;
        let rows = h_rows[l].len() / d;
        let h = Tensor::<f64>::new(vec![rows, d], std::mem::take(&mut h_rows[l]))?;
        let delta = Tensor::<f64>::new(vec![rows, d], std::mem::take(&mut d_rows[l]))?;
        let a = &decisions[l][0];
        let b = other_decisions.as_ref().map_or(a, |o| &o[l]);
        layers.push(LayerReport {
            layer: l,
            usage_counts: usage_counts(&refs),
            usage,
            entropy,
            confidence: confidence_stats(&refs)?,
            residual: residual_stats(&h, &delta, SPIKE_THRESHOLD)?,
            overlap: overlap_score(a, b, false, overlap_pairs.max(1), &mut rng)?,
        });
    }
    Ok(MonitorReport {
        layers,
        decomposition: LossDecomposition::from_assignment(
            decomposition_layer,
            &assign,
            &losses,
            state.config.apn.patches,
        )?,
    })
}

fn fmt_summary(s: &Summary) -> String {
    format!(
        "mean {:.4} min {:.4} p5 {:.4} p50 {:.4} p95 {:.4} max {:.4}",
        s.mean, s.min, s.p5, s.p50, s.p95, s.max
    )
}

impl MonitorReport {
    /// Human-readable block for run logs.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in &self.layers {
            let k = l.usage.len();
            let _ = writeln!(out, "layer {}: usage entropy {:.4} (max ln K = {:.4})", l.layer, l.entropy, (k as f64).ln());
            let _ = writeln!(out, "  usage counts {:?}", l.usage_counts);
            let _ = writeln!(out, "  confidence {}", fmt_summary(&l.confidence));
            let _ = writeln!(out, "  |delta| {}", fmt_summary(&l.residual.norm_summary));
            match &l.residual.ratio_summary {
                Some(r) => {
                    let _ = writeln!(out, "  |delta|/|h| {}", fmt_summary(r));
                }
                None => out.push_str("  |delta|/|h| n/a\n"),
            }
            let _ = writeln!(
                out,
                "  spikes (> {}) {} of {}",
                l.residual.threshold,
                l.residual.spikes.len(),
                l.residual.norms.len()
            );
            let _ = writeln!(out, "  overlap mean {:.4} histogram {:?}", l.overlap.mean, l.overlap.histogram);
        }
        let d = &self.decomposition;
        let _ = writeln!(
            out,
            "loss by top-1 patch of layer {}: overall {:.6}, reconstructed {:.6}",
            d.layer,
            d.overall,
            d.reconstructed()
        );
        for (i, (p, c)) in d.prob.iter().zip(&d.conditional).enumerate() {
            if let Some(c) = c {
                let _ = writeln!(out, "  patch {i:>3}: Pr {p:.4} loss {c:.4}");
            }
        }
        out
    }

    /// Long-format `layer,metric,index,value` table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,metric,index,value\n");
        let mut row = |l: usize, m: &str, i: Option<usize>, v: f64| {
            let idx = i.map(|i| i.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{l},{m},{idx},{v}");
        };
        for l in &self.layers {
            row(l.layer, "usage_entropy", None, l.entropy);
            for (i, q) in l.usage.iter().enumerate() {
                row(l.layer, "usage", Some(i), *q);
            }
            for (name, s) in [("confidence", Some(&l.confidence)), ("delta_norm", Some(&l.residual.norm_summary)), ("delta_ratio", l.residual.ratio_summary.as_ref())] {
                if let Some(s) = s {
                    for (q, v) in [("mean", s.mean), ("min", s.min), ("p5", s.p5), ("p50", s.p50), ("p95", s.p95), ("max", s.max)] {
                        row(l.layer, &format!("{name}_{q}"), None, v);
                    }
                }
            }
            row(l.layer, "spikes", None, l.residual.spikes.len() as f64);
            for (i, c) in l.overlap.histogram.iter().enumerate() {
                row(l.layer, "overlap_hist", Some(i), *c as f64);
            }
        }
        let d = &self.decomposition;
        row(d.layer, "loss_overall", None, d.overall);
        for (i, (p, c)) in d.prob.iter().zip(&d.conditional).enumerate() {
            row(d.layer, "top1_prob", Some(i), *p);
            if let Some(c) = c {
                row(d.layer, "top1_loss", Some(i), *c);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apn::ApnConfig;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn decision(indices: Vec<usize>, k: usize, patches: usize, scores: Vec<f64>) -> RoutingDecision {
        let tokens = indices.len() / k;
        let confidence = (0..tokens).map(|t| scores[t * patches + indices[t * k]]).collect();
        RoutingDecision {
            tokens,
            patches,
            k,
            weights: vec![1.0 / k as f64; indices.len()],
            indices,
            scores,
            confidence,
        }
    }

    fn random_decision(tokens: usize, patches: usize, k: usize, seed: u64) -> RoutingDecision {
        let mut rng = rng_for(seed, 9);
        let scores: Vec<f64> = (0..tokens * patches).map(|_| rng.random_range(-1.0..1.0)).collect();
        let indices = (0..tokens)
            .flat_map(|t| {
                let s = &scores[t * patches..(t + 1) * patches];
                let mut order: Vec<usize> = (0..patches).collect();
                order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
                order.truncate(k);
                order
            })
            .collect();
        decision(indices, k, patches, scores)
    }

    #[test]
    fn entropy_of_fixed_set_is_ln_k() {
        let d = decision(vec![1, 3, 5, 1, 3, 5], 3, 8, vec![0.0; 16]);
        let (q, h) = usage_entropy(&[&d]).unwrap();
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((h - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn entropy_uniform_is_ln_big_k() {
        let d = decision((0..8).collect(), 2, 8, vec![0.0; 32]);
        let (_, h) = usage_entropy(&[&d]).unwrap();
        assert!((h - 8f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn entropy_matches_scalar_oracle() {
        let ds: Vec<_> = (0..3).map(|s| random_decision(50, 10, 3, s)).collect();
        let refs: Vec<_> = ds.iter().collect();
        let (q, h) = usage_entropy(&refs).unwrap();
        let mut counts = [0u32; 10];
        for d in &ds {
            for &i in &d.indices {
                counts[i] += 1;
            }
        }
        let total: u32 = counts.iter().sum();
        let mut oracle = 0.0;
        for (i, &c) in counts.iter().enumerate() {
            let p = c as f64 / total as f64;
            assert_eq!(q[i], p);
            oracle -= p * (p + 1e-12).ln();
        }
        assert!((h - oracle).abs() < 1e-12);
        assert!(h >= 0.0 && h <= 10f64.ln() + 1e-9);
        assert_eq!(usage_counts(&refs).iter().sum::<usize>(), 150 * 3);
    }

    #[test]
    fn confidence_single_and_constant() {
        let d = decision(vec![2], 1, 3, vec![0.1, -0.2, 0.7]);
        let s = confidence_stats(&[&d]).unwrap();
        assert_eq!((s.mean, s.min, s.p50), (0.7, 0.7, 0.7));
        let d = decision(vec![0, 0, 0], 1, 2, vec![0.4; 6]);
        let s = confidence_stats(&[&d]).unwrap();
        assert!([s.min, s.max, s.p5, s.p95].iter().all(|&v| v == 0.4));
    }

    #[test]
    fn confidence_quantiles_match_sort() {
        let d = random_decision(97, 7, 2, 3);
        let s = confidence_stats(&[&d]).unwrap();
        let mut c: Vec<f64> = (0..97)
            .map(|t| d.token_scores(t).iter().cloned().fold(f64::MIN, f64::max))
            .collect();
        c.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // nearest rank: ceil(p n) - 1 = 4, 48, 92
        assert_eq!(s.p5, c[4]);
        assert_eq!(s.p50, c[48]);
        assert_eq!(s.p95, c[92]);
        assert_eq!(s.min, c[0]);
        assert_eq!(d.confidence, (0..97).map(|t| d.token_scores(t)[d.active(t)[0]]).collect::<Vec<_>>());
    }

    #[test]
    fn residual_cases() {
        let h = Tensor::<f64>::from_fn(&[4, 3], |i| i as f64 - 5.0);
        let zero = Tensor::<f64>::zeros(&[4, 3]);
        let r = residual_stats(&h, &zero, SPIKE_THRESHOLD).unwrap();
        assert!(r.ratios.iter().all(|x| *x == Some(0.0)));
        assert!(r.spikes.is_empty());
        let r = residual_stats(&h, &h, SPIKE_THRESHOLD).unwrap();
        assert!(r.ratios.iter().all(|x| (x.unwrap() - 1.0).abs() < 1e-15));
        let r = residual_stats(&zero, &h, SPIKE_THRESHOLD).unwrap();
        assert!(r.ratios.iter().all(Option::is_none));
        assert!(r.ratio_summary.is_none());
        assert!(residual_stats(&h, &Tensor::zeros(&[3, 4]), 1.0).is_err());
    }

    #[test]
    fn residual_matches_norm_oracle() {
        let mut rng = rng_for(5, 0);
        let h = Tensor::<f64>::from_fn(&[20, 6], |_| rng.random_range(-1.0..1.0));
        let delta = Tensor::<f64>::from_fn(&[20, 6], |_| rng.random_range(-2.0..2.0));
        let r = residual_stats(&h, &delta, 1.5).unwrap();
        for t in 0..20 {
            let dn: f64 = delta.row(t).iter().map(|x| x * x).sum::<f64>().sqrt();
            let hn: f64 = h.row(t).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((r.norms[t] - dn).abs() < 1e-12);
            assert!((r.ratios[t].unwrap() - dn / hn).abs() < 1e-12);
            assert_eq!(r.spikes.contains(&t), dn / hn > 1.5);
        }
    }

    #[test]
    fn decomposition_identity_and_clusters() {
        // two clusters with known per-cluster losses
        let assign = [0, 1, 1, 0, 1, 0, 0];
        let losses = [1.0, 3.0, 5.0, 2.0, 4.0, 0.5, 1.5];
        let d = LossDecomposition::from_assignment(0, &assign, &losses, 3).unwrap();
        assert!((d.conditional[0].unwrap() - 5.0 / 4.0).abs() < 1e-9);
        assert!((d.conditional[1].unwrap() - 4.0).abs() < 1e-9);
        assert_eq!(d.conditional[2], None);
        assert!((d.reconstructed() - d.overall).abs() < 1e-9);
        assert_eq!(d.counts.iter().sum::<usize>(), assign.len());
    }

    fn tiny(patches: usize, active: usize) -> ModelState<f64> {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab_size: 7,
            context: 6,
            dropout: 0.0,
            ffn: FfnKind::Apn,
            apn: ApnConfig {
                patches,
                active,
                code_dim: 3,
                ..Default::default()
            },
            ..Default::default()
        };
        ModelState::init(&cfg, &mut rng_for(1, 0)).unwrap()
    }

    fn stream() -> Vec<u16> {
        (0..200u16).map(|i| (i * 7 + i / 3) % 7).collect()
    }

    #[test]
    fn single_patch_conditional_is_overall() {
        let s = tiny(1, 1);
        let spec = EvalSpec { batches: 2, batch_size: 3, context: 6, seed: 0 };
        let d = conditional_loss_decomposition(&s, &stream(), &spec, 0).unwrap();
        assert_eq!(d.prob, vec![1.0]);
        assert!((d.conditional[0].unwrap() - d.overall).abs() < 1e-12);
        let eval = crate::train::evaluate_loss(&s, &stream(), &spec).unwrap();
        assert!((d.overall - eval).abs() < 1e-9);
    }

    #[test]
    fn monitor_report_is_consistent_and_pure() {
        let s = tiny(6, 2);
        let before = s.clone();
        let spec = EvalSpec { batches: 2, batch_size: 3, context: 6, seed: 0 };
        let r = monitor(&s, &stream(), None, &spec, 1, 500).unwrap();
        assert_eq!(s, before);
        assert_eq!(r.layers.len(), 2);
        for l in &r.layers {
            assert_eq!(l.usage_counts.iter().sum::<usize>(), 2 * 3 * 6 * 2);
            assert_eq!(l.overlap.histogram.iter().sum::<usize>(), 500);
            assert!(l.entropy <= 6f64.ln() + 1e-9);
        }
        let d = &r.decomposition;
        assert_eq!(d.layer, 1);
        assert!((d.reconstructed() - d.overall).abs() < 1e-9);
        let again = conditional_loss_decomposition(&s, &stream(), &spec, 1).unwrap();
        assert_eq!(&again, d);
        assert!(r.to_csv().lines().count() > 10);
        assert!(r.to_text().contains("usage entropy"));
    }
}
