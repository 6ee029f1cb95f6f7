//! AdamW with decoupled weight decay, global-norm clipping and per-block /
//! per-patch update masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: Some(1.0),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer betas must be in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer eps must be > 0 and weight_decay >= 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Trainability of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BlockMask {
    Frozen,
    Trainable,
    /// Per-row flags over the leading axis (one row per patch).
    Rows(Vec<bool>),
}

impl BlockMask {
    pub fn any(&self) -> bool {
        match self {
            BlockMask::Frozen => false,
            BlockMask::Trainable => true,
            BlockMask::Rows(r) => r.iter().any(|&b| b),
        }
    }

    /// Trainable element count for a tensor of `len` elements and `rows` rows.
    pub fn count(&self, len: usize, rows: usize) -> usize {
        match self {
            BlockMask::Frozen => 0,
            BlockMask::Trainable => len,
            BlockMask::Rows(r) => r.iter().filter(|&&b| b).count() * (len / rows.max(1)),
        }
    }

    fn row_on(&self, row: usize) -> bool {
        match self {
            BlockMask::Frozen => false,
            BlockMask::Trainable => true,
            BlockMask::Rows(r) => r[row],
        }
    }
}

/// One [`BlockMask`] per model parameter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpdateMask {
    pub blocks: Vec<BlockMask>,
}

impl UpdateMask {
    pub fn all(n: usize) -> Self {
        UpdateMask {
            blocks: vec![BlockMask::Trainable; n],
        }
    }

    pub fn none(n: usize) -> Self {
        UpdateMask {
            blocks: vec![BlockMask::Frozen; n],
        }
    }

    /// Whether each parameter needs a gradient at all.
    pub fn needs_grad(&self) -> Vec<bool> {
        self.blocks.iter().map(BlockMask::any).collect()
    }

    pub fn trainable_count<F: Real>(&self, state: &ModelState<F>) -> usize {
        self.blocks
            .iter()
            .zip(&state.params)
            .map(|(m, p)| m.count(p.value.len(), leading(&p.value)))
            .sum()
    }
}

fn leading<F: Real>(t: &Tensor<F>) -> usize {
    t.shape().first().copied().unwrap_or(1)
}

/// Moment accumulators. Counts are per row so rows frozen on some steps
/// get correct bias correction when they resume.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub config: AdamWConfig,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub counts: Vec<Vec<u64>>,
    pub steps: u64,
}

impl<F: Real> OptimizerState<F> {
    pub fn new<G: Real>(config: AdamWConfig, state: &ModelState<G>) -> Self {
        OptimizerState {
            config,
            m: state.params.iter().map(|p| vec![F::zero(); p.value.len()]).collect(),
            v: state.params.iter().map(|p| vec![F::zero(); p.value.len()]).collect(),
            counts: state.params.iter().map(|p| vec![0; leading(&p.value)]).collect(),
            steps: 0,
        }
    }
}

/// Global L2 norm of the trainable gradient entries.
pub fn masked_grad_norm<F: Real>(grads: &[Option<Vec<F>>], mask: &UpdateMask, rows: &[usize]) -> f64 {
    let mut sq = 0.0;
    for ((g, m), &r) in grads.iter().zip(&mask.blocks).zip(rows) {
        let Some(g) = g else { continue };
        let width = g.len() / r.max(1);
        for (row, chunk) in g.chunks(width.max(1)).enumerate() {
            if m.row_on(row) {
                sq += chunk.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
            }
        }
    }
    sq.sqrt()
}

/// Advances the moments for trainable entries and returns the proposed
/// parameter deltas (`None` for untouched tensors, exact zeros for frozen
/// rows). Nothing is applied to the parameters.
pub fn propose<F: Real>(
    opt: &mut OptimizerState<F>,
    state: &ModelState<F>,
    grads: &[Option<Vec<F>>],
    lr: f64,
    mask: &UpdateMask,
) -> Result<Vec<Option<Vec<F>>>> {
    let n = state.params.len();
    if grads.len() != n || mask.blocks.len() != n || opt.m.len() != n {
        return Err(Error::shape("optimizer_step", &[n], &[grads.len(), mask.blocks.len(), opt.m.len()]));
    }
    let cfg = opt.config.clone();
    let rows: Vec<usize> = state.params.iter().map(|p| leading(&p.value)).collect();
    let clip_scale = match cfg.grad_clip {
        Some(c) => {
            let norm = masked_grad_norm(grads, mask, &rows);
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let (one, eps, lr_f) = (F::one(), F::lit(cfg.eps), F::lit(lr));
    let cs = F::lit(clip_scale);
    opt.steps += 1;
    let mut deltas = Vec::with_capacity(n);
    for (i, p) in state.params.iter().enumerate() {
        let (Some(g), true) = (&grads[i], mask.blocks[i].any()) else {
            deltas.push(None);
            continue;
        };
        if g.len() != p.value.len() {
            return Err(Error::shape("optimizer_step", p.value.shape(), &[g.len()]));
        }
        let wd = if p.role.decays() { F::lit(cfg.weight_decay) } else { F::zero() };
        let width = (g.len() / rows[i]).max(1);
        let mut delta = vec![F::zero(); g.len()];
        for row in 0..rows[i] {
            if !mask.blocks[i].row_on(row) {
                continue;
            }
            opt.counts[i][row] += 1;
            let t = opt.counts[i][row] as i32;
            let bc1 = one - b1.powi(t);
            let bc2 = one - b2.powi(t);
            for j in row * width..(row + 1) * width {
                let gj = g[j] * cs;
                let m = b1 * opt.m[i][j] + (one - b1) * gj;
                let v = b2 * opt.v[i][j] + (one - b2) * gj * gj;
                opt.m[i][j] = m;
                opt.v[i][j] = v;
                let mhat = m / bc1;
                let vhat = v / bc2;
                delta[j] = -lr_f * (mhat / (vhat.sqrt() + eps) + wd * p.value.data()[j]);
            }
        }
        deltas.push(Some(delta));
    }
    Ok(deltas)
}

/// Adds deltas in place. Exact-zero deltas are skipped so untouched
/// entries stay bitwise identical.
pub fn apply<F: Real>(state: &mut ModelState<F>, deltas: &[Option<Vec<F>>]) {
    for (p, d) in state.params.iter_mut().zip(deltas) {
        let Some(d) = d else { continue };
        for (x, &dx) in p.value.data_mut().iter_mut().zip(d) {
            if dx != F::zero() {
                *x += dx;
            }
        }
    }
}

/// One full optimizer step: propose then apply.
pub fn optimizer_step<F: Real>(
    opt: &mut OptimizerState<F>,
    state: &mut ModelState<F>,
    grads: &[Option<Vec<F>>],
    lr: f64,
    mask: &UpdateMask,
) -> Result<()> {
    let deltas = propose(opt, state, grads, lr, mask)?;
    apply(state, &deltas);
    Ok(())
}
