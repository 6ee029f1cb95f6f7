//! Offline pretraining loop and perplexity evaluation.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apn;
use crate::data::{batch_at, sample_batch};
use crate::error::{Error, Result};
use crate::model::{forward, FfnKind, ForwardOptions, ModelState, Role, Trainable};
use crate::optim::{optimizer_step, AdamWConfig, OptimizerState, UpdateMask};
use crate::tensor::Real;

/// Independent rng streams derived from one seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const BATCHES: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const EVAL: u64 = 3;
}

pub fn rng_for(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Asks the C allocator to keep freed memory mapped. Every training step
/// builds and drops a tape of activation buffers; by default glibc returns
/// these to the kernel and the next step page-faults them back in, which
/// costs a noticeable share of step time. Process-wide; call once from a
/// binary. No-op off glibc.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| {
            // SAFETY: mallopt only adjusts allocator tunables.
            unsafe {
                libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
                libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
            }
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub batch_size: usize,
    pub context: usize,
    pub lr: f64,
    pub warmup_iters: usize,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub optimizer: AdamWConfig,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_interval: usize,
    pub eval_batches: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iters: 5000,
            batch_size: 64,
            context: 256,
            lr: 1e-3,
            warmup_iters: 100,
            min_lr_ratio: 0.1,
            optimizer: AdamWConfig::default(),
            eval_interval: 250,
            eval_batches: 20,
            seed: 1337,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("train: lr must be > 0, got {}", self.lr)));
        }
        if self.max_iters > 0 && self.warmup_iters >= self.max_iters {
            return Err(Error::Config(format!(
                "train: warmup_iters {} must be < max_iters {}",
                self.warmup_iters, self.max_iters
            )));
        }
        if self.batch_size == 0 || self.context == 0 || self.eval_batches == 0 {
            return Err(Error::Config("train: batch_size, context and eval_batches must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config("train: min_lr_ratio must be in [0, 1]".into()));
        }
        self.optimizer.validate()
    }

    pub fn eval_spec(&self) -> EvalSpec {
        EvalSpec {
            batches: self.eval_batches,
            batch_size: self.batch_size,
            context: self.context,
            seed: self.seed,
        }
    }
}

/// Linear warmup from 0 to `lr`, then cosine decay to `lr * min_lr_ratio`
/// at `max_iters`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.lr;
    let floor = peak * cfg.min_lr_ratio;
    if step < cfg.warmup_iters {
        return peak * step as f64 / cfg.warmup_iters as f64;
    }
    if step >= cfg.max_iters {
        return floor;
    }
    let progress = (step - cfg.warmup_iters) as f64 / (cfg.max_iters - cfg.warmup_iters) as f64;
    floor + 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()) * (peak - floor)
}

/// Deterministic evaluation batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalSpec {
    pub batches: usize,
    pub batch_size: usize,
    pub context: usize,
    pub seed: u64,
}

/// Fixed batch offsets for an evaluation pass.
pub fn eval_offsets(len: usize, spec: &EvalSpec) -> Result<Vec<Vec<usize>>> {
    if len <= spec.context {
        return Err(Error::Data(format!(
            "split of {len} tokens is too short for context {}",
            spec.context
        )));
    }
    let mut rng = rng_for(spec.seed, streams::EVAL);
    Ok((0..spec.batches)
        .map(|_| {
            (0..spec.batch_size)
                .map(|_| rand::Rng::random_range(&mut rng, 0..len - spec.context))
                .collect()
        })
        .collect())
}

/// Mean cross-entropy over the evaluation batches (no dropout).
pub fn evaluate_loss<F: Real>(state: &ModelState<F>, tokens: &[u16], spec: &EvalSpec) -> Result<f64> {
    let offsets = eval_offsets(tokens.len(), spec)?;
    let mut total = 0.0;
    for o in &offsets {
        let b = batch_at(tokens, o, spec.context);
        let f = forward(state, &b.inputs, Some(&b.targets), b.batch, ForwardOptions::eval())?;
        total += f.ce_value().expect("targets");
    }
    Ok(total / offsets.len() as f64)
}

/// `exp` of [`evaluate_loss`].
pub fn evaluate_ppl<F: Real>(state: &ModelState<F>, tokens: &[u16], spec: &EvalSpec) -> Result<f64> {
    Ok(evaluate_loss(state, tokens, spec)?.exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub lr: f64,
    pub val_ppl: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<Record>,
}

impl History {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn val_points(&self) -> Vec<(usize, f64)> {
        self.records.iter().filter_map(|r| r.val_ppl.map(|v| (r.step, v))).collect()
    }

    /// One `key=value` line per record.
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = write!(out, "step={} lr={:e}", r.step, r.lr);
            if let Some(l) = r.train_loss {
                let _ = write!(out, " train_loss={l:.17e}");
            }
            if let Some(v) = r.val_ppl {
                let _ = write!(out, " val_ppl={v:.17e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_loss,lr,val_ppl\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(out, "{},{},{:e},{}", r.step, opt(r.train_loss), r.lr, opt(r.val_ppl));
        }
        out
    }
}

pub struct TrainOutcome<F> {
    pub last: ModelState<F>,
    pub best: ModelState<F>,
    pub best_val_ppl: Option<f64>,
    pub history: History,
    pub optimizer: OptimizerState<F>,
}

/// Gradients of every model parameter, in `state.params` order.
pub(crate) fn collect_grads<F: Real>(
    f: &crate::model::Forward<F>,
    loss: crate::tensor::Var,
) -> Result<Vec<Option<Vec<F>>>> {
    let mut grads = f.graph.backward(loss)?;
    Ok(f.params.iter().map(|&v| grads.take(v)).collect())
}

/// Projects every APN decoder onto its norm ball when a cap is configured.
pub(crate) fn enforce_norm_cap<F: Real>(state: &mut ModelState<F>) -> Result<()> {
    if state.config.ffn != FfnKind::Apn {
        return Ok(());
    }
    if let Some(kappa) = state.config.apn.norm_cap {
        for l in 0..state.config.n_layers {
            if let Some(u) = state.get_mut(Role::ApnDecoders, Some(l)) {
                apn::cap_decoders(u, kappa)?;
            }
        }
    }
    Ok(())
}

/// Pretrains `state` on `train`, evaluating on `val`. The returned `best`
/// state is the one with the lowest validation perplexity.
pub fn train_offline<F: Real>(
    state: ModelState<F>,
    train: &[u16],
    val: &[u16],
    cfg: &TrainConfig,
    mut progress: Option<&mut dyn FnMut(&Record)>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if cfg.context > state.config.context {
        return Err(Error::Config(format!(
            "train.context {} exceeds model context {}",
            cfg.context, state.config.context
        )));
    }
    let mut state = state;
    let mut opt = OptimizerState::<F>::new(cfg.optimizer.clone(), &state);
    let mut history = History::default();
    let mut best = state.clone();
    let mut best_val_ppl = None;
    if cfg.max_iters == 0 {
        return Ok(TrainOutcome {
            last: state,
            best,
            best_val_ppl,
            history,
            optimizer: opt,
        });
    }
    let spec = cfg.eval_spec();
    let mut batch_rng = rng_for(cfg.seed, streams::BATCHES);
    let mut drop_rng = rng_for(cfg.seed, streams::DROPOUT);
    let mask = UpdateMask::all(state.params.len());
    let mut emit = |history: &mut History, r: Record| {
        if let Some(p) = progress.as_deref_mut() {
            p(&r);
        }
        history.records.push(r);
    };

    let initial = evaluate_ppl(&state, val, &spec)?;
    best_val_ppl = Some(initial);
    emit(
        &mut history,
        Record {
            step: 0,
            train_loss: None,
            lr: 0.0,
            val_ppl: Some(initial),
        },
    );
    for i in 0..cfg.max_iters {
        let step = i + 1;
        let lr = lr_at(step, cfg);
        let batch = sample_batch(train, cfg.batch_size, cfg.context, &mut batch_rng)?;
        let f = forward(
            &state,
            &batch.inputs,
            Some(&batch.targets),
            batch.batch,
            ForwardOptions {
                training: true,
                rng: Some(&mut drop_rng),
                trainable: Trainable::All,
            },
        )?;
        let loss_var = f.loss.expect("targets");
        let loss = f.loss_value().expect("targets");
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                lr,
                residuals: f.residual_magnitudes(),
            });
        }
        let grads = collect_grads(&f, loss_var)?;
        drop(f);
        optimizer_step(&mut opt, &mut state, &grads, lr, &mask)?;
        enforce_norm_cap(&mut state)?;
        state.step += 1;
        let eval_now = (cfg.eval_interval > 0 && step % cfg.eval_interval == 0) || step == cfg.max_iters;
        let val_ppl = if eval_now {
            let v = evaluate_ppl(&state, val, &spec)?;
            if best_val_ppl.is_none_or(|b| v < b) {
                best_val_ppl = Some(v);
                best = state.clone();
            }
            Some(v)
        } else {
            None
        };
        emit(
            &mut history,
            Record {
                step,
                train_loss: Some(loss),
                lr,
                val_ppl,
            },
        );
    }
    Ok(TrainOutcome {
        last: state,
        best,
        best_val_ppl,
        history,
        optimizer: opt,
    })
}
