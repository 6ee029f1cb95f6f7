use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor: relative error is `|a - n| / max(|a|, |n|, floor)`,
    /// so vanishing gradients are compared absolutely.
    pub abs_floor: f64,
    /// Evenly spaced subsample per parameter tensor; `None` checks all.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_coords_per_param: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checks: Vec<CoordCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error_for(&self, param: usize) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.param == param)
            .map(|c| c.rel_error)
            .fold(0.0, f64::max)
    }
}

fn coords(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < len => (0..c).map(|i| i * len / c).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares the analytic gradient returned by `f` with central finite
/// differences of its value.
///
/// `f(params)` must return `(value, gradient per param)`; it is evaluated
/// twice at the base point to detect non-determinism.
pub fn grad_check<Obj>(
    params: &[Tensor<f64>],
    cfg: &GradCheckConfig,
    mut f: Obj,
) -> Result<GradCheckReport>
where
    Obj: FnMut(&[Tensor<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let (v0, analytic) = f(params)?;
    let (v1, _) = f(params)?;
    if v0.to_bits() != v1.to_bits() {
        return Err(Error::Harness(format!(
            "objective is not deterministic: {v0:e} vs {v1:e}"
        )));
    }
    if analytic.len() != params.len() {
        return Err(Error::Harness(format!(
            "objective returned {} gradients for {} params",
            analytic.len(),
            params.len()
        )));
    }
    let mut work = params.to_vec();
    let mut checks = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        if analytic[pi].len() != p.len() {
            return Err(Error::Harness(format!(
                "gradient {pi} has {} entries, param has {}",
                analytic[pi].len(),
                p.len()
            )));
        }
        for c in coords(p.len(), cfg.max_coords_per_param) {
            let orig = p.data()[c];
            work[pi].data_mut()[c] = orig + cfg.step;
            let (plus, _) = f(&work)?;
            work[pi].data_mut()[c] = orig - cfg.step;
            let (minus, _) = f(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[pi][c];
            let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
            checks.push(CoordCheck {
                param: pi,
                coord: c,
                analytic: a,
                numeric,
                rel_error: (a - numeric).abs() / denom,
            });
        }
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < cfg.tol,
        max_rel_error,
        checks,
    })
}
