//! Finite-difference verification of tape gradients.
//!
//! The analytic gradient is taken in `f32`; the central differences are
//! evaluated by replaying the same graph in `f64`.

use crate::autodiff::{Tape, Var};
use crate::error::{FarError, Result};
use crate::tensor::{Real, Tensor};

/// A scalar function of a list of tensors, expressible in any precision.
pub trait ScalarFn {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var>;
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `|g_ad − g_fd| / (|g_fd| + 1e-8)` for every scalar parameter, in
    /// parameter order.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    /// Fraction of scalar parameters whose error is below the tolerance.
    pub pass_fraction: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    pub fn passed_fraction_at_least(&self, fraction: f64) -> bool {
        self.pass_fraction >= fraction
    }
}

/// Analytic gradient of `f` at `params`, in precision `T`.
pub fn analytic_grad<T: Real, F: ScalarFn>(f: &F, params: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f.eval(&mut tape, &vars)?;
    let mut grads = tape.backward(root)?;
    vars.iter()
        .map(|&v| {
            grads
                .take(v)
                .ok_or_else(|| FarError::contract("missing leaf gradient"))
        })
        .collect()
}

pub fn eval_scalar<T: Real, F: ScalarFn>(f: &F, params: &[Tensor<T>]) -> Result<T> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f.eval(&mut tape, &vars)?;
    tape.value(root).item()
}

/// Central differences in `f64` for every scalar entry of `params`.
pub fn numeric_grad<F: ScalarFn>(f: &F, params: &[Tensor<f64>], step: f64) -> Result<Vec<Tensor<f64>>> {
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let up = eval_scalar(f, &work)?;
            work[p].data_mut()[i] = orig - step;
            let down = eval_scalar(f, &work)?;
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn finite_diff_check<F: ScalarFn>(
    f: &F,
    params: &[Tensor<f32>],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let ad = analytic_grad(f, params)?;
    let shadow: Vec<Tensor<f64>> = params.iter().map(|p| p.cast()).collect();
    let fd = numeric_grad(f, &shadow, step)?;
    Ok(compare(&ad, &fd, tol))
}

pub fn compare<T: Real>(ad: &[Tensor<T>], fd: &[Tensor<f64>], tol: f64) -> GradCheckReport {
    let rel_errors: Vec<f64> = ad
        .iter()
        .zip(fd)
        .flat_map(|(a, n)| {
            a.data()
                .iter()
                .zip(n.data())
                .map(|(&ga, &gn)| (ga.as_f64() - gn).abs() / (gn.abs() + 1e-8))
                .collect::<Vec<_>>()
        })
        .collect();
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    let pass = rel_errors.iter().filter(|&&e| e < tol).count();
    let pass_fraction = if rel_errors.is_empty() {
        1.0
    } else {
        pass as f64 / rel_errors.len() as f64
    };
    GradCheckReport {
        rel_errors,
        max_rel_error,
        pass_fraction,
        tol,
    }
}
