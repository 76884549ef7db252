//! Central finite-difference gradient oracle.
//!
//! `loss_fn` must be deterministic: the oracle evaluates it twice per scalar
//! parameter and assumes nothing else changes between calls.

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// `(L(theta + eps e_i) - L(theta - eps e_i)) / (2 eps)` for every scalar.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &ParamSet, eps: f64) -> Result<ParamSet>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::config(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let mut probe = params.clone();
    let mut grads = params.zeros_like();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name).map(Tensor::len).unwrap_or(0);
        for i in 0..n {
            let orig = params.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = loss_fn(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = loss_fn(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            grads.get_mut(name).unwrap().data_mut()[i] = (up - down) / (2.0 * eps);
        }
    }
    Ok(grads)
}

/// Norm-wise relative error `||a - b|| / max(||a||, ||b||)`; zero when both
/// are zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_shape(b, "relative_error")?;
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.sq_norm().sqrt().max(b.sq_norm().sqrt());
    if scale == 0.0 {
        return Ok(diff);
    }
    Ok(diff / scale)
}

/// Worst per-tensor [`relative_error`] across two parameter sets.
pub fn max_relative_error(a: &ParamSet, b: &ParamSet) -> Result<f64> {
    a.ensure_compatible(b)?;
    let mut worst = 0.0f64;
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        worst = worst.max(relative_error(x, y)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Part;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new(Part::Full);
        p.insert("theta", Tensor::scalar(v));
        p
    }

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|p| Ok(p.get("theta").unwrap().data()[0].powi(2)), &single(3.0), 1e-5)
            .unwrap();
        assert!((g.get("theta").unwrap().data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_loss_gives_zeros() {
        let mut p = single(0.0);
        p.insert("other", Tensor::full(&[3], 2.0));
        let g = finite_diff_grad(|_| Ok(7.5), &p, 1e-5).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eps_range_enforced() {
        assert!(finite_diff_grad(|_| Ok(0.0), &single(0.0), 1e-2).is_err());
        assert!(finite_diff_grad(|_| Ok(0.0), &single(0.0), 1e-9).is_err());
    }
}
