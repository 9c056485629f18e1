use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

/// Floor on the analytic magnitude in the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// Which parameter coordinates a [`grad_check`] visits.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// Uniform sample of this many (tensor, index) pairs, seeded.
    Sample { count: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, flat index) of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares analytic gradients against central differences.
///
/// `f` returns the scalar value and its analytic gradients (one tensor per
/// parameter). The error at a coordinate is
/// `|analytic − numeric| / max(|analytic|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, coords: Coords) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(contract(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("f(params) = {value}")));
    }
    if analytic.len() != params.len() {
        return Err(contract("one gradient per parameter tensor expected"));
    }

    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i)))
        .collect();
    let visit: Vec<(usize, usize)> = match coords {
        Coords::All => all,
        Coords::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = count.min(all.len());
            sample(&mut rng, all.len(), k).into_iter().map(|i| all[i]).collect()
        }
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (t, i) in visit {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + eps;
        let (plus, _) = f(&work)?;
        work[t].data_mut()[i] = orig - eps;
        let (minus, _) = f(&work)?;
        work[t].data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "f non-finite when perturbing tensor {t} index {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[t].data()[i];
        let err = (a - numeric).abs() / a.abs().max(REL_FLOOR);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (t, i);
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(p: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let w = p[0].data()[0];
        Ok((w * w, vec![Tensor::scalar(2.0 * w)]))
    }

    #[test]
    fn quadratic_matches() {
        let r = grad_check(quadratic, &[Tensor::scalar(3.0)], 1e-5, Coords::All).unwrap();
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let bad = |p: &[Tensor]| {
            let (v, g) = quadratic(p)?;
            Ok((v, vec![g[0].map(|x| x * 1.1)]))
        };
        let r = grad_check(bad, &[Tensor::scalar(3.0)], 1e-5, Coords::All).unwrap();
        // |1.1a − a| / |1.1a| = 1/11
        assert!((r.max_rel_error - 1.0 / 11.0).abs() < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn eps_out_of_range() {
        assert!(grad_check(quadratic, &[Tensor::scalar(1.0)], 0.1, Coords::All).is_err());
        assert!(grad_check(quadratic, &[Tensor::scalar(1.0)], 0.0, Coords::All).is_err());
    }

    #[test]
    fn non_finite_value_is_numeric_error() {
        let f = |_: &[Tensor]| Ok((f64::NAN, vec![Tensor::scalar(0.0)]));
        let err = grad_check(f, &[Tensor::scalar(1.0)], 1e-5, Coords::All).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
