//! Central finite differences and the comparison rule used by every
//! gradient test.

use super::tensor::Tensor;
use crate::error::Result;

/// Relative tolerance for analytic-vs-numeric agreement.
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Absolute floor below which differences are ignored.
pub const GRAD_ABS_FLOOR: f64 = 1e-7;
/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Worst elementwise disagreement between two gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradDiff {
    /// Largest `|a - n| / max(|a|, |n|)` over entries whose absolute gap
    /// exceeds the floor.
    pub max_rel: f64,
    pub max_abs: f64,
}

impl GradDiff {
    pub fn passes(&self) -> bool {
        self.max_rel <= GRAD_REL_TOL
    }
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> GradDiff {
    assert_eq!(analytic.len(), numeric.len());
    let mut diff = GradDiff::default();
    for (&a, &n) in analytic.iter().zip(numeric) {
        let gap = (a - n).abs();
        diff.max_abs = diff.max_abs.max(gap);
        if gap <= GRAD_ABS_FLOOR {
            continue;
        }
        let rel = gap / a.abs().max(n.abs());
        diff.max_rel = diff.max_rel.max(rel);
    }
    diff
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::matrix(2, 2, vec![0.3, -1.0, 2.0, 7.5]);
        let g = finite_difference_gradient(|t| Ok(t.data().iter().sum()), &x, FD_STEP).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_difference_gradient(|t| Ok(t.item() * t.item()), &x, FD_STEP).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn comparison_respects_floor() {
        let d = compare_gradients(&[1e-9, 1.0], &[5e-9, 1.0 + 1e-6]);
        assert!(d.passes());
        let d = compare_gradients(&[1.0], &[1.01]);
        assert!(!d.passes());
    }
}
