//! Central finite-difference oracle for tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
/// A non-finite value of `f` anywhere in the probe is reported as an error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::arg(format!("step h={h} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let leaf = tape.param(x);
    let out = f(&mut tape, leaf)?;
    let value = tape.item(out);
    if !value.is_finite() {
        return Err(Error::Numerical(format!("f(x) = {value}")));
    }
    let analytic = tape.backward(out)?.get(leaf);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe);
        let o = f(&mut t, v)?;
        let y = t.item(o);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::Numerical(format!("f(x ± h) = {y}")))
        }
    };

    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::logsumexp;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.5, 0.25]);
        let err = finite_diff_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn logsumexp_self_test() {
        // d/dx logsumexp(x) = softmax(x): built from exp/sum/log primitives.
        let x = Tensor::vector(vec![0.1, -0.3, 0.8, 1.7, -2.0]);
        let err = finite_diff_check(
            |t, v| {
                let e = t.exp(v);
                let s = t.sum(e);
                Ok(t.log(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let e = t.exp(v);
        let s = t.sum(e);
        let l = t.log(s);
        assert!((t.item(l) - logsumexp(x.data())).abs() < 1e-12);
    }

    #[test]
    fn nan_output_is_reported() {
        let x = Tensor::vector(vec![-1.0, 2.0]);
        let r = finite_diff_check(
            |t, v| {
                let l = t.log(v);
                Ok(t.sum(l))
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numerical(_))));
    }

    #[test]
    fn step_size_bounds() {
        let x = Tensor::vector(vec![1.0]);
        assert!(finite_diff_check(|t, v| Ok(t.sum(v)), &x, 1e-2).is_err());
        assert!(finite_diff_check(|t, v| Ok(t.sum(v)), &x, 1e-9).is_err());
    }
}
