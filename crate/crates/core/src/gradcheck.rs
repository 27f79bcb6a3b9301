//! Central finite-difference checking of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Evaluate `f` as a pure function of `x` (no gradients recorded).
fn eval<F>(f: &mut F, x: &Tensor) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone())?;
    let out = f(&mut tape, v)?;
    tape.value(out).item()
}

/// Max relative error between the analytic gradient of the scalar function
/// `f` at `x` and central finite differences with step `h`:
/// `max_i |analytic_i - fd_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(mut f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParam(alloc::format!("step h must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let v = tape.leaf_grad(x.clone())?;
    let out = f(&mut tape, v)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::NonScalarLoss);
    }
    let grads = tape.backward(out)?;
    let analytic = grads.of(v).expect("grad-flagged leaf always has a gradient").clone();

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&mut f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&mut f, &probe)?;
        probe.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::vector(vec![1.5, -0.3, 2.0]);
        let err = grad_check(|tape, v| tape.sum(v), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn two_layer_network_matches_finite_differences() {
        let mut rng = Rng::new(99);
        let w1: Vec<f64> = (0..12).map(|_| rng.gaussian() * 0.5).collect();
        let w2: Vec<f64> = (0..4).map(|_| rng.gaussian() * 0.5).collect();
        let x = Tensor::vector((0..3).map(|_| rng.gaussian()).collect());
        let err = grad_check(
            |tape, v| {
                let w1 = tape.leaf(Tensor::new(&[3, 4], w1.clone())?)?;
                let w2 = tape.leaf(Tensor::new(&[4, 1], w2.clone())?)?;
                let row = tape.reshape(v, &[1, 3])?;
                let h = tape.matmul(row, w1)?;
                let h = tape.relu(h)?;
                let out = tape.matmul(h, w2)?;
                tape.mean(out)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn nan_output_is_an_error() {
        let x = Tensor::vector(vec![-2.0]);
        let res = grad_check(
            |tape, v| {
                let l = tape.log(v)?;
                tape.sum(l)
            },
            &x,
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonFinite { .. })));
    }
}
