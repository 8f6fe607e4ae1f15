use super::{GradMode, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the reverse-mode gradient of the scalar function `f` at `x` with
/// central finite differences. Returns `max_i |analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss, GradMode::Reset)?;
    let analytic = g.grad_tensor(xv);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe);
        let out = f(&mut g, v)?;
        let y = g.value(out).item()?;
        if !y.is_finite() {
            return Err(Error::NonFinite("grad_check probe".into()));
        }
        Ok(y)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        if !a.is_finite() {
            return Err(Error::NonFinite("analytic gradient".into()));
        }
        worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact_enough() {
        let x = Tensor::vector(&[0.3, -1.7, 2.0, 0.0]);
        let err = grad_check(
            |g, x| {
                let xx = g.mul(x, x)?;
                Ok(g.sum(xx))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(&[1.0, 2.0]);
        let err = grad_check(|g, _x| Ok(g.constant(Tensor::scalar(3.5))), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_step_and_nan() {
        let x = Tensor::vector(&[1.0]);
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 1e-2).is_err());
        let x = Tensor::vector(&[-1.0]);
        assert!(grad_check(
            |g, x| {
                let l = g.log(x);
                Ok(g.sum(l))
            },
            &x,
            1e-5
        )
        .is_err());
    }
}
