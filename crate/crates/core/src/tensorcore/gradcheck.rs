use super::{Fault, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_relative_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub const RELATIVE_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Checks the gradient that `f` reports for `x` against central differences
/// with step `eps`. `f` builds a scalar-valued computation on a fresh graph
/// from the leaf it is handed.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    grad_check_with_fault(f, x, eps, None)
}

/// [`grad_check`] with an optional corrupted backward pass in the analytic
/// evaluation.
pub fn grad_check_with_fault<T, F>(f: F, x: &Tensor<T>, eps: f64, fault: Option<Fault>) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let analytic = analytic_grad(&f, x, fault)?;
    let mut probe = x.clone();
    probe.zero_grad();
    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::from_f64(orig.as_f64() + eps);
        let plus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = T::from_f64(orig.as_f64() - eps);
        let minus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i].as_f64();
        let err = relative_error(a, numeric);
        if err > report.max_relative_error || i == 0 {
            report = GradCheck {
                max_relative_error: err,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

fn analytic_grad<T, F>(f: &F, x: &Tensor<T>, fault: Option<Fault>) -> Result<Vec<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::with_fault(fault);
    let mut leaf = x.clone();
    leaf.zero_grad();
    let xv = g.param(leaf);
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    Ok(g.grad(xv).map(|s| s.to_vec()).unwrap_or_else(|| vec![T::zero(); x.numel()]))
}

fn evaluate<T, F>(f: &F, x: &Tensor<T>) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let loss = f(&mut g, xv)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::Contract(format!("grad_check function returned shape {}", v.shape())));
    }
    Ok(v.data()[0].as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::OpKind;

    fn ramp(n: usize) -> Tensor<f64> {
        Tensor::from_fn([1, 1, 1, n], |_, _, _, x| 0.3 + 0.7 * x as f64).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let x = ramp(6);
        let coeffs = Tensor::from_fn([1, 1, 1, 6], |_, _, _, x| x as f64 - 2.5).unwrap();
        let r = grad_check(
            |g, v| {
                let c = g.input(coeffs.clone());
                let s = g.add(v, c)?;
                let s = g.scale(s, 3.0);
                Ok(g.sum(s))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(r.max_relative_error <= 1e-9, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let x = ramp(4);
        let r = grad_check_with_fault(
            |g, v| Ok(g.sum_squares(v)),
            &x,
            1e-6,
            Some(Fault {
                op: OpKind::SumSquares,
                factor: 0.1,
            }),
        )
        .unwrap();
        assert!(r.max_relative_error > 1e-2, "{r:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
