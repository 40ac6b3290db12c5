use super::dense::Tensor;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Magnitudes below this are compared absolutely. Gradients that are zero
/// by symmetry otherwise turn rounding noise into large relative errors.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Five-point central difference of `f` at `x0`.
pub fn five_point<F>(mut f: F, x0: f64, eps: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let p2 = f(x0 + 2.0 * eps)?;
    let p1 = f(x0 + eps)?;
    let m1 = f(x0 - eps)?;
    let m2 = f(x0 - 2.0 * eps)?;
    Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * eps))
}

/// Compares reverse-mode gradients of a scalar function against five-point
/// central differences, in double precision, and returns the largest
/// componentwise [`relative_error`].
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe, false);
        let o = f(&mut t, v)?;
        Ok(t.value(o).data()[0])
    };

    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = five_point(
            |xi| {
                let mut probe = x.clone();
                probe.data_mut()[i] = xi;
                eval(probe)
            },
            x.data()[i],
            eps,
        )?;
        worst = worst.max(relative_error(*a, numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.0, 0.7, -0.1, 1.5]).unwrap();
        let err = gradient_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = gradient_check(
            |t, _| Ok(t.constant(Tensor::scalar(4.0))),
            &x,
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }
}
