//! Central-difference validation of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::numeric::tape::{Tape, Var};
use crate::numeric::tensor::Tensor;
use crate::scalar::Scalar;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub pass: bool,
}

/// Gradient of `f` at `x` by reverse mode.
pub fn analytic_gradient<T, F>(f: &F, x: &Tensor<T>) -> Result<Vec<T>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.shape(), x.data().to_vec(), true)?;
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    Ok(tape.grad(xv).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); x.len()]))
}

fn eval<T, F>(f: &F, shape: &[usize], data: Vec<T>) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(shape, data)?;
    let y = f(&mut tape, xv)?;
    if tape.shape(y).iter().product::<usize>() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(y).to_vec()));
    }
    let v = tape.item(y).to_f64_lossy();
    if !v.is_finite() {
        return Err(Error::NonFinite("finite-difference probe".into()));
    }
    Ok(v)
}

/// Compares central differences of `f` against its reverse-mode gradient on
/// every coordinate of `x`.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, x)?;
    compare_with_numeric(&f, x, &analytic, step, tol)
}

/// Same comparison with a caller-supplied analytic gradient, e.g. to test
/// the checker itself.
pub fn compare_with_numeric<T, F>(
    f: &F,
    x: &Tensor<T>,
    analytic: &[T],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if analytic.len() != x.len() {
        return Err(Error::shape("finite_difference_check", "gradient extent"));
    }
    let h = T::from_f64_lossy(step);
    let mut numeric = Vec::with_capacity(x.len());
    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0;
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] = plus[i] + h;
        let mut minus = x.data().to_vec();
        minus[i] = minus[i] - h;
        // Use the representable perturbation actually applied.
        let width = (plus[i] - minus[i]).to_f64_lossy();
        let d = (eval(f, x.shape(), plus)? - eval(f, x.shape(), minus)?) / width;
        let a = analytic[i].to_f64_lossy();
        let rel = (a - d).abs() / a.abs().max(d.abs()).max(REL_ERR_FLOOR);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
        numeric.push(d);
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        analytic: analytic.iter().map(|v| v.to_f64_lossy()).collect(),
        numeric,
        pass: max_rel_err <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(t: &mut Tape<f64>, x: Var) -> Result<Var> {
        let sq = t.mul(x, x)?;
        let s = t.scale(sq, 1.5)?;
        t.sum(s)
    }

    #[test]
    fn quadratic_passes() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let r = finite_difference_check(quadratic, &x, 1e-5, 1e-4).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let mut g = analytic_gradient(&quadratic, &x).unwrap();
        g.iter_mut().for_each(|v| *v *= 1.1);
        let r = compare_with_numeric(&quadratic, &x, &g, 1e-5, 1e-4).unwrap();
        assert!(!r.pass);
        assert!((r.max_rel_err - 0.1 / 1.1).abs() < 1e-6);
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        // log-like blowup: 1/x evaluated straddling zero
        let f = |t: &mut Tape<f64>, x: Var| -> Result<Var> {
            let c = t.constant(&[1], vec![1e308])?;
            let y = t.mul(x, c)?;
            let y2 = t.mul(y, y)?;
            t.sum(y2)
        };
        let x = Tensor::new(vec![1], vec![1e-300]).unwrap();
        assert!(finite_difference_check(f, &x, 1.0, 1e-4).is_err());
    }
}
