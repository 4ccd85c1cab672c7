use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Tape gradient and central-difference gradient of a scalar function at one point.
#[derive(Clone, Debug)]
pub struct GradientComparison {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradientComparison {
    /// Largest per-coordinate `|a - n| / max(|a|, |n|, 1e-8)`.
    pub fn max_relative_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }
}

fn evaluate<T, F>(f: &F, x: &Tensor<T>) -> Result<(Tape<T>, Var, Var), AutodiffError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let value = tape.value(out).item()?.as_f64();
    if !value.is_finite() {
        return Err(AutodiffError::NonFinite(value));
    }
    Ok((tape, xv, out))
}

/// Computes both gradients of `f` at `x`. `f` records its computation on the
/// given tape, starting from the leaf it is handed, and returns a scalar.
pub fn finite_diff_gradients<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<GradientComparison, AutodiffError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var, AutodiffError>,
{
    let step = eps.as_f64();
    if !(step > 0.0 && step <= 1e-2) {
        return Err(AutodiffError::BadStep(step));
    }
    let (mut tape, xv, out) = evaluate(&f, x)?;
    tape.backward(out)?;
    let analytic = match tape.grad(xv) {
        Some(g) => g.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; x.numel()],
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (t, _, o) = evaluate(&f, &probe)?;
        let plus = t.value(o).item()?.as_f64();
        probe.data_mut()[i] = orig - eps;
        let (t, _, o) = evaluate(&f, &probe)?;
        let minus = t.value(o).item()?.as_f64();
        probe.data_mut()[i] = orig;
        // Divide by the step actually taken after rounding to T.
        let h = (orig + eps).as_f64() - (orig - eps).as_f64();
        numeric.push((plus - minus) / h);
    }
    Ok(GradientComparison { analytic, numeric })
}

/// Max relative error between the tape gradient of `f` and central differences.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<f64, AutodiffError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var, AutodiffError>,
{
    Ok(finite_diff_gradients(f, x, eps)?.max_relative_error())
}
