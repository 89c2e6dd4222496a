use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, xv)?;
    tape.value(out).item()
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences with step `eps`.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// `f` is evaluated twice at `x` up front; differing results are reported
/// as a determinism error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("grad_check step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let base = tape.value(out).item()?;
    tape.backward(out)?;
    let analytic = tape.grad(xv).expect("leaf gradient populated").clone();

    let again = eval(&f, x)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Determinism(format!(
            "two evaluations at the same point gave {base} and {again}"
        )));
    }

    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
