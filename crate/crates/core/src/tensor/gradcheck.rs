use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of scalar `f` at `x` with central differences.
///
/// Returns the max over coordinates of
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::usage(format!("eps {eps} outside (0, 1e-2]")));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let out = f(tape.constant(point))?;
        scalar(&out)
    };

    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(xv)?;
    scalar(&out)?;
    let analytic = tape.backward(out)?.wrt(xv).clone();

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max((a - fd).abs() / denom);
    }
    Ok(worst)
}

fn scalar(v: &Var<'_>) -> Result<f64> {
    let value = v.value();
    if value.len() != 1 {
        return Err(Error::usage(format!(
            "gradient_check needs a scalar-valued function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.data()[0])
}
