use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Relative-error floor, as a fraction of the largest analytic gradient
/// magnitude. Components far below the gradient's own scale are compared
/// against that scale instead of against themselves.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Compares autodiff gradients of a scalar function against central
/// differences `(f(x + h e_i) - f(x - h e_i)) / 2h` over every coordinate
/// of `x`, returning the largest relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, h, &all)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let report = grad_check_piecewise(|t, v| Ok((f(t, v)?, Vec::new())), x, h, coords)?;
    Ok(report.max_rel_error)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PiecewiseReport {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose stencil `x +- h` crossed a kink.
    pub skipped: usize,
}

/// Gradient check for piecewise-smooth functions. Besides the output, `f`
/// returns a signature (e.g. the signs of every relu pre-activation) that
/// identifies the smooth piece `x` lies in. A coordinate is compared only
/// on a stencil whose points all share the signature of `x`, since
/// differences across a kink measure nothing useful: the step starts at `h`
/// and is halved up to [`MAX_HALVINGS`] times to fit. The numeric
/// derivative is the Richardson extrapolation of central differences at
/// the step and half of it.
pub fn grad_check_piecewise<F>(f: F, x: &Tensor<f64>, h: f64, coords: &[usize]) -> Result<PiecewiseReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<(Var, Vec<i8>)>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let (y, signature) = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |i: usize, delta: f64| -> Result<(f64, Vec<i8>)> {
        let mut point = x.clone();
        point.data_mut()[i] += delta;
        let mut tape = Tape::new();
        let v = tape.param(point);
        let (y, sig) = f(&mut tape, v)?;
        Ok((tape.value(y).item(), sig))
    };

    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (GRAD_CHECK_FLOOR * scale).max(1e-12);
    let mut report = PiecewiseReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for &i in coords {
        let Some(numeric) = piecewise_derivative(&eval, i, h, &signature)? else {
            report.skipped += 1;
            continue;
        };
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        report.max_rel_error = report.max_rel_error.max((a - numeric).abs() / denom);
        report.checked += 1;
    }
    Ok(report)
}

/// Times the step may be halved to fit a stencil inside one piece.
pub const MAX_HALVINGS: u32 = 6;

/// Richardson-extrapolated central difference along coordinate `i`, using
/// the largest step `h / 2^k` whose stencil stays on `signature`'s piece.
fn piecewise_derivative(
    eval: &impl Fn(usize, f64) -> Result<(f64, Vec<i8>)>,
    i: usize,
    h: f64,
    signature: &[i8],
) -> Result<Option<f64>> {
    'steps: for k in 0..=MAX_HALVINGS {
        let step = h / f64::from(1u32 << k);
        let mut values = [0.0; 4];
        for (slot, delta) in [step, -step, step / 2.0, -step / 2.0].into_iter().enumerate() {
            let (v, sig) = eval(i, delta)?;
            if sig != signature {
                continue 'steps;
            }
            values[slot] = v;
        }
        let coarse = (values[0] - values[1]) / (2.0 * step);
        let fine = (values[2] - values[3]) / step;
        // cancels the step^2 truncation term, which dominates inside
        // pieces that are small but smooth
        return Ok(Some((4.0 * fine - coarse) / 3.0));
    }
    Ok(None)
}
