//! Small numeric-comparison helpers shared by the test suites and the
//! `verify` subcommand.

/// Relative error between two scalars, with an absolute floor so that
/// near-zero pairs compare as equal instead of dividing by noise.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-10 {
        return 0.0;
    }
    (a - b).abs() / denom
}

/// Central finite difference of `f` at `x` with step `h`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}
