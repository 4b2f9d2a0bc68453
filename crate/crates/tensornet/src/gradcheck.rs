//! Central finite-difference utilities used as an independent oracle for
//! gradient implementations throughout the workspace.

/// Central finite differences of a scalar function at `x` with step `h`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Symmetric relative error with an absolute escape for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= 1e-7 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(1e-12)
}

/// Largest relative error between an analytic gradient and the central
/// finite-difference estimate.
pub fn max_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &b)| rel_err(a, b))
        .fold(0.0, f64::max)
}
