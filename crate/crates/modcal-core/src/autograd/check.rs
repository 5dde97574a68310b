//! Central finite differences — the gradient oracle. Independent of the tape: it only
//! re-evaluates a scalar function of an array.

use ndarray::ArrayD;

/// d f / d x at every coordinate of `x`, by central differences with step `eps`.
pub fn finite_diff(x: &ArrayD<f64>, eps: f64, f: impl Fn(&ArrayD<f64>) -> f64) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = probe[&idx];
        probe[&idx] = orig + eps;
        let fp = f(&probe);
        probe[&idx] = orig - eps;
        let fm = f(&probe);
        probe[&idx] = orig;
        grad[&idx] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Finite differences at a subset of coordinates (flat indices into `x`'s row-major
/// order); cheaper than a full sweep for large inputs.
pub fn finite_diff_at(
    x: &ArrayD<f64>,
    coords: &[usize],
    eps: f64,
    f: impl Fn(&ArrayD<f64>) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &flat in coords {
        let orig = probe.as_slice().unwrap()[flat];
        probe.as_slice_mut().unwrap()[flat] = orig + eps;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[flat] = orig - eps;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[flat] = orig;
        out.push((fp - fm) / (2.0 * eps));
    }
    out
}
