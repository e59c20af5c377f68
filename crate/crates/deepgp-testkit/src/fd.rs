//! Central finite differences over flat parameter vectors.

use ndarray::Array1;

/// (f(x+h·e_i) − f(x−h·e_i)) / 2h for every coordinate.
pub fn central_difference(
    f: &mut dyn FnMut(&Array1<f64>) -> f64,
    x0: &Array1<f64>,
    step: f64,
) -> Array1<f64> {
    let mut g = Array1::<f64>::zeros(x0.len());
    let mut x = x0.clone();
    for i in 0..x0.len() {
        x[i] = x0[i] + step;
        let fp = f(&x);
        x[i] = x0[i] - step;
        let fm = f(&x);
        x[i] = x0[i];
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Largest relative deviation between an analytic gradient and its
/// finite-difference estimate, with the offending coordinate.
pub fn max_rel_error(analytic: &Array1<f64>, numeric: &Array1<f64>) -> (f64, usize) {
    let mut worst = 0.0;
    let mut at = 0;
    for i in 0..analytic.len() {
        let scale = analytic[i].abs().max(numeric[i].abs()).max(1e-6);
        let rel = (analytic[i] - numeric[i]).abs() / scale;
        if rel > worst {
            worst = rel;
            at = i;
        }
    }
    (worst, at)
}
