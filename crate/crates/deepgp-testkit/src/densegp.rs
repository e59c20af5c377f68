//! Dense (non-sparse) Gaussian process reference computations with their own
//! self-contained linear algebra.

use ndarray::{Array1, Array2, ArrayView2};

/// Self-contained Cholesky; panics on non-PD input (oracle usage only).
fn chol(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        assert!(d > 0.0, "oracle: matrix not positive definite");
        l[(j, j)] = d.sqrt();
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / l[(j, j)];
        }
    }
    l
}

fn solve_chol(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        for k in 0..i {
            let t = l[(i, k)] * x[k];
            x[i] -= t;
        }
        x[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let t = l[(k, i)] * x[k];
            x[i] -= t;
        }
        x[i] /= l[(i, i)];
    }
    x
}

/// log N(vec(Y); 0, I_D ⊗ (K + σ²I)): the exact GP log marginal likelihood
/// with independent output columns.
pub fn dense_gp_log_marginal(kxx: &ArrayView2<f64>, y: &ArrayView2<f64>, noise: f64) -> f64 {
    let n = kxx.nrows();
    let d = y.ncols();
    let mut c = kxx.to_owned();
    for i in 0..n {
        c[(i, i)] += noise;
    }
    let l = chol(&c);
    let mut logdet = 0.0;
    for i in 0..n {
        logdet += l[(i, i)].ln();
    }
    logdet *= 2.0;
    let mut quad = 0.0;
    for j in 0..d {
        let col = y.column(j).to_owned();
        let alpha = solve_chol(&l, &col);
        quad += col.dot(&alpha);
    }
    -0.5 * quad
        - 0.5 * d as f64 * logdet
        - 0.5 * (n * d) as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Posterior mean of the noise-free function at the training inputs:
/// K (K + σ²I)⁻¹ Y, column by column.
pub fn dense_gp_posterior_mean(
    kxx: &ArrayView2<f64>,
    y: &ArrayView2<f64>,
    noise: f64,
) -> Array2<f64> {
    let n = kxx.nrows();
    let mut c = kxx.to_owned();
    for i in 0..n {
        c[(i, i)] += noise;
    }
    let l = chol(&c);
    let mut out = Array2::<f64>::zeros(y.raw_dim());
    for j in 0..y.ncols() {
        let alpha = solve_chol(&l, &y.column(j).to_owned());
        let m = kxx.dot(&alpha);
        out.column_mut(j).assign(&m);
    }
    out
}

/// GP regression predictive mean and variance at test inputs.
/// Returns (mean N*×D, variance N*) — the variance is output-independent.
pub fn dense_gp_predict(
    kxx: &ArrayView2<f64>,
    kxs: &ArrayView2<f64>,
    kss_diag: &Array1<f64>,
    y: &ArrayView2<f64>,
    noise: f64,
) -> (Array2<f64>, Array1<f64>) {
    let n = kxx.nrows();
    let ns = kxs.ncols();
    let mut c = kxx.to_owned();
    for i in 0..n {
        c[(i, i)] += noise;
    }
    let l = chol(&c);
    let mut mean = Array2::<f64>::zeros((ns, y.ncols()));
    for j in 0..y.ncols() {
        let alpha = solve_chol(&l, &y.column(j).to_owned());
        let m = kxs.t().dot(&alpha);
        mean.column_mut(j).assign(&m);
    }
    let mut var = Array1::<f64>::zeros(ns);
    for s in 0..ns {
        let ks = kxs.column(s).to_owned();
        let v = solve_chol(&l, &ks);
        var[s] = kss_diag[s] - ks.dot(&v);
    }
    (mean, var)
}
