//! Gauss–Hermite quadrature and tensorized expectations under diagonal
//! Gaussian measures. Serves as the ground-truth oracle for the closed-form
//! kernel expectations.

/// Nodes and weights of the n-point Gauss–Hermite rule for ∫ e^{−t²} f(t) dt,
/// computed by Newton iteration on the normalized Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let eps = 1e-14;
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = (n + 1) / 2;
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= eps {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Expectation E[f(x)] for x ~ N(μ, diag(σ²)) by a full tensor-product
/// Gauss–Hermite grid (the measure factorizes across coordinates).
pub struct GaussianExpectation {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussianExpectation {
    pub fn new(nodes_per_dim: usize) -> Self {
        let (nodes, weights) = gauss_hermite(nodes_per_dim);
        GaussianExpectation { nodes, weights }
    }

    /// `f` receives the sample point; dimensions with zero variance stay at
    /// their mean.
    pub fn expect<R>(
        &self,
        mean: &[f64],
        variance: &[f64],
        mut f: impl FnMut(&[f64]) -> R,
        combine: impl Fn(&mut R, &R, f64),
        zero: R,
    ) -> R {
        let q = mean.len();
        let k = self.nodes.len();
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut acc = zero;
        let mut idx = vec![0usize; q];
        let mut point = vec![0.0; q];
        loop {
            let mut wtot = 1.0;
            for d in 0..q {
                let t = self.nodes[idx[d]];
                point[d] = mean[d] + (2.0 * variance[d]).sqrt() * t;
                wtot *= self.weights[idx[d]] / sqrt_pi;
            }
            let val = f(&point);
            combine(&mut acc, &val, wtot);
            // advance multi-index
            let mut d = 0;
            loop {
                if d == q {
                    return acc;
                }
                idx[d] += 1;
                if idx[d] < k {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
        }
    }

    /// Scalar convenience wrapper.
    pub fn expect_scalar(
        &self,
        mean: &[f64],
        variance: &[f64],
        mut f: impl FnMut(&[f64]) -> f64,
    ) -> f64 {
        self.expect(mean, variance, |x| f(x), |acc, v, w| *acc += v * w, 0.0)
    }
}
