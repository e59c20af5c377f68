//! Covariance functions: exponentiated quadratic with ARD lengthscales and
//! the linear kernel with an optional bias. Hyperparameters are kept in
//! natural space here; the parameter packer stores them in log space.

use crate::error::{Error, Result};
use crate::scalar::Real;
use ndarray::{Array1, Array2, ArrayView2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    ExpQuad,
    Linear,
}

/// A covariance function together with its hyperparameters.
#[derive(Debug, Clone)]
pub enum KernelSpec<F> {
    /// k(x, x') = variance · exp(−½ Σ_q (x_q − x'_q)² / ℓ_q²)
    ExpQuad {
        variance: F,
        lengthscales: Array1<F>,
    },
    /// k(x, x') = variance · xᵀx' + bias
    Linear { variance: F, bias: F },
}

/// Gradients of a contraction Σ_ij upstream_ij · K_ij with respect to the
/// kernel hyperparameters and both input matrices.
#[derive(Debug, Clone)]
pub struct KernelGrads<F> {
    pub variance: F,
    pub lengthscales: Array1<F>,
    pub bias: F,
    pub wrt_a: Array2<F>,
    pub wrt_b: Array2<F>,
}

fn check_finite<F: Real>(m: &ArrayView2<F>, context: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context })
    }
}

impl<F: Real> KernelSpec<F> {
    pub fn expquad(variance: F, lengthscales: Array1<F>) -> Result<Self> {
        if !(variance > F::zero()) || !variance.is_finite() {
            return Err(Error::invalid("kernel", "variance must be positive"));
        }
        if lengthscales.is_empty() || lengthscales.iter().any(|l| !(*l > F::zero()) || !l.is_finite()) {
            return Err(Error::invalid("kernel", "lengthscales must be positive"));
        }
        Ok(KernelSpec::ExpQuad {
            variance,
            lengthscales,
        })
    }

    pub fn linear(variance: F, bias: F) -> Result<Self> {
        if !(variance > F::zero()) || !variance.is_finite() {
            return Err(Error::invalid("kernel", "variance must be positive"));
        }
        if bias < F::zero() || !bias.is_finite() {
            return Err(Error::invalid("kernel", "bias must be nonnegative"));
        }
        Ok(KernelSpec::Linear { variance, bias })
    }

    pub fn family(&self) -> KernelFamily {
        match self {
            KernelSpec::ExpQuad { .. } => KernelFamily::ExpQuad,
            KernelSpec::Linear { .. } => KernelFamily::Linear,
        }
    }

    pub fn variance(&self) -> F {
        match self {
            KernelSpec::ExpQuad { variance, .. } | KernelSpec::Linear { variance, .. } => *variance,
        }
    }

    /// Input dimensionality pinned by the hyperparameters, if any. The linear
    /// kernel accepts any width.
    pub fn pinned_dim(&self) -> Option<usize> {
        match self {
            KernelSpec::ExpQuad { lengthscales, .. } => Some(lengthscales.len()),
            KernelSpec::Linear { .. } => None,
        }
    }

    fn check_inputs(&self, a: &ArrayView2<F>, b: &ArrayView2<F>) -> Result<()> {
        if a.ncols() != b.ncols() {
            return Err(Error::shape(
                "kernel_eval",
                format!("inputs have {} and {} columns", a.ncols(), b.ncols()),
            ));
        }
        if let Some(q) = self.pinned_dim() {
            if q != a.ncols() {
                return Err(Error::shape(
                    "kernel_eval",
                    format!("kernel expects {} input columns, got {}", q, a.ncols()),
                ));
            }
        }
        check_finite(a, "kernel_eval")?;
        check_finite(b, "kernel_eval")
    }

    /// n×m covariance matrix between the rows of `a` and `b`.
    pub fn eval(&self, a: &ArrayView2<F>, b: &ArrayView2<F>) -> Result<Array2<F>> {
        self.check_inputs(a, b)?;
        let (n, m) = (a.nrows(), b.nrows());
        let mut k = Array2::<F>::zeros((n, m));
        match self {
            KernelSpec::ExpQuad {
                variance,
                lengthscales,
            } => {
                let half = F::c(0.5);
                for i in 0..n {
                    for j in 0..m {
                        let mut d2 = F::zero();
                        for q in 0..a.ncols() {
                            let d = (a[(i, q)] - b[(j, q)]) / lengthscales[q];
                            d2 = d2 + d * d;
                        }
                        k[(i, j)] = *variance * (-half * d2).exp();
                    }
                }
            }
            KernelSpec::Linear { variance, bias } => {
                k = a.dot(&b.t()) * *variance;
                k.mapv_inplace(|v| v + *bias);
            }
        }
        Ok(k)
    }

    /// Diagonal of the self-covariance, k(x, x) for each row.
    pub fn eval_diag(&self, a: &ArrayView2<F>) -> Result<Array1<F>> {
        check_finite(a, "kernel_eval")?;
        match self {
            KernelSpec::ExpQuad { variance, .. } => Ok(Array1::from_elem(a.nrows(), *variance)),
            KernelSpec::Linear { variance, bias } => {
                let mut out = Array1::<F>::zeros(a.nrows());
                for i in 0..a.nrows() {
                    let mut s = F::zero();
                    for q in 0..a.ncols() {
                        s = s + a[(i, q)] * a[(i, q)];
                    }
                    out[i] = *variance * s + *bias;
                }
                Ok(out)
            }
        }
    }

    /// Gradients of Σ_ij upstream_ij·K_ij. `wrt_a` and `wrt_b` are reported
    /// separately; when the same matrix was passed twice the caller adds them.
    pub fn gradients(
        &self,
        a: &ArrayView2<F>,
        b: &ArrayView2<F>,
        upstream: &ArrayView2<F>,
    ) -> Result<KernelGrads<F>> {
        self.check_inputs(a, b)?;
        if upstream.nrows() != a.nrows() || upstream.ncols() != b.nrows() {
            return Err(Error::shape(
                "kernel_gradients",
                format!(
                    "upstream is {}×{}, expected {}×{}",
                    upstream.nrows(),
                    upstream.ncols(),
                    a.nrows(),
                    b.nrows()
                ),
            ));
        }
        let (n, m, nq) = (a.nrows(), b.nrows(), a.ncols());
        let mut grads = KernelGrads {
            variance: F::zero(),
            lengthscales: Array1::zeros(if self.family() == KernelFamily::ExpQuad {
                nq
            } else {
                0
            }),
            bias: F::zero(),
            wrt_a: Array2::zeros((n, nq)),
            wrt_b: Array2::zeros((m, nq)),
        };
        match self {
            KernelSpec::ExpQuad {
                variance,
                lengthscales,
            } => {
                let k = self.eval(a, b)?;
                for i in 0..n {
                    for j in 0..m {
                        let w = upstream[(i, j)] * k[(i, j)];
                        if w == F::zero() {
                            continue;
                        }
                        grads.variance = grads.variance + w / *variance;
                        for q in 0..nq {
                            let l = lengthscales[q];
                            let d = a[(i, q)] - b[(j, q)];
                            // ∂/∂ℓ_q of −½d²/ℓ² is d²/ℓ³
                            grads.lengthscales[q] = grads.lengthscales[q] + w * d * d / (l * l * l);
                            let slope = w * d / (l * l);
                            grads.wrt_a[(i, q)] = grads.wrt_a[(i, q)] - slope;
                            grads.wrt_b[(j, q)] = grads.wrt_b[(j, q)] + slope;
                        }
                    }
                }
            }
            KernelSpec::Linear { variance, .. } => {
                // T = Σ u_ij (v aᵢᵀb_j + bias)
                let ab = a.dot(&b.t());
                grads.variance = frob(&upstream.to_owned(), &ab);
                grads.bias = upstream.iter().copied().sum();
                grads.wrt_a = upstream.dot(b) * *variance;
                grads.wrt_b = upstream.t().dot(a) * *variance;
            }
        }
        Ok(grads)
    }
}

fn frob<F: Real>(a: &Array2<F>, b: &Array2<F>) -> F {
    a.iter().zip(b.iter()).map(|(x, y)| *x * *y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, n: usize, q: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, q), |_| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn expquad_zero_distance_is_variance() {
        let k = KernelSpec::expquad(1.7f64, array![0.3, 2.0]).unwrap();
        let x = array![[0.4, -1.0]];
        let kk = k.eval(&x.view(), &x.view()).unwrap();
        assert!((kk[(0, 0)] - 1.7).abs() < 1e-15);
    }

    #[test]
    fn expquad_unit_analytic_value() {
        let k = KernelSpec::expquad(1.0, array![1.0, 1.0]).unwrap();
        let a = array![[1.0, 0.0]];
        let b = array![[0.0, 1.0]];
        let kk = k.eval(&a.view(), &b.view()).unwrap();
        assert!((kk[(0, 0)] - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn linear_analytic_value() {
        let k = KernelSpec::linear(2.0f64, 0.0).unwrap();
        let a = array![[1.0, 2.0]];
        let b = array![[3.0, 1.0]];
        let kk = k.eval(&a.view(), &b.view()).unwrap();
        assert!((kk[(0, 0)] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_and_nonfinite_rejected() {
        let k = KernelSpec::expquad(1.0, array![1.0]).unwrap();
        let a = array![[1.0, 2.0]];
        assert!(k.eval(&a.view(), &a.view()).is_err());
        let k2 = KernelSpec::linear(1.0, 0.0).unwrap();
        let bad = array![[f64::NAN]];
        assert!(k2.eval(&bad.view(), &bad.view()).is_err());
    }

    #[test]
    fn self_covariance_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let n = 2 + (trial % 6);
            let a = rand_mat(&mut rng, n, 2);
            let spec: KernelSpec<f64> = if trial % 2 == 0 {
                KernelSpec::expquad(0.5 + trial as f64 * 0.1, array![0.7, 1.3]).unwrap()
            } else {
                KernelSpec::linear(0.8, 0.2).unwrap()
            };
            let k = spec.eval(&a.view(), &a.view()).unwrap();
            for i in 0..n {
                for j in 0..n {
                    assert!((k[(i, j)] - k[(j, i)]).abs() < 1e-12);
                }
            }
            // PSD up to jitter: Cholesky of K + 1e-10 I must succeed
            let mut kj = k.clone();
            for i in 0..n {
                kj[(i, i)] += 1e-10;
            }
            assert!(crate::linalg::cholesky(&kj.view()).is_some());
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let k = KernelSpec::expquad(1.3, array![0.8, 1.1]).unwrap();
        let a = array![[0.1, 0.2], [0.5, -0.3]];
        let up = Array2::<f64>::zeros((2, 2));
        let g = k.gradients(&a.view(), &a.view(), &up.view()).unwrap();
        assert_eq!(g.variance, 0.0);
        assert!(g.lengthscales.iter().all(|v| *v == 0.0));
        assert!(g.wrt_a.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lengthscale_gradient_zero_at_zero_distance() {
        let k = KernelSpec::expquad(1.3, array![0.8]).unwrap();
        let a = array![[0.4]];
        let up = array![[1.0]];
        let g = k.gradients(&a.view(), &a.view(), &up.view()).unwrap();
        assert_eq!(g.lengthscales[0], 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = rand_mat(&mut rng, 3, 2);
        let b0 = rand_mat(&mut rng, 4, 2);
        let up = rand_mat(&mut rng, 3, 4);
        let h = 1e-5;

        for family in 0..2 {
            let make = |v: f64, l1: f64, l2: f64, bias: f64| -> KernelSpec<f64> {
                if family == 0 {
                    KernelSpec::expquad(v, array![l1, l2]).unwrap()
                } else {
                    KernelSpec::linear(v, bias).unwrap()
                }
            };
            let contract = |spec: &KernelSpec<f64>, a: &Array2<f64>, b: &Array2<f64>| -> f64 {
                let k = spec.eval(&a.view(), &b.view()).unwrap();
                k.iter().zip(up.iter()).map(|(x, u)| x * u).sum()
            };
            let base = make(1.2, 0.9, 1.4, 0.3);
            let g = base.gradients(&a0.view(), &b0.view(), &up.view()).unwrap();

            let fd_v = (contract(&make(1.2 + h, 0.9, 1.4, 0.3), &a0, &b0)
                - contract(&make(1.2 - h, 0.9, 1.4, 0.3), &a0, &b0))
                / (2.0 * h);
            assert!((g.variance - fd_v).abs() / fd_v.abs().max(1e-8) < 1e-6);

            if family == 0 {
                let fd_l = (contract(&make(1.2, 0.9 + h, 1.4, 0.3), &a0, &b0)
                    - contract(&make(1.2, 0.9 - h, 1.4, 0.3), &a0, &b0))
                    / (2.0 * h);
                assert!((g.lengthscales[0] - fd_l).abs() / fd_l.abs().max(1e-8) < 1e-6);
            } else {
                let fd_b = (contract(&make(1.2, 0.9, 1.4, 0.3 + h), &a0, &b0)
                    - contract(&make(1.2, 0.9, 1.4, 0.3 - h), &a0, &b0))
                    / (2.0 * h);
                assert!((g.bias - fd_b).abs() / fd_b.abs().max(1e-8) < 1e-6);
            }

            for (i, q) in [(0usize, 0usize), (2, 1)] {
                let mut ap = a0.clone();
                ap[(i, q)] += h;
                let mut am = a0.clone();
                am[(i, q)] -= h;
                let fd = (contract(&base, &ap, &b0) - contract(&base, &am, &b0)) / (2.0 * h);
                assert!(
                    (g.wrt_a[(i, q)] - fd).abs() / fd.abs().max(1e-8) < 1e-6,
                    "family {family} input grad"
                );
            }
            for (j, q) in [(1usize, 0usize), (3, 1)] {
                let mut bp = b0.clone();
                bp[(j, q)] += h;
                let mut bm = b0.clone();
                bm[(j, q)] -= h;
                let fd = (contract(&base, &a0, &bp) - contract(&base, &a0, &bm)) / (2.0 * h);
                assert!((g.wrt_b[(j, q)] - fd).abs() / fd.abs().max(1e-8) < 1e-6);
            }
        }
    }
}
