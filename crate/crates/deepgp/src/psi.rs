//! Closed-form expectations of kernel matrices under a diagonal Gaussian
//! posterior over the inputs: the quantities that make the collapsed layer
//! bounds tractable.
//!
//! With q(x) = N(μ, diag(s)) and inducing inputs Z (rows z⁽ᵐ⁾):
//!
//!   psi0 = Σ_n E[k(x⁽ⁿ⁾, x⁽ⁿ⁾)]
//!   Psi1[n,m] = E[k(x⁽ⁿ⁾, z⁽ᵐ⁾)]
//!   Phi[m,m'] = Σ_n E[k(x⁽ⁿ⁾, z⁽ᵐ⁾)·k(x⁽ⁿ⁾, z⁽ᵐ'⁾)]
//!
//! Every statistic is an exact sum of per-point terms; the batch entry
//! points below fold the per-point primitives in row order so that sharded
//! execution can reproduce them.

use crate::error::{Error, Result};
use crate::kernel::{KernelFamily, KernelSpec};
use crate::posterior::DiagGaussianPosterior;
use crate::scalar::Real;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

#[derive(Debug, Clone)]
pub struct PsiStats<F> {
    /// Tr E[K_FF]
    pub psi0: F,
    /// E[K_FU], N×M
    pub psi1: Array2<F>,
    /// E[K_FUᵀ K_FU], M×M
    pub phi: Array2<F>,
}

/// Adjoints of a scalar contraction ⟨upstream, stats⟩ for `psi_gradients`.
#[derive(Debug, Clone)]
pub struct PsiUpstream<'a, F> {
    pub psi0: F,
    pub psi1: ArrayView2<'a, F>,
    pub phi: ArrayView2<'a, F>,
}

/// Gradients of ⟨upstream, stats⟩ with respect to everything psi statistics
/// depend on. Kernel hyperparameter gradients are in natural (not log) space.
#[derive(Debug, Clone)]
pub struct PsiGrads<F> {
    pub means: Array2<F>,
    pub shared_variance: Array1<F>,
    pub z: Array2<F>,
    pub variance: F,
    pub lengthscales: Array1<F>,
    pub bias: F,
}

impl<F: Real> PsiGrads<F> {
    fn zeros(n: usize, q: usize, m: usize, spec: &KernelSpec<F>) -> Self {
        PsiGrads {
            means: Array2::zeros((n, q)),
            shared_variance: Array1::zeros(q),
            z: Array2::zeros((m, q)),
            variance: F::zero(),
            lengthscales: Array1::zeros(match spec.family() {
                KernelFamily::ExpQuad => q,
                KernelFamily::Linear => 0,
            }),
            bias: F::zero(),
        }
    }
}

fn check_shapes<F: Real>(spec: &KernelSpec<F>, q_dim: usize, z: &ArrayView2<F>) -> Result<()> {
    if z.ncols() != q_dim {
        return Err(Error::shape(
            "psi",
            format!("Z has {} columns, posterior has {}", z.ncols(), q_dim),
        ));
    }
    if let Some(k) = spec.pinned_dim() {
        if k != q_dim {
            return Err(Error::shape(
                "psi",
                format!("kernel expects {} input columns, got {}", k, q_dim),
            ));
        }
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "psi inducing inputs" });
    }
    Ok(())
}

/// Statistics of a single point, q(x) = N(μ, diag(s)).
/// Returns (psi0 contribution, Psi1 row, per-point Phi M×M).
pub fn per_point_psi<F: Real>(
    spec: &KernelSpec<F>,
    mean: &ArrayView1<F>,
    variance: &ArrayView1<F>,
    z: &ArrayView2<F>,
) -> Result<(F, Array1<F>, Array2<F>)> {
    check_shapes(spec, mean.len(), z)?;
    if variance.len() != mean.len() {
        return Err(Error::shape("psi", "variance length differs from mean"));
    }
    if variance.iter().any(|v| *v < F::zero() || !v.is_finite()) {
        return Err(Error::invalid("psi", "variance must be nonnegative"));
    }
    let m = z.nrows();
    let mut psi1 = Array1::<F>::zeros(m);
    let mut phi = Array2::<F>::zeros((m, m));
    let psi0;
    let half = F::c(0.5);
    match spec {
        KernelSpec::ExpQuad {
            variance: v,
            lengthscales,
        } => {
            psi0 = *v;
            // Psi1[m] = v·Π_q (t/(t+s))^½ exp(−½ (μ−z)²/(t+s)),  t = ℓ²
            for i in 0..m {
                let mut log_term = F::zero();
                for q in 0..mean.len() {
                    let t = lengthscales[q] * lengthscales[q];
                    let r = t + variance[q];
                    let d = mean[q] - z[(i, q)];
                    log_term = log_term + half * (t.ln() - r.ln()) - half * d * d / r;
                }
                psi1[i] = *v * log_term.exp();
            }
            // Phi[m,m'] = v²·Π_q (t/(t+2s))^½ exp(−dz²/(4t) − (μ−z̄)²/(t+2s))
            for i in 0..m {
                for j in 0..=i {
                    let mut log_term = F::zero();
                    for q in 0..mean.len() {
                        let t = lengthscales[q] * lengthscales[q];
                        let g = t + F::c(2.0) * variance[q];
                        let dz = z[(i, q)] - z[(j, q)];
                        let zbar = half * (z[(i, q)] + z[(j, q)]);
                        let dm = mean[q] - zbar;
                        log_term = log_term + half * (t.ln() - g.ln())
                            - dz * dz / (F::c(4.0) * t)
                            - dm * dm / g;
                    }
                    let val = *v * *v * log_term.exp();
                    phi[(i, j)] = val;
                    phi[(j, i)] = val;
                }
            }
        }
        KernelSpec::Linear { variance: v, bias } => {
            let mut mu_sq = F::zero();
            for q in 0..mean.len() {
                mu_sq = mu_sq + mean[q] * mean[q] + variance[q];
            }
            psi0 = *v * mu_sq + *bias;
            // h_m = z⁽ᵐ⁾ᵀμ
            let h = z.dot(mean);
            for i in 0..m {
                psi1[i] = *v * h[i] + *bias;
            }
            // Phi[m,m'] = v²(h_m h_m' + z⁽ᵐ⁾ᵀdiag(s)z⁽ᵐ'⁾) + v·bias·(h_m + h_m') + bias²
            for i in 0..m {
                for j in 0..=i {
                    let mut zsz = F::zero();
                    for q in 0..mean.len() {
                        zsz = zsz + z[(i, q)] * variance[q] * z[(j, q)];
                    }
                    let val =
                        *v * *v * (h[i] * h[j] + zsz) + *v * *bias * (h[i] + h[j]) + *bias * *bias;
                    phi[(i, j)] = val;
                    phi[(j, i)] = val;
                }
            }
        }
    }
    Ok((psi0, psi1, phi))
}

/// Batch statistics over a whole posterior: the exact row-order fold of
/// [`per_point_psi`].
pub fn compute_psi<F: Real>(
    spec: &KernelSpec<F>,
    q: &DiagGaussianPosterior<F>,
    z: &ArrayView2<F>,
) -> Result<PsiStats<F>> {
    check_shapes(spec, q.dim(), z)?;
    let n = q.n_points();
    let m = z.nrows();
    let mut stats = PsiStats {
        psi0: F::zero(),
        psi1: Array2::zeros((n, m)),
        phi: Array2::zeros((m, m)),
    };
    let var = q.shared_variance().view();
    for nn in 0..n {
        let mean = q.means().row(nn);
        let (p0, row, phi_n) = per_point_psi(spec, &mean, &var, z)?;
        stats.psi0 = stats.psi0 + p0;
        stats.psi1.row_mut(nn).assign(&row);
        stats.phi = stats.phi + &phi_n;
    }
    Ok(stats)
}

/// Per-point gradient accumulation: adds the gradients of
/// u0·psi0⁽ⁿ⁾ + ⟨u1_row, Psi1 row⟩ + ⟨u_phi, Phi⁽ⁿ⁾⟩ into `grads`
/// (`grads.means` row `row_index`).
#[allow(clippy::too_many_arguments)]
pub fn accumulate_point_psi_gradients<F: Real>(
    spec: &KernelSpec<F>,
    mean: &ArrayView1<F>,
    variance: &ArrayView1<F>,
    z: &ArrayView2<F>,
    u0: F,
    u1_row: &ArrayView1<F>,
    u_phi: &ArrayView2<F>,
    row_index: usize,
    grads: &mut PsiGrads<F>,
) -> Result<()> {
    let (_, psi1_row, phi_n) = per_point_psi(spec, mean, variance, z)?;
    accumulate_point_psi_gradients_with(
        spec, mean, variance, z, u0, u1_row, u_phi, &psi1_row, &phi_n, row_index, grads,
    )
}

/// [`accumulate_point_psi_gradients`] with the point's forward statistics
/// supplied by the caller (the scatter path computes them once per point).
#[allow(clippy::too_many_arguments)]
pub fn accumulate_point_psi_gradients_with<F: Real>(
    spec: &KernelSpec<F>,
    mean: &ArrayView1<F>,
    variance: &ArrayView1<F>,
    z: &ArrayView2<F>,
    u0: F,
    u1_row: &ArrayView1<F>,
    u_phi: &ArrayView2<F>,
    psi1_row: &Array1<F>,
    phi_n: &Array2<F>,
    row_index: usize,
    grads: &mut PsiGrads<F>,
) -> Result<()> {
    let m = z.nrows();
    let nq = mean.len();
    let half = F::c(0.5);
    let two = F::c(2.0);
    match spec {
        KernelSpec::ExpQuad {
            variance: v,
            lengthscales,
        } => {
            // psi0 part: psi0⁽ⁿ⁾ = v
            grads.variance = grads.variance + u0;
            for i in 0..m {
                let w = u1_row[i] * psi1_row[i];
                if w == F::zero() {
                    continue;
                }
                grads.variance = grads.variance + w / *v;
                for q in 0..nq {
                    let l = lengthscales[q];
                    let t = l * l;
                    let r = t + variance[q];
                    let d = mean[q] - z[(i, q)];
                    let slope = w * d / r;
                    grads.means[(row_index, q)] = grads.means[(row_index, q)] - slope;
                    grads.z[(i, q)] = grads.z[(i, q)] + slope;
                    grads.shared_variance[q] =
                        grads.shared_variance[q] + w * (half * d * d / (r * r) - half / r);
                    // d/dℓ = 2ℓ · d/dt
                    let dt = w * (half * (F::one() / t - F::one() / r) + half * d * d / (r * r));
                    grads.lengthscales[q] = grads.lengthscales[q] + two * l * dt;
                }
            }

            // Phi part: Phi⁽ⁿ⁾ is symmetric and the (i,j)/(j,i) entries share
            // every gradient expression, so fold the pair with summed weights
            for i in 0..m {
                for j in 0..=i {
                    let wu = if i == j {
                        u_phi[(i, i)]
                    } else {
                        u_phi[(i, j)] + u_phi[(j, i)]
                    };
                    let w = wu * phi_n[(i, j)];
                    if w == F::zero() {
                        continue;
                    }
                    grads.variance = grads.variance + two * w / *v;
                    for q in 0..nq {
                        let l = lengthscales[q];
                        let t = l * l;
                        let g = t + two * variance[q];
                        let dz = z[(i, q)] - z[(j, q)];
                        let zbar = half * (z[(i, q)] + z[(j, q)]);
                        let dm = mean[q] - zbar;
                        grads.means[(row_index, q)] =
                            grads.means[(row_index, q)] - two * w * dm / g;
                        grads.shared_variance[q] = grads.shared_variance[q]
                            + w * (two * dm * dm / (g * g) - F::one() / g);
                        // z gradient: dz term is antisymmetric, z̄ term symmetric
                        grads.z[(i, q)] =
                            grads.z[(i, q)] + w * (-dz / (two * t) + dm / g);
                        grads.z[(j, q)] = grads.z[(j, q)] + w * (dz / (two * t) + dm / g);
                        let dt = w * (half * (F::one() / t - F::one() / g)
                            + dz * dz / (F::c(4.0) * t * t)
                            + dm * dm / (g * g));
                        grads.lengthscales[q] = grads.lengthscales[q] + two * l * dt;
                    }
                }
            }
        }
        KernelSpec::Linear { variance: v, bias } => {
            // psi0⁽ⁿ⁾ = v(μᵀμ + Σs) + bias
            let mut mu_sq = F::zero();
            for q in 0..nq {
                mu_sq = mu_sq + mean[q] * mean[q] + variance[q];
            }
            grads.variance = grads.variance + u0 * mu_sq;
            grads.bias = grads.bias + u0;
            for q in 0..nq {
                grads.means[(row_index, q)] =
                    grads.means[(row_index, q)] + u0 * *v * two * mean[q];
                grads.shared_variance[q] = grads.shared_variance[q] + u0 * *v;
            }

            // Psi1[m] = v·h_m + bias
            let h = z.dot(mean);
            for i in 0..m {
                let u = u1_row[i];
                if u == F::zero() {
                    continue;
                }
                grads.variance = grads.variance + u * h[i];
                grads.bias = grads.bias + u;
                for q in 0..nq {
                    grads.means[(row_index, q)] =
                        grads.means[(row_index, q)] + u * *v * z[(i, q)];
                    grads.z[(i, q)] = grads.z[(i, q)] + u * *v * mean[q];
                }
            }

            // Phi⁽ⁿ⁾[i,j] = v²(h_i h_j + z⁽ⁱ⁾ᵀdiag(s)z⁽ʲ⁾) + v·bias·(h_i+h_j) + bias²
            let mut dh = Array1::<F>::zeros(m);
            for i in 0..m {
                for j in 0..=i {
                    let u = if i == j {
                        u_phi[(i, i)]
                    } else {
                        u_phi[(i, j)] + u_phi[(j, i)]
                    };
                    if u == F::zero() {
                        continue;
                    }
                    let mut zsz = F::zero();
                    for q in 0..nq {
                        zsz = zsz + z[(i, q)] * variance[q] * z[(j, q)];
                    }
                    grads.variance =
                        grads.variance + u * (two * *v * (h[i] * h[j] + zsz) + *bias * (h[i] + h[j]));
                    grads.bias = grads.bias + u * (*v * (h[i] + h[j]) + two * *bias);
                    dh[i] = dh[i] + u * (*v * *v * h[j] + *v * *bias);
                    dh[j] = dh[j] + u * (*v * *v * h[i] + *v * *bias);
                    for q in 0..nq {
                        grads.shared_variance[q] =
                            grads.shared_variance[q] + u * *v * *v * z[(i, q)] * z[(j, q)];
                        grads.z[(i, q)] =
                            grads.z[(i, q)] + u * *v * *v * variance[q] * z[(j, q)];
                        grads.z[(j, q)] =
                            grads.z[(j, q)] + u * *v * *v * variance[q] * z[(i, q)];
                    }
                }
            }
            // h_m = z⁽ᵐ⁾ᵀμ chains into both means and Z
            for i in 0..m {
                if dh[i] == F::zero() {
                    continue;
                }
                for q in 0..nq {
                    grads.means[(row_index, q)] =
                        grads.means[(row_index, q)] + dh[i] * z[(i, q)];
                    grads.z[(i, q)] = grads.z[(i, q)] + dh[i] * mean[q];
                }
            }
        }
    }
    Ok(())
}

/// Gradient of ⟨upstream, compute_psi(spec, q, z)⟩ with respect to the
/// posterior means and shared variance, Z, and the kernel hyperparameters.
pub fn psi_gradients<F: Real>(
    spec: &KernelSpec<F>,
    q: &DiagGaussianPosterior<F>,
    z: &ArrayView2<F>,
    upstream: &PsiUpstream<'_, F>,
) -> Result<PsiGrads<F>> {
    check_shapes(spec, q.dim(), z)?;
    let (n, m) = (q.n_points(), z.nrows());
    if upstream.psi1.nrows() != n || upstream.psi1.ncols() != m {
        return Err(Error::shape("psi_gradients", "upstream Psi1 shape"));
    }
    if upstream.phi.nrows() != m || upstream.phi.ncols() != m {
        return Err(Error::shape("psi_gradients", "upstream Phi shape"));
    }
    let mut grads = PsiGrads::zeros(n, q.dim(), m, spec);
    let var = q.shared_variance().view();
    for nn in 0..n {
        let mean = q.means().row(nn);
        accumulate_point_psi_gradients(
            spec,
            &mean,
            &var,
            z,
            upstream.psi0,
            &upstream.psi1.row(nn),
            &upstream.phi,
            nn,
            &mut grads,
        )?;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn psi0_is_n_times_variance_for_expquad() {
        let spec = KernelSpec::expquad(1.7f64, array![1.0, 2.0]).unwrap();
        let q = DiagGaussianPosterior::new(
            array![[0.1, 0.2], [1.0, -0.5], [0.0, 0.0]],
            array![0.3, 0.4],
        )
        .unwrap();
        let z = array![[0.0, 0.0], [1.0, 1.0]];
        let stats = compute_psi(&spec, &q, &z.view()).unwrap();
        assert!((stats.psi0 - 5.1).abs() < 1e-12);
    }

    #[test]
    fn small_variance_limit_recovers_kernel() {
        for spec in [
            KernelSpec::expquad(1.3f64, array![0.8, 1.2]).unwrap(),
            KernelSpec::linear(0.9, 0.2).unwrap(),
        ] {
            let means = array![[0.4, -0.2], [1.1, 0.3]];
            let q =
                DiagGaussianPosterior::new(means.clone(), array![1e-12, 1e-12]).unwrap();
            let z = array![[0.0, 0.1], [0.5, -0.4], [1.0, 0.9]];
            let stats = compute_psi(&spec, &q, &z.view()).unwrap();
            let k = spec.eval(&means.view(), &z.view()).unwrap();
            for (a, b) in stats.psi1.iter().zip(k.iter()) {
                assert!((a - b).abs() / b.abs().max(1e-12) < 1e-6);
            }
        }
    }

    #[test]
    fn batch_equals_per_point_fold_exactly() {
        let spec = KernelSpec::expquad(0.7, array![1.1]).unwrap();
        let q = DiagGaussianPosterior::new(
            array![[0.0], [0.5], [1.0], [-0.3], [2.0]],
            array![0.25],
        )
        .unwrap();
        let z = array![[0.2], [0.9]];
        let batch = compute_psi(&spec, &q, &z.view()).unwrap();
        let mut psi0 = 0.0;
        let mut phi = ndarray::Array2::<f64>::zeros((2, 2));
        for nn in 0..5 {
            let (p0, row, phi_n) = per_point_psi(
                &spec,
                &q.means().row(nn),
                &q.shared_variance().view(),
                &z.view(),
            )
            .unwrap();
            psi0 += p0;
            phi = phi + &phi_n;
            for mm in 0..2 {
                assert_eq!(batch.psi1[(nn, mm)], row[mm]);
            }
        }
        assert!((batch.psi0 - psi0).abs() < 1e-12);
        for (a, b) in batch.phi.iter().zip(phi.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = KernelSpec::linear(1.1, 0.3).unwrap();
        let q = DiagGaussianPosterior::new(array![[0.4, 0.1]], array![0.2, 0.5]).unwrap();
        let z = array![[0.3, -0.2], [0.8, 0.4]];
        let psi1_up = ndarray::Array2::<f64>::zeros((1, 2));
        let phi_up = ndarray::Array2::<f64>::zeros((2, 2));
        let up = PsiUpstream {
            psi0: 0.0,
            psi1: psi1_up.view(),
            phi: phi_up.view(),
        };
        let g = psi_gradients(&spec, &q, &z.view(), &up).unwrap();
        assert!(g.means.iter().all(|v| *v == 0.0));
        assert!(g.z.iter().all(|v| *v == 0.0));
        assert_eq!(g.variance, 0.0);
    }

    #[test]
    fn expquad_psi0_upstream_leaves_means_and_z_untouched() {
        let spec = KernelSpec::expquad(1.1, array![0.9]).unwrap();
        let q = DiagGaussianPosterior::new(array![[0.4], [0.2]], array![0.2]).unwrap();
        let z = array![[0.3], [0.8]];
        let psi1_up = ndarray::Array2::<f64>::zeros((2, 2));
        let phi_up = ndarray::Array2::<f64>::zeros((2, 2));
        let up = PsiUpstream {
            psi0: 1.0,
            psi1: psi1_up.view(),
            phi: phi_up.view(),
        };
        let g = psi_gradients(&spec, &q, &z.view(), &up).unwrap();
        assert!(g.means.iter().all(|v| *v == 0.0));
        assert!(g.z.iter().all(|v| *v == 0.0));
        assert!(g.shared_variance.iter().all(|v| *v == 0.0));
        assert_eq!(g.variance, 2.0); // u0 per point, two points
    }
}
