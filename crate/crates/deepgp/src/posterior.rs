//! Diagonal Gaussian variational posteriors over a layer's latent points:
//! per-point means with one variance vector shared by every point.

use crate::error::{Error, Result};
use crate::scalar::Real;
use ndarray::{Array1, Array2, ArrayView2};

/// q(X) = Π_n N(x⁽ⁿ⁾; μ⁽ⁿ⁾, diag(σ²)) with σ² shared across points.
///
/// A zero entry in `shared_variance` denotes an observed (deterministic)
/// coordinate; entropy and KL are undefined there and error out.
#[derive(Debug, Clone)]
pub struct DiagGaussianPosterior<F> {
    means: Array2<F>,
    shared_variance: Array1<F>,
}

impl<F: Real> DiagGaussianPosterior<F> {
    pub fn new(means: Array2<F>, shared_variance: Array1<F>) -> Result<Self> {
        if means.nrows() == 0 {
            return Err(Error::invalid("posterior", "needs at least one point"));
        }
        if means.ncols() != shared_variance.len() {
            return Err(Error::shape(
                "posterior",
                format!(
                    "means have {} columns, variance has {} entries",
                    means.ncols(),
                    shared_variance.len()
                ),
            ));
        }
        if !means.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "posterior means" });
        }
        if shared_variance.iter().any(|v| *v < F::zero() || !v.is_finite()) {
            return Err(Error::invalid("posterior", "variance must be nonnegative"));
        }
        Ok(Self {
            means,
            shared_variance,
        })
    }

    /// Deterministic points: zero variance in every coordinate.
    pub fn delta(points: &ArrayView2<F>) -> Result<Self> {
        Self::new(points.to_owned(), Array1::zeros(points.ncols()))
    }

    pub fn n_points(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn means(&self) -> &Array2<F> {
        &self.means
    }

    pub fn shared_variance(&self) -> &Array1<F> {
        &self.shared_variance
    }

    pub fn trace_variance(&self) -> F {
        self.shared_variance.iter().copied().sum()
    }

    /// Restrict to a contiguous range of rows (shares the variance vector).
    pub fn slice_rows(&self, begin: usize, end: usize) -> Result<Self> {
        if begin >= end || end > self.n_points() {
            return Err(Error::invalid("posterior", "bad row range"));
        }
        Self::new(
            self.means.slice(ndarray::s![begin..end, ..]).to_owned(),
            self.shared_variance.clone(),
        )
    }

    fn require_positive_variance(&self, context: &'static str) -> Result<()> {
        if self.shared_variance.iter().all(|v| *v > F::zero()) {
            Ok(())
        } else {
            Err(Error::invalid(context, "variance must be strictly positive"))
        }
    }

    /// KL(q ‖ N(0, I)) summed over points:
    /// Σ_n ½ Σ_q (σ²_q + μ⁽ⁿ⁾_q² − 1 − ln σ²_q). Nonnegative.
    pub fn kl_to_standard_normal(&self) -> Result<F> {
        self.require_positive_variance("kl_to_standard_normal")?;
        let n = F::c(self.n_points() as f64);
        let half = F::c(0.5);
        let mut per_dim = F::zero();
        for v in self.shared_variance.iter() {
            per_dim = per_dim + *v - F::one() - v.ln();
        }
        let mut mean_sq = F::zero();
        for m in self.means.iter() {
            mean_sq = mean_sq + *m * *m;
        }
        Ok(half * (n * per_dim + mean_sq))
    }

    /// Entropy N·½·Σ_q ln(2πe·σ²_q).
    pub fn entropy(&self) -> Result<F> {
        self.require_positive_variance("entropy")?;
        let n = F::c(self.n_points() as f64);
        let half = F::c(0.5);
        let two_pi_e = F::c(2.0) * F::PI() * F::E();
        let mut s = F::zero();
        for v in self.shared_variance.iter() {
            s = s + (two_pi_e * *v).ln();
        }
        Ok(n * half * s)
    }
}
