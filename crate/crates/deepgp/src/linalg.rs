//! Dense linear algebra for the small (M×M) systems the collapsed bounds
//! need: Cholesky factorization, triangular solves and log-determinants.
//! Matrices here never exceed the inducing-point count, so a straightforward
//! O(M³) factorization is adequate.

use crate::scalar::Real;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<F> {
    l: Array2<F>,
}

/// Plain factorization; returns `None` when a pivot is not strictly positive.
pub fn cholesky<F: Real>(a: &ArrayView2<F>) -> Option<Cholesky<F>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<F>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag = diag - l[(j, k)] * l[(j, k)];
        }
        if !(diag > F::zero()) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s = s - l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(Cholesky { l })
}

impl<F: Real> Cholesky<F> {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn lower(&self) -> &Array2<F> {
        &self.l
    }

    /// log |A| = 2 Σ log L_ii
    pub fn log_det(&self) -> F {
        let mut s = F::zero();
        for i in 0..self.l.nrows() {
            s = s + self.l[(i, i)].ln();
        }
        s + s
    }

    /// Solve L x = b in place.
    pub fn solve_lower_inplace(&self, b: &mut Array1<F>) {
        let n = self.dim();
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s = s - self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// Solve Lᵀ x = b in place.
    pub fn solve_upper_inplace(&self, b: &mut Array1<F>) {
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s = s - self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// A⁻¹ b
    pub fn solve_vec(&self, b: &ArrayView1<F>) -> Array1<F> {
        let mut x = b.to_owned();
        self.solve_lower_inplace(&mut x);
        self.solve_upper_inplace(&mut x);
        x
    }

    /// A⁻¹ B, column by column.
    pub fn solve_mat(&self, b: &ArrayView2<F>) -> Array2<F> {
        let mut out = Array2::<F>::zeros(b.raw_dim());
        for (j, col) in b.axis_iter(Axis(1)).enumerate() {
            let x = self.solve_vec(&col);
            out.column_mut(j).assign(&x);
        }
        out
    }

    /// L⁻¹ B (forward substitution on every column).
    pub fn solve_lower_mat(&self, b: &ArrayView2<F>) -> Array2<F> {
        let mut out = Array2::<F>::zeros(b.raw_dim());
        for (j, col) in b.axis_iter(Axis(1)).enumerate() {
            let mut x = col.to_owned();
            self.solve_lower_inplace(&mut x);
            out.column_mut(j).assign(&x);
        }
        out
    }

    /// Dense inverse; used only for fixed-size adjoint bundles.
    pub fn inverse(&self) -> Array2<F> {
        let n = self.dim();
        let eye = Array2::<F>::eye(n);
        self.solve_mat(&eye.view())
    }

    /// Tr(A⁻¹ B)
    pub fn trace_solve(&self, b: &ArrayView2<F>) -> F {
        let x = self.solve_mat(b);
        let mut t = F::zero();
        for i in 0..self.dim() {
            t = t + x[(i, i)];
        }
        t
    }
}

/// Factorize `a + rel·scale·I`, escalating the relative jitter ×10 up to
/// three retries. Returns the factor together with the relative jitter that
/// succeeded so gradients can account for it.
pub fn cholesky_with_jitter<F: Real>(
    a: &ArrayView2<F>,
    scale: F,
    base_rel: F,
) -> Option<(Cholesky<F>, F)> {
    let mut rel = base_rel;
    for _ in 0..4 {
        let mut m = a.to_owned();
        let j = rel * scale;
        for i in 0..m.nrows() {
            m[(i, i)] = m[(i, i)] + j;
        }
        if let Some(c) = cholesky(&m.view()) {
            return Some((c, rel));
        }
        rel = rel * F::c(10.0);
    }
    None
}

/// Frobenius inner product ⟨A, B⟩.
pub fn frob_inner<F: Real>(a: &ArrayView2<F>, b: &ArrayView2<F>) -> F {
    debug_assert_eq!(a.raw_dim(), b.raw_dim());
    let mut s = F::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        s = s + *x * *y;
    }
    s
}

/// 0.5·(A + Aᵀ)
pub fn symmetrize<F: Real>(a: &Array2<F>) -> Array2<F> {
    let half = F::c(0.5);
    let mut out = a.clone();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out[(i, j)] = (a[(i, j)] + a[(j, i)]) * half;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_reconstructs() {
        let a = array![[4.0f64, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]];
        let c = cholesky(&a.view()).unwrap();
        let l = c.lower();
        let r = l.dot(&l.t());
        for (x, y) in a.iter().zip(r.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // determinant against direct 3x3 expansion
        let det: f64 = 4.0 * (5.0 * 3.0 - 1.0) - 2.0 * (2.0 * 3.0 - 0.4) + 0.4 * (2.0 - 5.0 * 0.4);
        assert!((c.log_det() - det.ln()).abs() < 1e-12);
    }

    #[test]
    fn solve_matches_direct() {
        let a = array![[4.0f64, 1.0], [1.0, 3.0]];
        let c = cholesky(&a.view()).unwrap();
        let b = array![1.0, 2.0];
        let x = c.solve_vec(&b.view());
        let r = a.dot(&x);
        assert!((r[0] - 1.0).abs() < 1e-12 && (r[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn indefinite_rejected_then_jitter_rescues() {
        let a = array![[1.0, 0.0], [0.0, -1e-9]];
        assert!(cholesky(&a.view()).is_none());
        let (_, rel) = cholesky_with_jitter(&a.view(), 1.0, 1e-6).unwrap();
        assert!(rel >= 1e-6);
    }

    #[test]
    fn f32_path_compiles_and_solves() {
        let a = array![[2.0f32, 0.5], [0.5, 1.5]];
        let c = cholesky(&a.view()).unwrap();
        let x = c.solve_vec(&array![1.0f32, 1.0].view());
        let r = a.dot(&x);
        assert!((r[0] - 1.0).abs() < 1e-5 && (r[1] - 1.0).abs() < 1e-5);
    }
}
