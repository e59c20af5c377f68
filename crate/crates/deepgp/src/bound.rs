//! Per-layer free-energy lower bounds with the optimal inducing-variable
//! posterior collapsed analytically.
//!
//! For a layer with kernel K, inducing inputs Z (M of them), noise σ² and
//! output targets of width D, the collapsed bound assembled here is
//!
//!   B = −(ND/2)·ln(2πσ²) + (D/2)·(ln|K_uu| − ln|Λ|)
//!       − T/(2σ²) + Tr(Λ⁻¹W)/(2σ⁴) − D·(ψ0 − Tr(K_uu⁻¹Φ))/(2σ²)
//!
//! with Λ = K_uu + σ⁻²Φ, T the (expected) squared norm of the targets and
//! W = (Ψᵀ R)(Ψᵀ R)ᵀ + Σ_n tr(Σ_out)·ψ⁽ⁿ⁾ψ⁽ⁿ⁾ᵀ. For fixed targets the
//! second term of W vanishes and T = Tr(YᵀY); for Gaussian targets the two
//! extra pieces are exactly the expectations of the fixed-target bound,
//! which is quadratic in the outputs. The σ⁻² scaling inside Λ is the form
//! that reproduces the dense GP log marginal in the exact-collapse limit;
//! see the collapse tests.
//!
//! Every data-dependent quantity consumed here is a plain sum over points
//! ([`LayerStats`]), which is what makes sharded evaluation possible.

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::linalg::{cholesky, frob_inner, symmetrize, Cholesky};
use crate::posterior::DiagGaussianPosterior;
use crate::psi::{
    accumulate_point_psi_gradients_with, compute_psi, per_point_psi, PsiGrads, PsiStats,
};
use crate::scalar::Real;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1};

/// Relative jitter ladder: the base value is always applied before a kernel
/// matrix is factorized; escalation retries on failure.
pub const BASE_JITTER: f64 = 1e-6;

/// One DGP layer: inducing inputs, kernel and noise.
#[derive(Debug, Clone)]
pub struct LayerParams<F> {
    pub z: Array2<F>,
    pub kernel: KernelSpec<F>,
    pub noise_variance: F,
    /// Additive lower bound on the noise variance kept out of the free
    /// parameter (used by surrogates fit to noise-free objectives).
    pub noise_floor: F,
}

impl<F: Real> LayerParams<F> {
    pub fn new(z: Array2<F>, kernel: KernelSpec<F>, noise_variance: F) -> Result<Self> {
        if z.nrows() == 0 {
            return Err(Error::invalid("layer", "needs at least one inducing input"));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "inducing inputs" });
        }
        if !(noise_variance > F::zero()) || !noise_variance.is_finite() {
            return Err(Error::invalid("layer", "noise variance must be positive"));
        }
        if let Some(q) = kernel.pinned_dim() {
            if q != z.ncols() {
                return Err(Error::shape(
                    "layer",
                    format!("Z has {} columns, kernel expects {}", z.ncols(), q),
                ));
            }
        }
        Ok(LayerParams {
            z,
            kernel,
            noise_variance,
            noise_floor: F::zero(),
        })
    }

    pub fn n_inducing(&self) -> usize {
        self.z.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.z.ncols()
    }
}

/// Output side of a layer: observed data or the next posterior down.
#[derive(Debug, Clone, Copy)]
pub enum LayerTargets<'a, F> {
    Fixed(ArrayView2<'a, F>),
    Posterior(&'a DiagGaussianPosterior<F>),
}

impl<'a, F: Real> LayerTargets<'a, F> {
    pub fn n(&self) -> usize {
        match self {
            LayerTargets::Fixed(y) => y.nrows(),
            LayerTargets::Posterior(q) => q.n_points(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            LayerTargets::Fixed(y) => y.ncols(),
            LayerTargets::Posterior(q) => q.dim(),
        }
    }

    pub fn mean_view(&self) -> ArrayView2<'a, F> {
        match self {
            LayerTargets::Fixed(y) => *y,
            LayerTargets::Posterior(q) => q.means().view(),
        }
    }

    /// tr(Σ_out) of one point: zero for fixed targets.
    pub fn var_trace(&self) -> F {
        match self {
            LayerTargets::Fixed(_) => F::zero(),
            LayerTargets::Posterior(q) => q.trace_variance(),
        }
    }
}

/// Fixed-size sums of everything data-dependent a layer bound needs.
#[derive(Debug, Clone)]
pub struct LayerStats<F> {
    pub psi0: F,
    pub phi: Array2<F>,
    /// ΨᵀR, M×D
    pub c: Array2<F>,
    /// Σ_n tr(Σ_out⁽ⁿ⁾)·ψ⁽ⁿ⁾ψ⁽ⁿ⁾ᵀ, M×M
    pub g: Array2<F>,
    /// Σ_n (r⁽ⁿ⁾ᵀr⁽ⁿ⁾ + tr(Σ_out⁽ⁿ⁾))
    pub trace_targets: F,
    pub count: usize,
}

impl<F: Real> LayerStats<F> {
    pub fn zeros(m: usize, d: usize) -> Self {
        LayerStats {
            psi0: F::zero(),
            phi: Array2::zeros((m, m)),
            c: Array2::zeros((m, d)),
            g: Array2::zeros((m, m)),
            trace_targets: F::zero(),
            count: 0,
        }
    }

    pub fn add(&mut self, other: &LayerStats<F>) {
        self.psi0 = self.psi0 + other.psi0;
        self.phi = &self.phi + &other.phi;
        self.c = &self.c + &other.c;
        self.g = &self.g + &other.g;
        self.trace_targets = self.trace_targets + other.trace_targets;
        self.count += other.count;
    }

    /// Fold one point into the sums. `psi1_row` is the point's Ψ row.
    pub fn add_point(
        &mut self,
        psi0_n: F,
        psi1_row: &ArrayView1<F>,
        phi_n: &Array2<F>,
        target_row: &ArrayView1<F>,
        target_var_trace: F,
    ) {
        self.psi0 = self.psi0 + psi0_n;
        self.phi = &self.phi + phi_n;
        let m = psi1_row.len();
        for i in 0..m {
            for j in 0..target_row.len() {
                self.c[(i, j)] = self.c[(i, j)] + psi1_row[i] * target_row[j];
            }
        }
        if target_var_trace != F::zero() {
            for i in 0..m {
                for j in 0..m {
                    self.g[(i, j)] =
                        self.g[(i, j)] + target_var_trace * psi1_row[i] * psi1_row[j];
                }
            }
        }
        let mut rr = F::zero();
        for v in target_row.iter() {
            rr = rr + *v * *v;
        }
        self.trace_targets = self.trace_targets + rr + target_var_trace;
        self.count += 1;
    }
}

/// Sum the per-point statistics of a layer over a row range of the inputs
/// and targets. The serial path uses the full range; shards use theirs.
pub fn layer_stats<F: Real>(
    layer: &LayerParams<F>,
    q_in: &DiagGaussianPosterior<F>,
    targets: &LayerTargets<'_, F>,
) -> Result<LayerStats<F>> {
    if q_in.n_points() != targets.n() {
        return Err(Error::shape(
            "layer_stats",
            format!(
                "{} input points vs {} target rows",
                q_in.n_points(),
                targets.n()
            ),
        ));
    }
    let mut stats = LayerStats::zeros(layer.n_inducing(), targets.dim());
    let var = q_in.shared_variance().view();
    let tmeans = targets.mean_view();
    let tvar = targets.var_trace();
    for n in 0..q_in.n_points() {
        let (p0, row, phi_n) = per_point_psi(&layer.kernel, &q_in.means().row(n), &var, &layer.z.view())?;
        stats.add_point(p0, &row.view(), &phi_n, &tmeans.row(n), tvar);
    }
    Ok(stats)
}

/// Assembled bound of one layer plus the cached factorizations prediction
/// and gradients reuse.
#[derive(Debug, Clone)]
pub struct LayerBoundResult<F> {
    pub value: F,
    pub data_fit: F,
    pub trace_penalty: F,
    pub logdet: F,
    /// Λ = K_uu + σ⁻²Φ with the jittered K_uu.
    pub lambda: Array2<F>,
    /// Relative jitter that was actually applied to K_uu.
    pub used_jitter: F,
    pub kuu: Array2<F>,
    pub chol_kuu: Cholesky<F>,
    pub chol_lambda: Cholesky<F>,
}

/// Assemble the collapsed bound from reduced statistics.
pub fn assemble_layer_bound<F: Real>(
    layer: &LayerParams<F>,
    stats: &LayerStats<F>,
    d_out: usize,
) -> Result<LayerBoundResult<F>> {
    let n = stats.count;
    let m = layer.n_inducing();
    if stats.phi.nrows() != m || stats.c.ncols() != d_out {
        return Err(Error::shape("layer_bound", "statistics shape"));
    }
    let sigma2 = layer.noise_variance;
    let beta = F::one() / sigma2;
    let v = layer.kernel.variance();
    let kraw = layer.kernel.eval(&layer.z.view(), &layer.z.view())?;
    let phi_sym = symmetrize(&stats.phi);

    // One jitter knob controls both factorizations so the escalated value
    // enters the gradient consistently.
    let mut rel = F::c(BASE_JITTER);
    let mut found: Option<(Array2<F>, Cholesky<F>, Array2<F>, Cholesky<F>, F)> = None;
    for _ in 0..4 {
        let mut kuu = kraw.clone();
        for i in 0..m {
            kuu[(i, i)] = kuu[(i, i)] + rel * v;
        }
        if let Some(ck) = cholesky(&kuu.view()) {
            let lambda = &kuu + &(&phi_sym * beta);
            if let Some(cl) = cholesky(&lambda.view()) {
                found = Some((kuu, ck, lambda, cl, rel));
                break;
            }
        }
        rel = rel * F::c(10.0);
    }
    let (kuu, chol_kuu, lambda, chol_lambda, used_jitter) = found.ok_or(Error::Cholesky)?;

    let nd = F::c((n * d_out) as f64);
    let df = F::c(d_out as f64);
    let half = F::c(0.5);
    let two_pi = F::c(2.0) * F::PI();

    // Tr(Λ⁻¹CCᵀ) = ‖L⁻¹C‖², Tr(Λ⁻¹G) by solve
    let lc = chol_lambda.solve_lower_mat(&stats.c.view());
    let tr_cc: F = lc.iter().map(|x| *x * *x).sum();
    let tr_g = chol_lambda.trace_solve(&stats.g.view());
    let tr_w = tr_cc + tr_g;
    let tr_kinv_phi = chol_kuu.trace_solve(&phi_sym.view());

    let logdet = -half * nd * (two_pi * sigma2).ln()
        + half * df * (chol_kuu.log_det() - chol_lambda.log_det());
    let data_fit = -half * beta * stats.trace_targets + half * beta * beta * tr_w;
    let trace_penalty = -half * beta * df * (stats.psi0 - tr_kinv_phi);
    let value = logdet + data_fit + trace_penalty;
    if !value.is_finite() {
        return Err(Error::NonFinite { context: "layer bound" });
    }
    Ok(LayerBoundResult {
        value,
        data_fit,
        trace_penalty,
        logdet,
        lambda,
        used_jitter,
        kuu,
        chol_kuu,
        chol_lambda,
    })
}

/// Collapsed bound of the observed layer, the optimal q(U) substituted
/// analytically.
pub fn observed_layer_bound<F: Real>(
    y: &ArrayView2<F>,
    q1: &DiagGaussianPosterior<F>,
    layer: &LayerParams<F>,
) -> Result<LayerBoundResult<F>> {
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "observed data" });
    }
    let targets = LayerTargets::Fixed(*y);
    let stats = layer_stats(layer, q1, &targets)?;
    assemble_layer_bound(layer, &stats, y.ncols())
}

/// Bound of a hidden layer: the expectation of the observed-layer bound
/// over the Gaussian output posterior, which is exact because the collapsed
/// bound is quadratic in its targets.
pub fn hidden_layer_bound<F: Real>(
    q_out: &DiagGaussianPosterior<F>,
    q_in: &DiagGaussianPosterior<F>,
    layer: &LayerParams<F>,
) -> Result<LayerBoundResult<F>> {
    if q_out.n_points() != q_in.n_points() {
        return Err(Error::shape(
            "hidden_layer_bound",
            format!("{} vs {} points", q_out.n_points(), q_in.n_points()),
        ));
    }
    let targets = LayerTargets::Posterior(q_out);
    let stats = layer_stats(layer, q_in, &targets)?;
    assemble_layer_bound(layer, &stats, q_out.dim())
}

/// The maximizing Gaussian q*(U): mean σ⁻²·K_uu Λ⁻¹ΨᵀR (M×D) and shared
/// covariance K_uu Λ⁻¹ K_uu.
pub fn collapsed_qu<F: Real>(
    layer: &LayerParams<F>,
    stats: &PsiStats<F>,
    targets: &ArrayView2<F>,
) -> Result<(Array2<F>, Array2<F>)> {
    if stats.psi1.nrows() != targets.nrows() {
        return Err(Error::shape("collapsed_qu", "targets/Psi1 row mismatch"));
    }
    let ls = LayerStats {
        psi0: stats.psi0,
        phi: stats.phi.clone(),
        c: stats.psi1.t().dot(targets),
        g: Array2::zeros((layer.n_inducing(), layer.n_inducing())),
        trace_targets: F::zero(),
        count: targets.nrows(),
    };
    let res = assemble_layer_bound(layer, &ls, targets.ncols())?;
    let beta = F::one() / layer.noise_variance;
    let lam_inv_c = res.chol_lambda.solve_mat(&ls.c.view());
    let mean = res.kuu.dot(&lam_inv_c) * beta;
    let lam_inv_k = res.chol_lambda.solve_mat(&res.kuu.view());
    let cov = res.kuu.dot(&lam_inv_k);
    Ok((mean, symmetrize(&cov)))
}

/// Un-collapsed form of the observed-layer bound at an explicit Gaussian
/// q(U) = Π_d N(m_d, S). Maximized over (m, S) it reproduces the collapsed
/// value; kept as an independent consistency path.
pub fn explicit_observed_bound<F: Real>(
    y: &ArrayView2<F>,
    q1: &DiagGaussianPosterior<F>,
    layer: &LayerParams<F>,
    qu_mean: &ArrayView2<F>,
    qu_cov: &ArrayView2<F>,
) -> Result<F> {
    let stats = compute_psi(&layer.kernel, q1, &layer.z.view())?;
    let m = layer.n_inducing();
    let d = y.ncols();
    let n = y.nrows();
    let sigma2 = layer.noise_variance;
    let beta = F::one() / sigma2;
    let v = layer.kernel.variance();
    let kraw = layer.kernel.eval(&layer.z.view(), &layer.z.view())?;
    let mut kuu = kraw;
    for i in 0..m {
        kuu[(i, i)] = kuu[(i, i)] + F::c(BASE_JITTER) * v;
    }
    let ck = cholesky(&kuu.view()).ok_or(Error::Cholesky)?;
    let cs = cholesky(&qu_cov.view()).ok_or(Error::Cholesky)?;

    let half = F::c(0.5);
    let two_pi = F::c(2.0) * F::PI();
    let phi_sym = symmetrize(&stats.phi);
    let tr_kinv_phi = ck.trace_solve(&phi_sym.view());
    // K⁻¹ΦK⁻¹-weighted second moment of q(U)
    let kinv_phi_kinv = {
        let a = ck.solve_mat(&phi_sym.view());
        let b = ck.solve_mat(&a.t().to_owned().view());
        symmetrize(&b)
    };
    let mut value = F::zero();
    for dd in 0..d {
        let y_d = y.column(dd);
        let m_d = qu_mean.column(dd);
        let kinv_m = ck.solve_vec(&m_d);
        let ef = stats.psi1.dot(&kinv_m);
        let yy: F = y_d.iter().map(|x| *x * *x).sum();
        let ym: F = y_d.iter().zip(ef.iter()).map(|(a, b)| *a * *b).sum();
        let mut quad_mean = F::zero();
        for i in 0..m {
            for j in 0..m {
                quad_mean = quad_mean + m_d[i] * kinv_phi_kinv[(i, j)] * m_d[j];
            }
        }
        let tr_s = frob_inner(&kinv_phi_kinv.view(), &qu_cov.view());
        let e_ff = stats.psi0 - tr_kinv_phi + quad_mean + tr_s;
        value = value + -half * F::c(n as f64) * (two_pi * sigma2).ln()
            - half * beta * (yy - (ym + ym) + e_ff);
    }
    // KL(q(U) ‖ N(0, K_uu)) summed over columns with shared covariance
    let tr_kinv_s = ck.trace_solve(qu_cov);
    let mut mkm = F::zero();
    for dd in 0..d {
        let m_d = qu_mean.column(dd);
        let kinv_m = ck.solve_vec(&m_d);
        mkm = mkm + m_d.iter().zip(kinv_m.iter()).map(|(a, b)| *a * *b).sum();
    }
    let df = F::c(d as f64);
    let kl = half
        * (df * tr_kinv_s + mkm - df * F::c(m as f64) + df * (ck.log_det() - cs.log_det()));
    Ok(value - kl)
}

/// Fixed-size adjoint bundle of one layer's bound: everything a shard needs
/// to turn its local rows into parameter gradients, plus the central-only
/// pieces (K̄ and the σ² gradient).
#[derive(Debug, Clone)]
pub struct LayerAdjoints<F> {
    pub beta: F,
    /// Λ⁻¹C, M×D
    pub e: Array2<F>,
    /// Λ⁻¹, M×M
    pub p: Array2<F>,
    /// Adjoint of the jittered K_uu (central).
    pub kbar: Array2<F>,
    /// Upstream for Φ.
    pub phibar: Array2<F>,
    /// Upstream for ψ0.
    pub psi0bar: F,
    /// d value / d σ² (complete).
    pub dvalue_dnoise: F,
    /// Relative jitter used, for the variance-gradient correction.
    pub used_jitter: F,
}

/// Central adjoint computation from the assembled bound.
pub fn layer_adjoints<F: Real>(
    layer: &LayerParams<F>,
    stats: &LayerStats<F>,
    res: &LayerBoundResult<F>,
    d_out: usize,
) -> LayerAdjoints<F> {
    let n = stats.count;
    let beta = F::one() / layer.noise_variance;
    let half = F::c(0.5);
    let df = F::c(d_out as f64);
    let p = res.chol_lambda.inverse();
    let p = symmetrize(&p);
    let kinv = res.chol_kuu.inverse();
    let kinv = symmetrize(&kinv);
    let e = res.chol_lambda.solve_mat(&stats.c.view());
    let phi_sym = symmetrize(&stats.phi);

    // Ā = −(D/2)Λ⁻¹ − (β²/2)Λ⁻¹WΛ⁻¹ with Λ⁻¹WΛ⁻¹ = EEᵀ + Λ⁻¹GΛ⁻¹
    let pgp = {
        let pg = p.dot(&stats.g);
        symmetrize(&pg.dot(&p))
    };
    let eet = e.dot(&e.t());
    let abar = &(&p * (-half * df)) - &(&(&eet + &pgp) * (half * beta * beta));

    // K̄ = (D/2)K⁻¹ − (βD/2)K⁻¹ΦK⁻¹ + Ā
    let kinv_phi_kinv = {
        let a = res.chol_kuu.solve_mat(&phi_sym.view());
        symmetrize(&res.chol_kuu.solve_mat(&a.t().to_owned().view()))
    };
    let kbar = &(&kinv * (half * df)) - &(&kinv_phi_kinv * (half * beta * df)) + &abar;

    // Φ̄ = βĀ + (βD/2)K⁻¹
    let phibar = &(&abar * beta) + &(&kinv * (half * beta * df));
    let psi0bar = -half * beta * df;

    // dB/dβ, then dB/dσ² = −β²·dB/dβ
    let lc = res.chol_lambda.solve_lower_mat(&stats.c.view());
    let tr_w: F = lc.iter().map(|x| *x * *x).sum::<F>()
        + res.chol_lambda.trace_solve(&stats.g.view());
    let tr_kinv_phi = res.chol_kuu.trace_solve(&phi_sym.view());
    let dbeta = F::c((n * d_out) as f64) * half / beta - half * stats.trace_targets
        + beta * tr_w
        - half * df * (stats.psi0 - tr_kinv_phi)
        + frob_inner(&abar.view(), &phi_sym.view());
    let dvalue_dnoise = -beta * beta * dbeta;

    LayerAdjoints {
        beta,
        e,
        p,
        kbar,
        phibar,
        psi0bar,
        dvalue_dnoise,
        used_jitter: res.used_jitter,
    }
}

/// Central part of the parameter gradients: the K_uu chain into Z and the
/// kernel hyperparameters (including the jitter's variance term).
pub fn central_layer_gradients<F: Real>(
    layer: &LayerParams<F>,
    adj: &LayerAdjoints<F>,
) -> Result<(Array2<F>, F, Array1<F>, F)> {
    let kg = layer
        .kernel
        .gradients(&layer.z.view(), &layer.z.view(), &adj.kbar.view())?;
    let z_grad = &kg.wrt_a + &kg.wrt_b;
    let mut tr_kbar = F::zero();
    for i in 0..layer.n_inducing() {
        tr_kbar = tr_kbar + adj.kbar[(i, i)];
    }
    // K_jit = K + rel·v·I
    let v_grad = kg.variance + adj.used_jitter * tr_kbar;
    Ok((z_grad, v_grad, kg.lengthscales, kg.bias))
}

/// Per-point scatter: fold one data point's gradient contributions. The
/// input-side gradients accumulate into `psi_grads` (means row `row_index`),
/// the target-side mean gradient into `target_mean_grad`, and the gradient
/// with respect to tr(Σ_out) of this point into `target_var_trace_grad`.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_point_layer_gradients<F: Real>(
    layer: &LayerParams<F>,
    adj: &LayerAdjoints<F>,
    in_mean: &ArrayView1<F>,
    in_var: &ArrayView1<F>,
    target_row: &ArrayView1<F>,
    target_var_trace: F,
    row_index: usize,
    psi_grads: &mut PsiGrads<F>,
    mut target_mean_grad: Option<ArrayViewMut1<F>>,
    target_var_trace_grad: Option<&mut F>,
) -> Result<()> {
    let (_, psi_row, phi_n) = per_point_psi(&layer.kernel, in_mean, in_var, &layer.z.view())?;
    let m = layer.n_inducing();
    let beta = adj.beta;
    let beta2 = beta * beta;
    let half = F::c(0.5);

    // Ψ̄ row = β²·rᵀEᵀ + β²·tr(Σ_out)·ψP
    let mut psi_bar = Array1::<F>::zeros(m);
    for i in 0..m {
        let mut s = F::zero();
        for j in 0..target_row.len() {
            s = s + adj.e[(i, j)] * target_row[j];
        }
        psi_bar[i] = beta2 * s;
    }
    if target_var_trace != F::zero() {
        for i in 0..m {
            let mut s = F::zero();
            for j in 0..m {
                s = s + adj.p[(i, j)] * psi_row[j];
            }
            psi_bar[i] = psi_bar[i] + beta2 * target_var_trace * s;
        }
    }

    accumulate_point_psi_gradients_with(
        &layer.kernel,
        in_mean,
        in_var,
        &layer.z.view(),
        adj.psi0bar,
        &psi_bar.view(),
        &adj.phibar.view(),
        &psi_row,
        &phi_n,
        row_index,
        psi_grads,
    )?;

    // target mean: R̄ = −β·r + β²·ψE
    if let Some(out) = target_mean_grad.as_mut() {
        for j in 0..target_row.len() {
            let mut s = F::zero();
            for i in 0..m {
                s = s + psi_row[i] * adj.e[(i, j)];
            }
            out[j] = out[j] + beta2 * s - beta * target_row[j];
        }
    }

    // d/d tr(Σ_out): −β/2 + (β²/2)·ψᵀΛ⁻¹ψ
    if let Some(acc) = target_var_trace_grad {
        let mut quad = F::zero();
        for i in 0..m {
            for j in 0..m {
                quad = quad + psi_row[i] * adj.p[(i, j)] * psi_row[j];
            }
        }
        *acc = *acc + half * beta2 * quad - half * beta;
    }
    Ok(())
}

/// Full gradients of one layer's bound value.
#[derive(Debug, Clone)]
pub struct LayerGrads<F> {
    pub z: Array2<F>,
    pub variance: F,
    pub lengthscales: Array1<F>,
    pub bias: F,
    pub noise_variance: F,
    pub q_in_means: Array2<F>,
    pub q_in_variance: Array1<F>,
    /// Present when the targets are a posterior.
    pub q_out_means: Option<Array2<F>>,
    /// Gradient with respect to tr(Σ_out); applies to every output variance
    /// coordinate since the trace is their sum.
    pub q_out_var_trace: F,
}

/// Serial reference path: value and all gradients of a single layer.
pub fn layer_bound_gradients<F: Real>(
    targets: &LayerTargets<'_, F>,
    q_in: &DiagGaussianPosterior<F>,
    layer: &LayerParams<F>,
) -> Result<(LayerBoundResult<F>, LayerGrads<F>)> {
    let stats = layer_stats(layer, q_in, targets)?;
    let d_out = targets.dim();
    let res = assemble_layer_bound(layer, &stats, d_out)?;
    let adj = layer_adjoints(layer, &stats, &res, d_out);

    let n = q_in.n_points();
    let mut psi_grads = PsiGrads {
        means: Array2::zeros((n, q_in.dim())),
        shared_variance: Array1::zeros(q_in.dim()),
        z: Array2::zeros(layer.z.raw_dim()),
        variance: F::zero(),
        lengthscales: Array1::zeros(match &layer.kernel {
            KernelSpec::ExpQuad { lengthscales, .. } => lengthscales.len(),
            KernelSpec::Linear { .. } => 0,
        }),
        bias: F::zero(),
    };
    let is_posterior = matches!(targets, LayerTargets::Posterior(_));
    let mut out_means = if is_posterior {
        Some(Array2::<F>::zeros((n, d_out)))
    } else {
        None
    };
    let mut out_var_trace = F::zero();
    let tmeans = targets.mean_view();
    let tvar = targets.var_trace();
    let in_var = q_in.shared_variance().clone();
    for i in 0..n {
        accumulate_point_layer_gradients(
            layer,
            &adj,
            &q_in.means().row(i),
            &in_var.view(),
            &tmeans.row(i),
            tvar,
            i,
            &mut psi_grads,
            out_means.as_mut().map(|g| g.row_mut(i)),
            if is_posterior { Some(&mut out_var_trace) } else { None },
        )?;
    }
    let (z_central, v_central, ls_central, bias_central) = central_layer_gradients(layer, &adj)?;
    Ok((
        res,
        LayerGrads {
            z: &psi_grads.z + &z_central,
            variance: psi_grads.variance + v_central,
            lengthscales: &psi_grads.lengthscales + &ls_central,
            bias: psi_grads.bias + bias_central,
            noise_variance: adj.dvalue_dnoise,
            q_in_means: psi_grads.means,
            q_in_variance: psi_grads.shared_variance,
            q_out_means: out_means,
            q_out_var_trace: out_var_trace,
        },
    ))
}
