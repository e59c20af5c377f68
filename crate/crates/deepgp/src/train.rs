//! Bound maximization: L-BFGS with a strong-Wolfe line search (Adam as a
//! secondary option), the initialization policy, convergence bookkeeping
//! and a finite-difference gradient checker.

use crate::error::{Error, Result};
use crate::executor::BoundEvaluator;
use crate::kernel::KernelSpec;
use crate::mlp::RecognitionStack;
use crate::model::{DgpModel, Mode, ModeKind, ModelConfig, Posteriors};
use crate::posterior::DiagGaussianPosterior;
use crate::scalar::Real;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Lbfgs,
    Adam,
}

/// Parameter blocks that can be held fixed during optimization.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct FreezeSpec {
    #[serde(default)]
    pub recognition: bool,
    #[serde(default)]
    pub posteriors: bool,
    #[serde(default)]
    pub layers: bool,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Relative bound change below which a step counts as converged; five
    /// consecutive such steps terminate.
    #[serde(default = "default_tol")]
    pub convergence_tol: f64,
    /// L-BFGS history pairs.
    #[serde(default = "default_memory")]
    pub memory: usize,
    /// Adam step size.
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_shards")]
    pub shard_count: usize,
    #[serde(default = "default_true")]
    pub deterministic_reduction: bool,
    #[serde(default)]
    pub freeze: FreezeSpec,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Lbfgs
}
fn default_max_iters() -> usize {
    200
}
fn default_tol() -> f64 {
    1e-6
}
fn default_memory() -> usize {
    10
}
fn default_step_size() -> f64 {
    0.01
}
fn default_shards() -> usize {
    8
}
fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStatus {
    Converged,
    MaxIters,
    LineSearchFailed,
}

/// One accepted optimizer step.
#[derive(Debug, Clone)]
pub struct IterRecord<F> {
    pub iter: usize,
    pub bound: F,
    pub grad_inf_norm: F,
    pub wall_secs: f64,
}

#[derive(Debug)]
pub struct FitResult<F> {
    pub model: DgpModel<F>,
    pub trace: Vec<IterRecord<F>>,
    pub status: FitStatus,
}

// ---- generic L-BFGS ------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub tol_window: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            max_iters: 200,
            tol: 1e-6,
            tol_window: 5,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptStatus {
    Converged,
    MaxIters,
    LineSearchFailed,
}

type ObjFn<'a, F> = dyn FnMut(&Array1<F>) -> Result<(F, Array1<F>)> + 'a;

fn dot<F: Real>(a: &Array1<F>, b: &Array1<F>) -> F {
    a.iter().zip(b.iter()).map(|(x, y)| *x * *y).sum()
}

fn inf_norm<F: Real>(a: &Array1<F>) -> F {
    a.iter().fold(F::zero(), |m, v| m.max(v.abs()))
}

/// Cubic-interpolated bracket/zoom strong-Wolfe line search for the
/// minimization objective; returns (α, f, g) or None on failure.
#[allow(clippy::too_many_arguments)]
fn strong_wolfe<F: Real>(
    obj: &mut ObjFn<'_, F>,
    x: &Array1<F>,
    f0: F,
    d: &Array1<F>,
    dphi0: F,
    c1: F,
    c2: F,
    max_iters: usize,
) -> Result<Option<(F, F, Array1<F>)>> {
    let eval = |obj: &mut ObjFn<'_, F>, alpha: F| -> Result<(F, Array1<F>, F)> {
        let xa = x + &(d * alpha);
        let (f, g) = obj(&xa)?;
        let dphi = dot(&g, d);
        Ok((f, g, dphi))
    };
    let cubic = |a: F, fa: F, da: F, b: F, fb: F, db: F| -> F {
        // minimizer of the cubic through (a, fa, da), (b, fb, db)
        let d1 = da + db - F::c(3.0) * (fa - fb) / (a - b);
        let d2sq = d1 * d1 - da * db;
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        if d2sq >= F::zero() {
            let d2 = d2sq.sqrt();
            let cand = b - (b - a) * ((db + d2 - d1) / (db - da + F::c(2.0) * d2));
            if cand.is_finite() {
                return cand.max(lo).min(hi);
            }
        }
        (lo + hi) * F::c(0.5)
    };

    let zoom = |obj: &mut ObjFn<'_, F>,
                    mut a_lo: F,
                    mut f_lo: F,
                    mut d_lo: F,
                    mut a_hi: F,
                    mut f_hi: F,
                    mut d_hi: F|
     -> Result<Option<(F, F, Array1<F>)>> {
        for _ in 0..max_iters {
            let mut alpha = cubic(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi);
            let width = (a_hi - a_lo).abs();
            let lo = a_lo.min(a_hi);
            let hi = a_lo.max(a_hi);
            // keep strictly interior
            if !(alpha > lo + F::c(0.1) * width && alpha < hi - F::c(0.1) * width) {
                alpha = (a_lo + a_hi) * F::c(0.5);
            }
            let (f, g, dphi) = eval(obj, alpha)?;
            if f > f0 + c1 * alpha * dphi0 || f >= f_lo {
                a_hi = alpha;
                f_hi = f;
                d_hi = dphi;
            } else {
                if dphi.abs() <= -c2 * dphi0 {
                    return Ok(Some((alpha, f, g)));
                }
                if dphi * (a_hi - a_lo) >= F::zero() {
                    a_hi = a_lo;
                    f_hi = f_lo;
                    d_hi = d_lo;
                }
                a_lo = alpha;
                f_lo = f;
                d_lo = dphi;
            }
            if (a_hi - a_lo).abs() < F::c(1e-14) {
                break;
            }
        }
        Ok(None)
    };

    let mut alpha_prev = F::zero();
    let mut f_prev = f0;
    let mut d_prev = dphi0;
    let mut alpha = F::one();
    let alpha_max = F::c(1e4);
    for i in 0..max_iters {
        let (f, g, dphi) = eval(obj, alpha)?;
        if f > f0 + c1 * alpha * dphi0 || (i > 0 && f >= f_prev) {
            return zoom(obj, alpha_prev, f_prev, d_prev, alpha, f, dphi);
        }
        if dphi.abs() <= -c2 * dphi0 {
            return Ok(Some((alpha, f, g)));
        }
        if dphi >= F::zero() {
            return zoom(obj, alpha, f, dphi, alpha_prev, f_prev, d_prev);
        }
        alpha_prev = alpha;
        f_prev = f;
        d_prev = dphi;
        alpha = (alpha * F::c(2.0)).min(alpha_max);
        if alpha_prev >= alpha_max {
            break;
        }
    }
    Ok(None)
}

/// Minimize with L-BFGS, calling `on_step(iter, x, f, grad_inf)` for the
/// initial point and every accepted step.
pub fn minimize_lbfgs<F: Real>(
    obj: &mut ObjFn<'_, F>,
    x0: Array1<F>,
    opts: &LbfgsOptions,
    mut on_step: impl FnMut(usize, &Array1<F>, F, F),
) -> Result<(Array1<F>, F, OptStatus)> {
    let mut x = x0;
    let (mut f, mut g) = obj(&x)?;
    on_step(0, &x, f, inf_norm(&g));
    if inf_norm(&g) < F::c(1e-12) {
        return Ok((x, f, OptStatus::Converged));
    }
    let c1 = F::c(opts.c1);
    let c2 = F::c(opts.c2);
    let mut history: std::collections::VecDeque<(Array1<F>, Array1<F>, F)> =
        std::collections::VecDeque::with_capacity(opts.memory);
    let mut small_steps = 0usize;
    let mut tried_steepest = false;
    for iter in 1..=opts.max_iters {
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s_i, y_i, rho) in history.iter().rev() {
            let a = *rho * dot(s_i, &q);
            q = &q - &(y_i * a);
            alphas.push(a);
        }
        if let Some((s_l, y_l, _)) = history.back() {
            let gamma = dot(s_l, y_l) / dot(y_l, y_l);
            if gamma.is_finite() && gamma > F::zero() {
                q = &q * gamma;
            }
        }
        for ((s_i, y_i, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = *rho * dot(y_i, &q);
            q = &q + &(s_i * (a - b));
        }
        let mut d = q.mapv(|v| -v);
        let mut dphi0 = dot(&g, &d);
        if !(dphi0 < F::zero()) {
            history.clear();
            d = g.mapv(|v| -v);
            dphi0 = dot(&g, &d);
        }
        let ls = strong_wolfe(obj, &x, f, &d, dphi0, c1, c2, opts.max_line_search)?;
        let (alpha, f_new, g_new) = match ls {
            Some(t) => {
                tried_steepest = false;
                t
            }
            None => {
                if tried_steepest {
                    return Ok((x, f, OptStatus::LineSearchFailed));
                }
                // one steepest-descent rescue with fresh memory
                tried_steepest = true;
                history.clear();
                let d_sd = g.mapv(|v| -v);
                let dphi_sd = dot(&g, &d_sd);
                match strong_wolfe(obj, &x, f, &d_sd, dphi_sd, c1, c2, opts.max_line_search)? {
                    Some(t) => t,
                    None => return Ok((x, f, OptStatus::LineSearchFailed)),
                }
            }
        };
        let step = &d * alpha;
        let y_diff = &g_new - &g;
        let sy = dot(&step, &y_diff);
        if sy > F::c(1e-12) {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((step.clone(), y_diff, F::one() / sy));
        }
        x = &x + &step;
        let rel_change = (f - f_new).abs() / f_new.abs().max(F::one());
        f = f_new;
        g = g_new;
        on_step(iter, &x, f, inf_norm(&g));
        if rel_change < F::c(opts.tol) {
            small_steps += 1;
            if small_steps >= opts.tol_window {
                return Ok((x, f, OptStatus::Converged));
            }
        } else {
            small_steps = 0;
        }
    }
    Ok((x, f, OptStatus::MaxIters))
}

/// Adam on the same minimization interface.
pub fn minimize_adam<F: Real>(
    obj: &mut ObjFn<'_, F>,
    x0: Array1<F>,
    step_size: f64,
    max_iters: usize,
    tol: f64,
    tol_window: usize,
    mut on_step: impl FnMut(usize, &Array1<F>, F, F),
) -> Result<(Array1<F>, F, OptStatus)> {
    let mut x = x0;
    let (b1, b2, eps) = (F::c(0.9), F::c(0.999), F::c(1e-8));
    let lr = F::c(step_size);
    let mut m = Array1::<F>::zeros(x.len());
    let mut v = Array1::<F>::zeros(x.len());
    let (mut f, mut g) = obj(&x)?;
    on_step(0, &x, f, inf_norm(&g));
    let mut small_steps = 0usize;
    for iter in 1..=max_iters {
        m = &(&m * b1) + &(&g * (F::one() - b1));
        v = &(&v * b2) + &(&g.mapv(|t| t * t) * (F::one() - b2));
        let bc1 = F::one() - b1.powi(iter as i32);
        let bc2 = F::one() - b2.powi(iter as i32);
        for i in 0..x.len() {
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            x[i] = x[i] - lr * mh / (vh.sqrt() + eps);
        }
        let (f_new, g_new) = obj(&x)?;
        let rel_change = (f - f_new).abs() / f_new.abs().max(F::one());
        f = f_new;
        g = g_new;
        on_step(iter, &x, f, inf_norm(&g));
        if rel_change < F::c(tol) {
            small_steps += 1;
            if small_steps >= tol_window {
                return Ok((x, f, OptStatus::Converged));
            }
        } else {
            small_steps = 0;
        }
    }
    Ok((x, f, OptStatus::MaxIters))
}

// ---- initialization -------------------------------------------------------

/// Seeded Lloyd k-means with a random-subset start; degenerate (empty)
/// clusters are re-seeded from random rows. With k = n the centers are the
/// points themselves.
pub fn kmeans<F: Real>(points: &ArrayView2<F>, k: usize, rng: &mut ChaCha20Rng) -> Array2<F> {
    let n = points.nrows();
    let d = points.ncols();
    assert!(k >= 1 && k <= n, "kmeans needs 1 ≤ k ≤ n");
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut centers = Array2::<F>::zeros((k, d));
    for (c, &i) in order.iter().take(k).enumerate() {
        centers.row_mut(c).assign(&points.row(i));
    }
    if k == n {
        return centers;
    }
    let mut assign = vec![0usize; n];
    for _ in 0..25 {
        let mut moved = false;
        for i in 0..n {
            let mut best = F::max_value();
            let mut arg = 0;
            for c in 0..k {
                let mut dist = F::zero();
                for j in 0..d {
                    let t = points[(i, j)] - centers[(c, j)];
                    dist = dist + t * t;
                }
                if dist < best {
                    best = dist;
                    arg = c;
                }
            }
            if assign[i] != arg {
                moved = true;
                assign[i] = arg;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<F>::zeros((k, d));
        for i in 0..n {
            counts[assign[i]] += 1;
            for j in 0..d {
                sums[(assign[i], j)] = sums[(assign[i], j)] + points[(i, j)];
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let i = rng.gen_range(0..n);
                centers.row_mut(c).assign(&points.row(i));
            } else {
                let inv = F::one() / F::c(counts[c] as f64);
                for j in 0..d {
                    centers[(c, j)] = sums[(c, j)] * inv;
                }
            }
        }
        if !moved {
            break;
        }
    }
    centers
}

/// Principal-component projection to `k` dimensions by seeded subspace
/// iteration, standardized to unit per-dimension variance.
pub fn pca_projection<F: Real>(x: &ArrayView2<F>, k: usize, rng: &mut ChaCha20Rng) -> Array2<F> {
    let n = x.nrows();
    let d = x.ncols();
    let k = k.min(d);
    let mean = x.mean_axis(Axis(0)).unwrap();
    let centered = x - &mean;
    // subspace iteration on XᵀX without forming it when d is large
    let mut basis = Array2::<F>::zeros((d, k));
    for v in basis.iter_mut() {
        *v = F::c(rng.gen_range(-1.0..1.0));
    }
    for _ in 0..15 {
        let xb = centered.dot(&basis); // n×k
        let mut next = centered.t().dot(&xb); // d×k
        // Gram-Schmidt
        for c in 0..k {
            for prev in 0..c {
                let proj = {
                    let mut s = F::zero();
                    for r in 0..d {
                        s = s + next[(r, c)] * next[(r, prev)];
                    }
                    s
                };
                for r in 0..d {
                    let t = next[(r, prev)] * proj;
                    next[(r, c)] = next[(r, c)] - t;
                }
            }
            let mut norm = F::zero();
            for r in 0..d {
                norm = norm + next[(r, c)] * next[(r, c)];
            }
            let norm = norm.sqrt().max(F::c(1e-12));
            for r in 0..d {
                next[(r, c)] = next[(r, c)] / norm;
            }
        }
        basis = next;
    }
    let mut proj = centered.dot(&basis); // n×k
    // unit variance per output dimension
    for c in 0..k {
        let mut var = F::zero();
        for r in 0..n {
            var = var + proj[(r, c)] * proj[(r, c)];
        }
        var = var / F::c(n as f64);
        let scale = F::one() / var.sqrt().max(F::c(1e-12));
        for r in 0..n {
            proj[(r, c)] = proj[(r, c)] * scale;
        }
    }
    // pad with small noise if k < requested (degenerate input width)
    proj
}

fn column_variance_mean<F: Real>(x: &ArrayView2<F>) -> F {
    let n = F::c(x.nrows() as f64);
    let mean = x.mean_axis(Axis(0)).unwrap();
    let mut total = F::zero();
    for j in 0..x.ncols() {
        let mut v = F::zero();
        for i in 0..x.nrows() {
            let t = x[(i, j)] - mean[j];
            v = v + t * t;
        }
        total = total + v / n;
    }
    total / F::c(x.ncols() as f64)
}

/// Build and initialize a model on the data: recognition weights per the
/// Xavier policy (or PCA for explicit posteriors), inducing inputs from
/// k-means on the initialized layer inputs, unit kernel hyperparameters,
/// noise at a tenth of the output variance.
pub fn initialize<F: Real>(
    config: &ModelConfig,
    y: &ArrayView2<F>,
    supervised_inputs: Option<&ArrayView2<F>>,
    seed: u64,
) -> Result<DgpModel<F>> {
    let mut cfg = config.clone();
    cfg.data_dim = y.ncols();
    cfg.n_train = y.nrows();
    if cfg.mode == ModeKind::Supervised {
        let x = supervised_inputs
            .ok_or_else(|| Error::Config("supervised mode requires inputs".into()))?;
        if x.nrows() != y.nrows() {
            return Err(Error::shape(
                "initialize",
                format!("{} inputs vs {} targets", x.nrows(), y.nrows()),
            ));
        }
        cfg.input_dim = x.ncols();
    }
    cfg.validate()?;
    let n = y.nrows();
    for (i, &m) in cfg.inducing.iter().enumerate() {
        if m > n {
            return Err(Error::invalid(
                "initialize",
                format!(
                    "layer {i} asks for {m} inducing points but only {n} datapoints are available; reduce M"
                ),
            ));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut model: DgpModel<F> = cfg.build_skeleton()?;
    if let Mode::Supervised { inputs, .. } = &mut model.mode {
        *inputs = supervised_inputs.unwrap().to_owned();
    }

    // posterior initialization
    match &mut model.posteriors {
        Posteriors::Recognition(stack) => {
            *stack = RecognitionStack::init(
                cfg.data_dim,
                &cfg.latent_dims,
                &cfg.recognition.as_ref().unwrap().hidden_widths,
                cfg.recognition.as_ref().unwrap().tanh_output,
                &mut rng,
            )?;
        }
        Posteriors::Explicit(qs) => {
            // chain of PCA projections from the data (unsupervised) or the
            // observed inputs (supervised)
            let mut source: Array2<F> = match &model.mode {
                Mode::Unsupervised => y.to_owned(),
                Mode::Supervised { inputs, .. } => inputs.clone(),
            };
            for (j, q) in qs.iter_mut().enumerate() {
                let k = cfg.latent_dims[j];
                let means = if source.ncols() == k {
                    standardize(&source.view())
                } else {
                    pca_projection(&source.view(), k, &mut rng)
                };
                let means = if means.ncols() < k {
                    pad_columns(&means, k, &mut rng)
                } else {
                    means
                };
                *q = DiagGaussianPosterior::new(means.clone(), Array1::from_elem(k, F::c(0.1)))?;
                source = means;
            }
        }
    }

    // inducing inputs and hyperparameters
    let latents = model.posteriors_for(y, 0, n)?;
    for i in 0..model.layers.len() {
        let input = model.layer_input(i, &latents, 0, n)?;
        let z = kmeans(&input.means().view(), cfg.inducing[i], &mut rng);
        let targets_var: F = if i == 0 {
            column_variance_mean(y)
        } else {
            column_variance_mean(&latents[i - 1].means().view())
        };
        let noise = (F::c(0.1) * targets_var).max(F::c(1e-6)) + F::c(cfg.noise_floor);
        // ARD lengthscales start at √Q times the per-dimension input scale:
        // typical squared distances are then O(1) in kernel units, so the
        // GP carries gradient signal from the first iteration even in wide
        // latent spaces (unit lengthscales put exp(−½d²) at e^{−Q} there,
        // freezing the latents in the noise-only optimum)
        let q_in = input.dim();
        let scale = F::c((q_in as f64).sqrt());
        let mut dim_std = Array1::<F>::zeros(q_in);
        {
            let means = input.means();
            let mu = means.mean_axis(Axis(0)).unwrap();
            for qd in 0..q_in {
                let mut v = F::zero();
                for r in 0..means.nrows() {
                    let t = means[(r, qd)] - mu[qd];
                    v = v + t * t;
                }
                dim_std[qd] = (v / F::c(n as f64)).sqrt().max(F::c(0.3));
            }
        }
        let layer = &mut model.layers[i];
        layer.z = z;
        layer.noise_variance = noise;
        match &mut layer.kernel {
            KernelSpec::ExpQuad { variance, lengthscales } => {
                *variance = F::one();
                for (l, s) in lengthscales.iter_mut().zip(dim_std.iter()) {
                    *l = scale * *s;
                }
            }
            KernelSpec::Linear { variance, bias } => {
                *variance = F::one();
                *bias = F::c(cfg.linear_bias);
            }
        }
    }
    Ok(model)
}

fn standardize<F: Real>(x: &ArrayView2<F>) -> Array2<F> {
    let n = F::c(x.nrows() as f64);
    let mean = x.mean_axis(Axis(0)).unwrap();
    let mut out = x - &mean;
    for c in 0..out.ncols() {
        let mut var = F::zero();
        for r in 0..out.nrows() {
            var = var + out[(r, c)] * out[(r, c)];
        }
        var = var / n;
        let scale = F::one() / var.sqrt().max(F::c(1e-12));
        for r in 0..out.nrows() {
            out[(r, c)] = out[(r, c)] * scale;
        }
    }
    out
}

fn pad_columns<F: Real>(x: &Array2<F>, k: usize, rng: &mut ChaCha20Rng) -> Array2<F> {
    let mut out = Array2::<F>::zeros((x.nrows(), k));
    out.slice_mut(s![.., ..x.ncols()]).assign(x);
    for c in x.ncols()..k {
        for r in 0..x.nrows() {
            out[(r, c)] = F::c(rng.gen_range(-0.1..0.1));
        }
    }
    out
}

// ---- fitting ----------------------------------------------------------------

fn first_nonfinite_term<F: Real>(b: &crate::model::BoundBreakdown<F>) -> Option<String> {
    for (i, f) in b.free_energies.iter().enumerate() {
        if !f.is_finite() {
            return Some(format!("free energy of layer {i}"));
        }
    }
    for (i, h) in b.entropies.iter().enumerate() {
        if !h.is_finite() {
            return Some(format!("entropy of latent layer {i}"));
        }
    }
    if !b.kl_top.is_finite() {
        return Some("top-layer KL".into());
    }
    None
}

/// Indices of free (non-frozen) parameters.
fn free_indices<F: Real>(model: &DgpModel<F>, freeze: &FreezeSpec) -> Vec<usize> {
    let total = model.n_params();
    let posterior_start = {
        // layer blocks come first; replicate the packer's walk
        let mut at = 0;
        for layer in &model.layers {
            at += 1;
            at += match &layer.kernel {
                KernelSpec::ExpQuad { lengthscales, .. } => lengthscales.len(),
                KernelSpec::Linear { bias, .. } => usize::from(*bias > F::zero()),
            };
            at += 1;
            at += layer.z.len();
        }
        at
    };
    (0..total)
        .filter(|&i| {
            if i < posterior_start {
                !freeze.layers
            } else {
                match &model.posteriors {
                    Posteriors::Recognition(_) => !freeze.recognition,
                    Posteriors::Explicit(_) => !freeze.posteriors,
                }
            }
        })
        .collect()
}

/// Maximize the bound with the configured optimizer. The trace holds the
/// initial evaluation and one record per accepted step; with L-BFGS the
/// bound values are non-decreasing.
pub fn fit<F: Real>(
    model: DgpModel<F>,
    evaluator: &mut dyn BoundEvaluator<F>,
    config: &TrainConfig,
) -> Result<FitResult<F>> {
    fit_with_progress(model, evaluator, config, |_, _, _| {})
}

/// [`fit`] with a callback on every accepted step, receiving the step
/// record and the model at the accepted parameters (periodic checkpointing
/// hooks in here).
pub fn fit_with_progress<F: Real>(
    mut model: DgpModel<F>,
    evaluator: &mut dyn BoundEvaluator<F>,
    config: &TrainConfig,
    mut progress: impl FnMut(usize, &DgpModel<F>, &IterRecord<F>),
) -> Result<FitResult<F>> {
    let theta_full = model.pack_parameters();
    let free = free_indices(&model, &config.freeze);
    if free.is_empty() {
        return Err(Error::invalid("fit", "every parameter is frozen"));
    }
    let x0 = Array1::from_iter(free.iter().map(|&i| theta_full[i]));
    let started = std::time::Instant::now();
    let mut trace: Vec<IterRecord<F>> = Vec::new();

    let mut base = theta_full.clone();
    let mut work = model.clone();
    let n_free = free.len();
    let mut calls = 0usize;
    let mut objective = |x: &Array1<F>| -> Result<(F, Array1<F>)> {
        calls += 1;
        for (k, &i) in free.iter().enumerate() {
            base[i] = x[k];
        }
        work.unpack_parameters(&base.view())?;
        match evaluator.evaluate(&work, true) {
            Ok((breakdown, grad)) if breakdown.total.is_finite() => {
                let g = grad.expect("gradient requested");
                let g_free = Array1::from_iter(free.iter().map(|&i| -g[i]));
                Ok((-breakdown.total, g_free))
            }
            Ok((breakdown, _)) => {
                if calls == 1 {
                    let term = first_nonfinite_term(&breakdown)
                        .unwrap_or_else(|| "bound total".into());
                    Err(Error::invalid(
                        "fit",
                        format!("non-finite bound; first non-finite term: {term}"),
                    ))
                } else {
                    // a runaway line-search trial: infinitely bad, retreat
                    Ok((F::infinity(), Array1::zeros(n_free)))
                }
            }
            Err(e) if calls > 1 && e.is_numerical() => {
                Ok((F::infinity(), Array1::zeros(n_free)))
            }
            Err(e) => Err(e),
        }
    };

    let mut progress_model = model.clone();
    let mut progress_base = theta_full.clone();
    let on_step = |iter: usize, x: &Array1<F>, f: F, ginf: F| {
        let record = IterRecord {
            iter,
            bound: -f,
            grad_inf_norm: ginf,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        for (k, &i) in free.iter().enumerate() {
            progress_base[i] = x[k];
        }
        if progress_model.unpack_parameters(&progress_base.view()).is_ok() {
            progress(iter, &progress_model, &record);
        }
        trace.push(record);
    };

    let (x_best, _, status) = match config.optimizer {
        OptimizerKind::Lbfgs => {
            let opts = LbfgsOptions {
                memory: config.memory,
                max_iters: config.max_iters,
                tol: config.convergence_tol,
                ..LbfgsOptions::default()
            };
            minimize_lbfgs(&mut objective, x0, &opts, on_step)?
        }
        OptimizerKind::Adam => minimize_adam(
            &mut objective,
            x0,
            config.step_size,
            config.max_iters,
            config.convergence_tol,
            5,
            on_step,
        )?,
    };

    let mut theta = model.pack_parameters();
    for (k, &i) in free.iter().enumerate() {
        theta[i] = x_best[k];
    }
    model.unpack_parameters(&theta.view())?;
    Ok(FitResult {
        model,
        trace,
        status: match status {
            OptStatus::Converged => FitStatus::Converged,
            OptStatus::MaxIters => FitStatus::MaxIters,
            OptStatus::LineSearchFailed => FitStatus::LineSearchFailed,
        },
    })
}

// ---- gradient check ----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub pass: bool,
}

/// Central finite differences over every packed coordinate against the
/// analytic gradient. Guarded to small models.
pub fn gradient_check<F: Real>(
    model: &DgpModel<F>,
    y: &ArrayView2<F>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let n = model.n_params();
    if n > 5000 {
        return Err(Error::invalid(
            "gradient_check",
            format!("{n} parameters exceed the 5000-coordinate limit"),
        ));
    }
    let (_, analytic) = model.evaluate_gradients(y)?;
    let theta = model.pack_parameters();
    let mut work = model.clone();
    let mut at_point = |t: &Array1<F>| -> Result<f64> {
        work.unpack_parameters(&t.view())?;
        Ok(work.evaluate_bound(y)?.total.to_f64c())
    };
    let mut worst = 0.0f64;
    let mut at = 0usize;
    let mut worst_pair = (0.0f64, 0.0f64);
    for i in 0..n {
        // Richardson-extrapolated central difference: cancels the O(h²)
        // truncation term, leaving the roundoff floor
        let mut diff_at = |h: f64| -> Result<f64> {
            let mut tp = theta.clone();
            tp[i] = tp[i] + F::c(h);
            let fp = at_point(&tp)?;
            let mut tm = theta.clone();
            tm[i] = tm[i] - F::c(h);
            let fm = at_point(&tm)?;
            Ok((fp - fm) / (2.0 * h))
        };
        let d_h = diff_at(step)?;
        let d_half = diff_at(step / 2.0)?;
        let num = (4.0 * d_half - d_h) / 3.0;
        let ana = analytic[i].to_f64c();
        let scale = ana.abs().max(num.abs()).max(1e-6);
        let rel = (ana - num).abs() / scale;
        if rel > worst {
            worst = rel;
            at = i;
            worst_pair = (ana, num);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        worst_coordinate: at,
        analytic: worst_pair.0,
        numeric: worst_pair.1,
        pass: worst < tolerance,
    })
}
