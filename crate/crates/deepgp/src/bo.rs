//! Bayesian optimization with the model as surrogate: expected improvement,
//! multi-start acquisition maximization, the sequential loop, and the
//! Branin test objective.

use crate::error::{Error, Result};
use crate::executor::SerialEvaluator;
use crate::infer::{PredictInput, Predictor};
use crate::kernel::KernelFamily;
use crate::model::{ModeKind, ModelConfig};
use crate::scalar::Real;
use crate::train::{fit, initialize, TrainConfig};
use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Standard normal CDF.
fn normal_cdf<F: Real>(x: F) -> F {
    let half = F::c(0.5);
    half * (F::one() + F::c(libm::erf(x.to_f64c() / std::f64::consts::SQRT_2)))
}

/// Standard normal PDF.
fn normal_pdf<F: Real>(x: F) -> F {
    let two_pi = F::c(2.0) * F::PI();
    (-(x * x) * F::c(0.5)).exp() / two_pi.sqrt()
}

/// E[max(best − f, 0)] for f ~ N(mean, variance); minimization convention.
pub fn expected_improvement<F: Real>(mean: F, variance: F, best: F) -> Result<F> {
    if variance < F::zero() || !variance.is_finite() {
        return Err(Error::invalid("expected_improvement", "negative variance"));
    }
    let gap = best - mean;
    if variance == F::zero() {
        return Ok(gap.max(F::zero()));
    }
    let std = variance.sqrt();
    let u = gap / std;
    Ok((gap * normal_cdf(u) + std * normal_pdf(u)).max(F::zero()))
}

/// Evaluated points so far, in a box domain.
#[derive(Debug, Clone)]
pub struct BoState<F> {
    pub x: Array2<F>,
    pub y: Array1<F>,
    pub best_value: F,
    pub best_x: Array1<F>,
    pub domain: Vec<(F, F)>,
    pub seed: u64,
}

impl<F: Real> BoState<F> {
    pub fn new(domain: Vec<(F, F)>, seed: u64) -> Self {
        let q = domain.len();
        BoState {
            x: Array2::zeros((0, q)),
            y: Array1::zeros(0),
            best_value: F::infinity(),
            best_x: Array1::zeros(q),
            domain,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn push(&mut self, x: &ArrayView1<F>, y: F) {
        let q = self.domain.len();
        let t = self.x.nrows();
        let mut nx = Array2::zeros((t + 1, q));
        nx.slice_mut(ndarray::s![..t, ..]).assign(&self.x);
        nx.row_mut(t).assign(x);
        self.x = nx;
        let mut ny = Array1::zeros(t + 1);
        ny.slice_mut(ndarray::s![..t]).assign(&self.y);
        ny[t] = y;
        self.y = ny;
        if y < self.best_value {
            self.best_value = y;
            self.best_x = x.to_owned();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    /// One hidden layer plus the input-to-output skip connection.
    Dgp,
    /// Plain sparse GP regression.
    Gp,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SurrogateConfig {
    pub kind: SurrogateKind,
    #[serde(default = "default_inducing")]
    pub inducing: usize,
    /// Hidden-layer width; defaults to the input dimension.
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    #[serde(default = "default_fit_iters")]
    pub fit_iters: usize,
    /// Observations are treated as noise-free up to this learned floor.
    #[serde(default = "default_noise_floor")]
    pub noise_floor: f64,
    /// Re-initialize from scratch every this many iterations; in between,
    /// kernel hyperparameters warm-start from the previous fit.
    #[serde(default = "default_refit_every")]
    pub full_refit_every: usize,
}

fn default_inducing() -> usize {
    30
}
fn default_fit_iters() -> usize {
    150
}
fn default_noise_floor() -> f64 {
    1e-6
}
fn default_refit_every() -> usize {
    5
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            kind: SurrogateKind::Dgp,
            inducing: default_inducing(),
            hidden_dim: None,
            fit_iters: default_fit_iters(),
            noise_floor: default_noise_floor(),
            full_refit_every: default_refit_every(),
        }
    }
}

/// Fitted surrogate with target standardization folded in.
pub struct Surrogate<F> {
    pub predictor: Predictor<F>,
    y_mean: F,
    y_scale: F,
    /// Kernel/noise parameters carried to the next warm start.
    pub hyper_snapshot: Vec<F>,
}

impl<F: Real> Surrogate<F> {
    /// Predictive mean and variance of the objective at the points.
    pub fn predict(&self, x: &ArrayView1<F>) -> Result<(F, F)> {
        let xm = x.view().insert_axis(ndarray::Axis(0));
        let (mean, var) = self
            .predictor
            .predict_outputs(PredictInput::Deterministic(xm))?;
        Ok((
            mean[(0, 0)] * self.y_scale + self.y_mean,
            var[(0, 0)] * self.y_scale * self.y_scale,
        ))
    }
}

fn surrogate_model_config<F: Real>(
    state: &BoState<F>,
    cfg: &SurrogateConfig,
) -> ModelConfig {
    let q = state.domain.len();
    let m = cfg.inducing.min(state.len()).max(1);
    match cfg.kind {
        SurrogateKind::Dgp => ModelConfig {
            mode: ModeKind::Supervised,
            skip_connection: true,
            latent_dims: vec![cfg.hidden_dim.unwrap_or(q)],
            inducing: vec![m, m],
            kernels: vec![KernelFamily::ExpQuad, KernelFamily::ExpQuad],
            linear_bias: 0.0,
            recognition: None,
            input_dim: 0,
            data_dim: 0,
            n_train: 0,
            noise_floor: cfg.noise_floor,
        },
        SurrogateKind::Gp => ModelConfig {
            mode: ModeKind::Supervised,
            skip_connection: false,
            latent_dims: vec![],
            inducing: vec![m],
            kernels: vec![KernelFamily::ExpQuad],
            linear_bias: 0.0,
            recognition: None,
            input_dim: 0,
            data_dim: 0,
            n_train: 0,
            noise_floor: cfg.noise_floor,
        },
    }
}

/// Fit (or refit) the surrogate on the state. `warm` carries the previous
/// fit's kernel/noise parameters.
pub fn fit_surrogate<F: Real>(
    state: &BoState<F>,
    cfg: &SurrogateConfig,
    warm: Option<&[F]>,
    seed: u64,
) -> Result<Surrogate<F>> {
    if state.is_empty() {
        return Err(Error::invalid("fit_surrogate", "no observations"));
    }
    let n = state.len();
    let y_mean = state.y.iter().copied().sum::<F>() / F::c(n as f64);
    let mut y_var = F::zero();
    for v in state.y.iter() {
        y_var = y_var + (*v - y_mean) * (*v - y_mean);
    }
    let y_scale = (y_var / F::c(n as f64)).sqrt().max(F::c(1e-8));
    let ys = state
        .y
        .mapv(|v| (v - y_mean) / y_scale)
        .insert_axis(ndarray::Axis(1));

    let mcfg = surrogate_model_config(state, cfg);
    let mut model = initialize(&mcfg, &ys.view(), Some(&state.x.view()), seed)?;
    // warm start: kernel hyperparameters and noise live at the head of each
    // layer block and have fixed sizes across iterations
    if let Some(h) = warm {
        let mut theta = model.pack_parameters();
        let mut at = 0;
        let mut src = 0;
        for layer in &model.layers {
            let hyper = 1
                + match &layer.kernel {
                    crate::kernel::KernelSpec::ExpQuad { lengthscales, .. } => lengthscales.len(),
                    crate::kernel::KernelSpec::Linear { bias, .. } => {
                        usize::from(*bias > F::zero())
                    }
                }
                + 1;
            if src + hyper <= h.len() {
                for k in 0..hyper {
                    theta[at + k] = h[src + k];
                }
            }
            src += hyper;
            at += hyper + layer.z.len();
        }
        model.unpack_parameters(&theta.view())?;
    }
    let mut eval = SerialEvaluator { y: ys.clone() };
    let tc = TrainConfig {
        max_iters: cfg.fit_iters,
        ..TrainConfig::default()
    };
    let fitted = fit(model, &mut eval, &tc)?;
    // snapshot the hyperparameters for the next warm start
    let theta = fitted.model.pack_parameters();
    let mut snapshot = Vec::new();
    let mut at = 0;
    for layer in &fitted.model.layers {
        let hyper = 1
            + match &layer.kernel {
                crate::kernel::KernelSpec::ExpQuad { lengthscales, .. } => lengthscales.len(),
                crate::kernel::KernelSpec::Linear { bias, .. } => usize::from(*bias > F::zero()),
            }
            + 1;
        for k in 0..hyper {
            snapshot.push(theta[at + k]);
        }
        at += hyper + layer.z.len();
    }
    let predictor = Predictor::fit(fitted.model, &ys.view())?;
    Ok(Surrogate {
        predictor,
        y_mean,
        y_scale,
        hyper_snapshot: snapshot,
    })
}

fn uniform_point<F: Real>(domain: &[(F, F)], rng: &mut ChaCha20Rng) -> Array1<F> {
    Array1::from_iter(domain.iter().map(|(lo, hi)| {
        let t: f64 = rng.gen_range(0.0..1.0);
        *lo + (*hi - *lo) * F::c(t)
    }))
}

/// Argmax of expected improvement by multi-start random search followed by
/// coordinate refinement. Deterministic given the seed.
pub fn propose_next<F: Real>(
    state: &BoState<F>,
    surrogate: &Surrogate<F>,
    n_candidates: usize,
    seed: u64,
) -> Result<Array1<F>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    if state.is_empty() {
        return Ok(uniform_point(&state.domain, &mut rng));
    }
    let best = state.best_value;
    let ei_at = |x: &Array1<F>| -> Result<F> {
        let (mean, var) = surrogate.predict(&x.view())?;
        expected_improvement(mean, var, best)
    };
    let mut best_x = uniform_point(&state.domain, &mut rng);
    let mut best_ei = ei_at(&best_x)?;
    for _ in 1..n_candidates {
        let x = uniform_point(&state.domain, &mut rng);
        let ei = ei_at(&x)?;
        if ei > best_ei {
            best_ei = ei;
            best_x = x;
        }
    }
    // gradient-free coordinate refinement with shrinking steps
    let mut steps: Vec<F> = state
        .domain
        .iter()
        .map(|(lo, hi)| (*hi - *lo) * F::c(0.1))
        .collect();
    for _round in 0..25 {
        let mut improved = false;
        for d in 0..state.domain.len() {
            for dir in [F::one(), -F::one()] {
                let mut cand = best_x.clone();
                let (lo, hi) = state.domain[d];
                cand[d] = (cand[d] + dir * steps[d]).max(lo).min(hi);
                let ei = ei_at(&cand)?;
                if ei > best_ei {
                    best_ei = ei;
                    best_x = cand;
                    improved = true;
                }
            }
        }
        if !improved {
            for s in steps.iter_mut() {
                *s = *s * F::c(0.5);
            }
        }
    }
    Ok(best_x)
}

/// How a point entered the trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalKind {
    Init,
    Acquisition,
    /// Surrogate fit or acquisition failed; uniform random fallback.
    RandomFallback,
    /// The objective returned a non-finite value and was resampled.
    Resample,
}

#[derive(Debug, Clone)]
pub struct BoRecord<F> {
    pub iteration: usize,
    pub x: Array1<F>,
    pub value: F,
    pub best: F,
    pub kind: ProposalKind,
}

#[derive(Debug)]
pub struct BoTrace<F> {
    pub records: Vec<BoRecord<F>>,
    pub state: BoState<F>,
}

/// The full loop: `n_init` random evaluations, then `n_iters` rounds of
/// fit-propose-evaluate. The best-value trace is non-increasing.
pub fn run_bo<F: Real>(
    mut objective: impl FnMut(&ArrayView1<F>) -> F,
    domain: Vec<(F, F)>,
    n_init: usize,
    n_iters: usize,
    surrogate_config: &SurrogateConfig,
    seed: u64,
) -> Result<BoTrace<F>> {
    let mut state = BoState::new(domain, seed);
    let mut records = Vec::new();
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
    let mut evaluate = |state: &mut BoState<F>,
                        records: &mut Vec<BoRecord<F>>,
                        x: Array1<F>,
                        iteration: usize,
                        kind: ProposalKind,
                        rng: &mut ChaCha20Rng|
     -> Result<()> {
        let mut x = x;
        let mut kind = kind;
        for _attempt in 0..4 {
            let v = objective(&x.view());
            if v.is_finite() {
                state.push(&x.view(), v);
                records.push(BoRecord {
                    iteration,
                    x: x.clone(),
                    value: v,
                    best: state.best_value,
                    kind,
                });
                return Ok(());
            }
            records.push(BoRecord {
                iteration,
                x: x.clone(),
                value: v,
                best: state.best_value,
                kind: ProposalKind::Resample,
            });
            x = uniform_point(&state.domain, rng);
            kind = ProposalKind::Resample;
        }
        Err(Error::invalid("run_bo", "objective kept returning non-finite values"))
    };

    for i in 0..n_init {
        let x = uniform_point(&state.domain, &mut rng);
        evaluate(&mut state, &mut records, x, i, ProposalKind::Init, &mut rng)?;
    }
    let mut warm: Option<Vec<F>> = None;
    for it in 0..n_iters {
        let full_refit = surrogate_config.full_refit_every > 0
            && it % surrogate_config.full_refit_every == 0;
        let warm_ref = if full_refit { None } else { warm.as_deref() };
        let proposal = match fit_surrogate(&state, surrogate_config, warm_ref, seed ^ (it as u64))
        {
            Ok(surrogate) => {
                warm = Some(surrogate.hyper_snapshot.clone());
                match propose_next(&state, &surrogate, 500, seed.wrapping_add(1000 + it as u64)) {
                    Ok(x) => (x, ProposalKind::Acquisition),
                    Err(_) => (
                        uniform_point(&state.domain, &mut rng),
                        ProposalKind::RandomFallback,
                    ),
                }
            }
            Err(_) => (
                uniform_point(&state.domain, &mut rng),
                ProposalKind::RandomFallback,
            ),
        };
        evaluate(
            &mut state,
            &mut records,
            proposal.0,
            n_init + it,
            proposal.1,
            &mut rng,
        )?;
    }
    Ok(BoTrace { records, state })
}

/// The Branin function on its default domain x₁ ∈ [−5, 10], x₂ ∈ [0, 15];
/// three global minima of value ≈ 0.397887.
pub fn branin<F: Real>(x: &ArrayView1<F>) -> F {
    let (x1, x2) = (x[0].to_f64c(), x[1].to_f64c());
    let a = 1.0;
    let b = 5.1 / (4.0 * std::f64::consts::PI.powi(2));
    let c = 5.0 / std::f64::consts::PI;
    let r = 6.0;
    let s = 10.0;
    let t = 1.0 / (8.0 * std::f64::consts::PI);
    let inner = x2 - b * x1 * x1 + c * x1 - r;
    F::c(a * inner * inner + s * (1.0 - t) * x1.cos() + s)
}

/// Default Branin domain.
pub fn branin_domain<F: Real>() -> Vec<(F, F)> {
    vec![(F::c(-5.0), F::c(10.0)), (F::c(0.0), F::c(15.0))]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ei_degenerate_cases() {
        assert_eq!(expected_improvement(1.0f64, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(expected_improvement(0.0, 0.0, 1.0).unwrap(), 1.0);
        assert_eq!(expected_improvement(2.0, 0.0, 1.0).unwrap(), 0.0);
        assert!(expected_improvement(0.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn ei_at_mean_equals_pdf_value() {
        // mean = best, std = 1: EI = φ(0) ≈ 0.398942
        let ei: f64 = expected_improvement(0.0, 1.0, 0.0).unwrap();
        assert!((ei - 0.39894228040143267).abs() < 1e-12);
    }

    #[test]
    fn ei_matches_monte_carlo() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let (mean, var, best): (f64, f64, f64) = (0.3, 0.8, 0.55);
        let analytic = expected_improvement(mean, var, best).unwrap();
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            let f = mean + var.sqrt() * e;
            let imp = (best - f).max(0.0);
            sum += imp;
            sumsq += imp * imp;
        }
        let mc = sum / n as f64;
        let se = ((sumsq / n as f64 - mc * mc) / n as f64).sqrt();
        assert!(
            (analytic - mc).abs() < 3.0 * se,
            "EI {analytic} vs MC {mc} ± {se}"
        );
    }

    #[test]
    fn branin_minima() {
        let m = 0.397887;
        for p in [
            array![std::f64::consts::PI, 2.275],
            array![-std::f64::consts::PI, 12.275],
            array![9.42478, 2.475],
        ] {
            let v: f64 = branin(&p.view());
            assert!((v - m).abs() < 1e-5, "branin({p}) = {v}");
        }
    }

    #[test]
    fn ei_is_nonnegative_everywhere() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..200 {
            let mean: f64 = rng.gen_range(-3.0..3.0);
            let var = rng.gen_range(0.0..4.0);
            let best = rng.gen_range(-3.0..3.0);
            assert!(expected_improvement(mean, var, best).unwrap() >= 0.0);
        }
    }
}
