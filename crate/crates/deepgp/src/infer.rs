//! Using a trained model: generative sampling, forward prediction with
//! uncertain-input moment matching, missing-data imputation, and the
//! bound-difference approximation of the test log-likelihood.

use crate::bound::BASE_JITTER;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, symmetrize, Cholesky};
use crate::model::{DgpModel, Mode, Posteriors};
use crate::psi::{accumulate_point_psi_gradients_with, per_point_psi, PsiGrads};
use crate::scalar::Real;
use crate::train::{minimize_lbfgs, LbfgsOptions};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

/// Per-layer cached state for prediction: the collapsed q(U) in solved form.
#[derive(Debug, Clone)]
pub struct LayerPredictor<F> {
    pub lambda: Array2<F>,
    /// ΨᵀR of the training data, M×D.
    pub c: Array2<F>,
    pub used_jitter: F,
    kuu: Array2<F>,
    chol_kuu: Cholesky<F>,
    chol_lambda: Cholesky<F>,
    /// β·Λ⁻¹C: per-dimension predictive weights.
    w: Array2<F>,
}

impl<F: Real> LayerPredictor<F> {
    pub fn from_cache(
        layer: &crate::bound::LayerParams<F>,
        lambda: Array2<F>,
        c: Array2<F>,
        used_jitter: F,
    ) -> Result<Self> {
        let m = layer.n_inducing();
        let mut kuu = layer.kernel.eval(&layer.z.view(), &layer.z.view())?;
        let v = layer.kernel.variance();
        for i in 0..m {
            kuu[(i, i)] = kuu[(i, i)] + used_jitter * v;
        }
        let chol_kuu = cholesky(&kuu.view()).ok_or(Error::Cholesky)?;
        let chol_lambda = cholesky(&lambda.view()).ok_or(Error::Cholesky)?;
        let beta = F::one() / layer.noise_variance;
        let w = chol_lambda.solve_mat(&c.view()).mapv(|x| x * beta);
        Ok(LayerPredictor {
            lambda,
            c,
            used_jitter,
            kuu,
            chol_kuu,
            chol_lambda,
            w,
        })
    }

    /// Mean of q*(U), M×D.
    pub fn qu_mean(&self) -> Array2<F> {
        self.kuu.dot(&self.w)
    }

    /// Covariance of q*(U), M×M (shared across output dimensions).
    pub fn qu_cov(&self) -> Array2<F> {
        let li = self.chol_lambda.solve_mat(&self.kuu.view());
        symmetrize(&self.kuu.dot(&li))
    }
}

/// A trained model plus everything prediction needs without the data.
#[derive(Debug, Clone)]
pub struct Predictor<F> {
    pub model: DgpModel<F>,
    pub layers: Vec<LayerPredictor<F>>,
    pub train_col_means: Array1<F>,
    pub train_bound: F,
}

/// Input of a prediction pass.
pub enum PredictInput<'a, F> {
    Deterministic(ArrayView2<'a, F>),
    Gaussian {
        means: ArrayView2<'a, F>,
        variances: ArrayView2<'a, F>,
    },
}

impl<F: Real> Predictor<F> {
    /// Compute the caches from the training data.
    pub fn fit(model: DgpModel<F>, y: &ArrayView2<F>) -> Result<Self> {
        model.validate(y)?;
        let stats = model.stats_for_rows(y, 0, y.nrows())?;
        let (breakdown, results) = model.assemble(&stats, y.ncols())?;
        let mut layers = Vec::with_capacity(model.layers.len());
        for (i, res) in results.iter().enumerate() {
            layers.push(
                LayerPredictor::from_cache(
                    &model.layers[i],
                    res.lambda.clone(),
                    stats.layers[i].c.clone(),
                    res.used_jitter,
                )
                .map_err(|e| e.in_layer(i))?,
            );
        }
        let train_col_means = y.mean_axis(Axis(0)).unwrap();
        Ok(Predictor {
            model,
            layers,
            train_col_means,
            train_bound: breakdown.total,
        })
    }

    /// One layer's predictive moments at per-point Gaussian inputs.
    /// Returns per-point means (n×D) and variances (n×D), noise included.
    fn layer_predict(
        &self,
        i: usize,
        means: &ArrayView2<F>,
        variances: &ArrayView2<F>,
    ) -> Result<(Array2<F>, Array2<F>)> {
        let layer = &self.model.layers[i];
        let pred = &self.layers[i];
        let n = means.nrows();
        let d = pred.w.ncols();
        let m = layer.n_inducing();
        let mut out_mean = Array2::<F>::zeros((n, d));
        let mut out_var = Array2::<F>::zeros((n, d));
        for r in 0..n {
            let (psi0, psi1, phi) = per_point_psi(
                &layer.kernel,
                &means.row(r),
                &variances.row(r),
                &layer.z.view(),
            )
            .map_err(|e| e.in_layer(i))?;
            let phi = symmetrize(&phi);
            let common = psi0 - pred.chol_kuu.trace_solve(&phi.view())
                + pred.chol_lambda.trace_solve(&phi.view());
            for dd in 0..d {
                let w_d = pred.w.column(dd);
                let mean: F = psi1.iter().zip(w_d.iter()).map(|(a, b)| *a * *b).sum();
                let mut wpw = F::zero();
                for a in 0..m {
                    for b in 0..m {
                        wpw = wpw + w_d[a] * phi[(a, b)] * w_d[b];
                    }
                }
                out_mean[(r, dd)] = mean;
                // never below the layer noise floor
                out_var[(r, dd)] =
                    (common + wpw - mean * mean).max(F::zero()) + layer.noise_variance;
            }
        }
        Ok((out_mean, out_var))
    }

    /// Moments propagated layer by layer from the top. Supervised models
    /// take the observed inputs; unsupervised models take a distribution
    /// over the top latent layer.
    pub fn predict_outputs(
        &self,
        input: PredictInput<'_, F>,
    ) -> Result<(Array2<F>, Array2<F>)> {
        let l = self.model.layers.len();
        let (mut means, mut vars, sup): (Array2<F>, Array2<F>, Option<Array2<F>>) = match input {
            PredictInput::Deterministic(x) => {
                let sup = if self.model.is_supervised() {
                    Some(x.to_owned())
                } else {
                    None
                };
                (x.to_owned(), Array2::zeros(x.raw_dim()), sup)
            }
            PredictInput::Gaussian { means, variances } => {
                if self.model.is_supervised() {
                    return Err(Error::invalid(
                        "predict",
                        "supervised models take deterministic inputs",
                    ));
                }
                (means.to_owned(), variances.to_owned(), None)
            }
        };
        let top_dim = self.model.layers[l - 1].input_dim();
        if means.ncols() != top_dim {
            return Err(Error::shape(
                "predict",
                format!("input has {} columns, expected {}", means.ncols(), top_dim),
            ));
        }
        for i in (0..l).rev() {
            let skip = i == 0
                && matches!(
                    self.model.mode,
                    Mode::Supervised {
                        skip_connection: true,
                        ..
                    }
                )
                && l >= 2;
            if skip {
                let x = sup.as_ref().unwrap();
                let n = means.nrows();
                let q1 = means.ncols();
                let qx = x.ncols();
                let mut am = Array2::<F>::zeros((n, q1 + qx));
                am.slice_mut(s![.., ..q1]).assign(&means);
                am.slice_mut(s![.., q1..]).assign(x);
                let mut av = Array2::<F>::zeros((n, q1 + qx));
                av.slice_mut(s![.., ..q1]).assign(&vars);
                let (m2, v2) = self.layer_predict(i, &am.view(), &av.view())?;
                means = m2;
                vars = v2;
            } else {
                let (m2, v2) = self.layer_predict(i, &means.view(), &vars.view())?;
                means = m2;
                vars = v2;
            }
        }
        Ok((means, vars))
    }

    /// Draw i.i.d. rows: top latents from the unit-Gaussian prior, then
    /// layer-wise GP predictive draws with additive layer noise.
    pub fn sample(&self, n_samples: usize, seed: u64) -> Result<Array2<F>> {
        if self.model.is_supervised() {
            return Err(Error::invalid("sample", "requires an unsupervised model"));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let l = self.model.layers.len();
        let top_dim = self.model.layers[l - 1].input_dim();
        let mut x = Array2::<F>::zeros((n_samples, top_dim));
        for v in x.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v = F::c(e);
        }
        for i in (0..l).rev() {
            let zeros = Array2::<F>::zeros(x.raw_dim());
            let (mean, var) = self.layer_predict(i, &x.view(), &zeros.view())?;
            let mut next = mean;
            for (v, s2) in next.iter_mut().zip(var.iter()) {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v = *v + s2.sqrt() * F::c(e);
            }
            x = next;
        }
        Ok(x)
    }
}

// ---- imputation -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ImputeOptions {
    /// Optimize the test point's posterior (model frozen). When off the
    /// recognition forward pass is used directly.
    pub optimize: bool,
    pub max_iters: usize,
}

impl Default for ImputeOptions {
    fn default() -> Self {
        ImputeOptions {
            optimize: true,
            max_iters: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Imputation<F> {
    /// Model reconstruction of all D dimensions (missing dims imputed).
    pub values: Array1<F>,
    /// Predictive variance per dimension.
    pub variances: Array1<F>,
    /// False when the inner optimizer stopped early; the best iterate is
    /// still returned.
    pub converged: bool,
}

/// The objective of test-point inference: the test row's additive bound
/// contribution with q(U) frozen at the training optimum.
struct TestPointObjective<'a, F> {
    predictor: &'a Predictor<F>,
    y_obs: Vec<(usize, F)>,
    latent_dims: Vec<usize>,
}

impl<'a, F: Real> TestPointObjective<'a, F> {
    fn n_params(&self) -> usize {
        self.latent_dims.iter().map(|q| 2 * q).sum()
    }

    fn unpack(&self, theta: &Array1<F>) -> (Vec<Array1<F>>, Vec<Array1<F>>) {
        let mut means = Vec::new();
        let mut vars = Vec::new();
        let mut at = 0;
        for &q in &self.latent_dims {
            means.push(theta.slice(s![at..at + q]).to_owned());
            at += q;
            vars.push(theta.slice(s![at..at + q]).mapv(|v| v.exp()));
            at += q;
        }
        (means, vars)
    }

    /// Negated objective and gradient over packed (μ, ln s) per layer.
    fn eval(&self, theta: &Array1<F>) -> Result<(F, Array1<F>)> {
        let (means, vars) = self.unpack(theta);
        let model = &self.predictor.model;
        let l = model.layers.len();
        let n_latent = self.latent_dims.len();
        let half = F::c(0.5);
        let two_pi = F::c(2.0) * F::PI();
        let mut value = F::zero();
        let mut mean_grads: Vec<Array1<F>> =
            self.latent_dims.iter().map(|&q| Array1::zeros(q)).collect();
        let mut var_grads: Vec<Array1<F>> =
            self.latent_dims.iter().map(|&q| Array1::zeros(q)).collect();

        for i in 0..l {
            let layer = &model.layers[i];
            let pred = &self.predictor.layers[i];
            let beta = F::one() / layer.noise_variance;
            let in_mean = &means[i];
            let in_var = &vars[i];
            let (psi0, psi1, phi) = per_point_psi(
                &layer.kernel,
                &in_mean.view(),
                &in_var.view(),
                &layer.z.view(),
            )?;
            let phi = symmetrize(&phi);
            let kinv_phi = pred.chol_kuu.trace_solve(&phi.view());
            let lam_inv_phi = pred.chol_lambda.trace_solve(&phi.view());
            let common = psi0 - kinv_phi + lam_inv_phi;
            let m = layer.n_inducing();

            // relevant output dims and their targets/variances
            let (dims, t_of, tv_of): (Vec<usize>, Vec<F>, Vec<F>) = if i == 0 {
                let d = self.y_obs.iter().map(|(d, _)| *d).collect();
                let t = self.y_obs.iter().map(|(_, v)| *v).collect();
                let tv = self.y_obs.iter().map(|_| F::zero()).collect();
                (d, t, tv)
            } else {
                let q = self.latent_dims[i - 1];
                (
                    (0..q).collect(),
                    means[i - 1].to_vec(),
                    vars[i - 1].to_vec(),
                )
            };

            let mut psi_bar = Array1::<F>::zeros(m);
            let mut phi_bar = {
                // −(β/2)·D_rel·(K⁻¹ − Λ⁻¹) term accumulates with the w wᵀ parts
                let ki = symmetrize(&pred.chol_kuu.inverse());
                let li = symmetrize(&pred.chol_lambda.inverse());
                (&li - &ki).mapv(|v| v * half * beta * F::c(dims.len() as f64))
            };
            let u0 = -half * beta * F::c(dims.len() as f64);
            for ((dd, t_d), tv_d) in dims.iter().zip(t_of.iter()).zip(tv_of.iter()) {
                let w_d = pred.w.column(*dd);
                let m_d: F = psi1.iter().zip(w_d.iter()).map(|(a, b)| *a * *b).sum();
                let mut wpw = F::zero();
                for a in 0..m {
                    for b in 0..m {
                        wpw = wpw + w_d[a] * phi[(a, b)] * w_d[b];
                    }
                }
                let sq = *t_d * *t_d - F::c(2.0) * *t_d * m_d + wpw + common + *tv_d;
                value = value + -half * (two_pi * layer.noise_variance).ln()
                    - half * beta * sq;
                // ∂/∂ψ*: β t_d w_d ; ∂/∂Φ*: −(β/2) w wᵀ
                for a in 0..m {
                    psi_bar[a] = psi_bar[a] + beta * *t_d * w_d[a];
                    for b in 0..m {
                        phi_bar[(a, b)] =
                            phi_bar[(a, b)] - half * beta * w_d[a] * w_d[b];
                    }
                }
                // target-side gradients (latent i−1)
                if i >= 1 {
                    mean_grads[i - 1][*dd] =
                        mean_grads[i - 1][*dd] - beta * (*t_d - m_d);
                    var_grads[i - 1][*dd] = var_grads[i - 1][*dd] - half * beta;
                }
            }

            // input-side gradients through the psi statistics
            if i < n_latent {
                let mut pg = PsiGrads {
                    means: Array2::zeros((1, in_mean.len())),
                    shared_variance: Array1::zeros(in_var.len()),
                    z: Array2::zeros(layer.z.raw_dim()),
                    variance: F::zero(),
                    lengthscales: Array1::zeros(match &layer.kernel {
                        crate::kernel::KernelSpec::ExpQuad { lengthscales, .. } => {
                            lengthscales.len()
                        }
                        crate::kernel::KernelSpec::Linear { .. } => 0,
                    }),
                    bias: F::zero(),
                };
                accumulate_point_psi_gradients_with(
                    &layer.kernel,
                    &in_mean.view(),
                    &in_var.view(),
                    &layer.z.view(),
                    u0,
                    &psi_bar.view(),
                    &phi_bar.view(),
                    &psi1,
                    &phi,
                    0,
                    &mut pg,
                )?;
                for q in 0..self.latent_dims[i] {
                    mean_grads[i][q] = mean_grads[i][q] + pg.means[(0, q)];
                    var_grads[i][q] = var_grads[i][q] + pg.shared_variance[q];
                }
            }
        }

        // entropies of the latents, KL for the top
        for j in 0..n_latent {
            let is_top = j == n_latent - 1;
            for q in 0..self.latent_dims[j] {
                let sv = vars[j][q];
                if is_top {
                    let mu = means[j][q];
                    value = value - half * (sv + mu * mu - F::one() - sv.ln());
                    mean_grads[j][q] = mean_grads[j][q] - mu;
                    var_grads[j][q] = var_grads[j][q] - half * (F::one() - F::one() / sv);
                } else {
                    value = value + half * (two_pi * F::E() * sv).ln();
                    var_grads[j][q] = var_grads[j][q] + half / sv;
                }
            }
        }

        // pack (negated for minimization); ln s chain
        let mut grad = Array1::<F>::zeros(self.n_params());
        let mut at = 0;
        for j in 0..n_latent {
            for q in 0..self.latent_dims[j] {
                grad[at] = -mean_grads[j][q];
                at += 1;
            }
            for q in 0..self.latent_dims[j] {
                grad[at] = -var_grads[j][q] * vars[j][q];
                at += 1;
            }
        }
        Ok((-value, grad))
    }
}

impl<F: Real> Predictor<F> {
    /// Complete a partially observed row. `missing[d] = true` marks
    /// dimension d as unobserved.
    pub fn impute(
        &self,
        y_partial: &ArrayView1<F>,
        missing: &[bool],
        opts: &ImputeOptions,
    ) -> Result<Imputation<F>> {
        let d = self.train_col_means.len();
        if y_partial.len() != d || missing.len() != d {
            return Err(Error::shape("impute", "row width differs from training data"));
        }
        if missing.iter().all(|m| *m) {
            return Err(Error::invalid("impute", "every dimension is missing"));
        }
        let stack = match &self.model.posteriors {
            Posteriors::Recognition(stack) => stack,
            Posteriors::Explicit(_) => {
                return Err(Error::invalid(
                    "impute",
                    "requires a recognition model for initialization",
                ))
            }
        };
        // fill missing dims with the training means, run recognition
        let mut filled = Array2::<F>::zeros((1, d));
        for i in 0..d {
            filled[(0, i)] = if missing[i] {
                self.train_col_means[i]
            } else {
                y_partial[i]
            };
        }
        let latents = stack.forward(&filled.view())?;
        let latent_dims: Vec<usize> = latents.iter().map(|q| q.dim()).collect();

        let objective = TestPointObjective {
            predictor: self,
            y_obs: (0..d)
                .filter(|i| !missing[*i])
                .map(|i| (i, y_partial[i]))
                .collect(),
            latent_dims: latent_dims.clone(),
        };
        let mut theta = Vec::with_capacity(objective.n_params());
        for q in &latents {
            theta.extend(q.means().row(0).iter().copied());
            theta.extend(q.shared_variance().iter().map(|v| v.ln()));
        }
        let mut theta = Array1::from_vec(theta);
        let mut converged = true;
        if opts.optimize {
            let mut best_f = F::infinity();
            let mut best_x = theta.clone();
            let mut obj = |x: &Array1<F>| -> Result<(F, Array1<F>)> {
                match objective.eval(x) {
                    Ok((f, g)) => {
                        if f < best_f {
                            best_f = f;
                            best_x = x.clone();
                        }
                        Ok((f, g))
                    }
                    Err(e) if e.is_numerical() => {
                        Ok((F::infinity(), Array1::zeros(x.len())))
                    }
                    Err(e) => Err(e),
                }
            };
            let lopts = LbfgsOptions {
                max_iters: opts.max_iters,
                tol: 1e-9,
                ..Default::default()
            };
            let (_, _, status) = minimize_lbfgs(&mut obj, theta.clone(), &lopts, |_, _, _, _| {})?;
            converged = !matches!(status, crate::train::OptStatus::LineSearchFailed);
            theta = best_x;
        }
        let (means, vars) = objective.unpack(&theta);
        let (pm, pv) = self.predict_outputs(PredictInput::Gaussian {
            means: means[0].view().insert_axis(Axis(0)),
            variances: vars[0].view().insert_axis(Axis(0)),
        })?;
        Ok(Imputation {
            values: pm.row(0).to_owned(),
            variances: pv.row(0).to_owned(),
            converged,
        })
    }
}

/// The footnote approximation: (L([Y*; Y]) − L(Y)) / N*, with test-point
/// posteriors produced by one recognition forward pass and every model
/// parameter frozen.
pub fn test_log_likelihood<F: Real>(
    model: &DgpModel<F>,
    y_test: &ArrayView2<F>,
    y_train: &ArrayView2<F>,
) -> Result<F> {
    if y_test.nrows() == 0 {
        return Err(Error::invalid("test_log_likelihood", "empty test set"));
    }
    if y_test.ncols() != y_train.ncols() {
        return Err(Error::shape(
            "test_log_likelihood",
            format!("{} vs {} columns", y_test.ncols(), y_train.ncols()),
        ));
    }
    if !matches!(model.posteriors, Posteriors::Recognition(_)) {
        return Err(Error::invalid(
            "test_log_likelihood",
            "requires a recognition model to infer test posteriors",
        ));
    }
    let n_test = y_test.nrows();
    let n_train = y_train.nrows();
    let mut stacked = Array2::<F>::zeros((n_test + n_train, y_train.ncols()));
    stacked.slice_mut(s![..n_test, ..]).assign(y_test);
    stacked.slice_mut(s![n_test.., ..]).assign(y_train);
    let joint = model.evaluate_bound(&stacked.view())?.total;
    let train = model.evaluate_bound(y_train)?.total;
    Ok((joint - train) / F::c(n_test as f64))
}

/// Per-point log-likelihood of an independent per-dimension Gaussian fit to
/// the training columns; the reference baseline for generative quality.
pub fn independent_gaussian_baseline<F: Real>(
    y_train: &ArrayView2<F>,
    y_test: &ArrayView2<F>,
) -> F {
    let n = F::c(y_train.nrows() as f64);
    let mean = y_train.mean_axis(Axis(0)).unwrap();
    let two_pi = F::c(2.0) * F::PI();
    let half = F::c(0.5);
    let mut var = Array1::<F>::zeros(y_train.ncols());
    for j in 0..y_train.ncols() {
        let mut v = F::zero();
        for i in 0..y_train.nrows() {
            let t = y_train[(i, j)] - mean[j];
            v = v + t * t;
        }
        var[j] = (v / n).max(F::c(1e-6));
    }
    let mut total = F::zero();
    for i in 0..y_test.nrows() {
        for j in 0..y_test.ncols() {
            let t = y_test[(i, j)] - mean[j];
            total = total + -half * (two_pi * var[j]).ln() - half * t * t / var[j];
        }
    }
    total / F::c(y_test.nrows() as f64)
}

/// Needed by checkpoint writing: jitter actually used per layer.
pub fn base_jitter<F: Real>() -> F {
    F::c(BASE_JITTER)
}
