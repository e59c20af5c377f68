//! Assembles the full variational lower bound over all layers, in
//! unsupervised or supervised mode, and flattens parameters and gradients
//! for the optimizer.
//!
//! Layer indexing: `layers[0]` is the observed-output layer; `layers[L−1]`
//! is the top. Posterior j is q over the inputs of layer j, so it is the
//! input of layer j and the target of layer j+1. In supervised mode the top
//! layer's inputs are observed and there are L−1 latent posteriors.

use crate::bound::{
    accumulate_point_layer_gradients, assemble_layer_bound, central_layer_gradients,
    layer_adjoints, LayerAdjoints, LayerBoundResult, LayerParams, LayerStats,
};
use crate::error::{Error, Result};
use crate::kernel::{KernelFamily, KernelSpec};
use crate::mlp::RecognitionStack;
use crate::posterior::DiagGaussianPosterior;
use crate::psi::{per_point_psi, PsiGrads};
use crate::scalar::Real;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;

/// Learning mode. Supervised mode carries the observed inputs of the top
/// layer; `skip_connection` additionally feeds them into the observed
/// layer's kernel inputs.
#[derive(Debug, Clone)]
pub enum Mode<F> {
    Unsupervised,
    Supervised {
        inputs: Array2<F>,
        skip_connection: bool,
    },
}

/// Variational posteriors: reparameterized by the recognition stack or held
/// as explicit per-point parameters.
#[derive(Debug, Clone)]
pub enum Posteriors<F> {
    Recognition(RecognitionStack<F>),
    Explicit(Vec<DiagGaussianPosterior<F>>),
}

#[derive(Debug, Clone)]
pub struct DgpModel<F> {
    pub layers: Vec<LayerParams<F>>,
    pub posteriors: Posteriors<F>,
    pub mode: Mode<F>,
}

/// Term-by-term decomposition of the bound.
#[derive(Debug, Clone)]
pub struct BoundBreakdown<F> {
    pub total: F,
    pub free_energies: Vec<F>,
    pub entropies: Vec<F>,
    pub kl_top: F,
}

/// Reduced data-dependent statistics of the whole model: per-layer sums
/// plus the squared norm of the top-layer means (for the KL term).
#[derive(Debug, Clone)]
pub struct ModelStats<F> {
    pub layers: Vec<LayerStats<F>>,
    pub top_mean_sq: F,
    pub count: usize,
}

impl<F: Real> ModelStats<F> {
    pub fn add(&mut self, other: &ModelStats<F>) {
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            a.add(b);
        }
        self.top_mean_sq = self.top_mean_sq + other.top_mean_sq;
        self.count += other.count;
    }
}

impl<F: Real> DgpModel<F> {
    pub fn n_layer_params(&self) -> usize {
        self.layers.len()
    }

    pub fn is_supervised(&self) -> bool {
        matches!(self.mode, Mode::Supervised { .. })
    }

    pub fn n_latent(&self) -> usize {
        if self.is_supervised() {
            self.layers.len() - 1
        } else {
            self.layers.len()
        }
    }

    fn skip_active(&self) -> bool {
        match &self.mode {
            Mode::Supervised {
                skip_connection, ..
            } => *skip_connection && self.layers.len() >= 2,
            Mode::Unsupervised => false,
        }
    }

    pub fn supervised_inputs(&self) -> Option<&Array2<F>> {
        match &self.mode {
            Mode::Supervised { inputs, .. } => Some(inputs),
            Mode::Unsupervised => None,
        }
    }

    /// Structural validation against a data matrix.
    pub fn validate(&self, y: &ArrayView2<F>) -> Result<()> {
        let l = self.layers.len();
        if l == 0 {
            return Err(Error::Config("model has no layers".into()));
        }
        let n = y.nrows();
        let latent = self.n_latent();
        match &self.posteriors {
            Posteriors::Recognition(stack) => {
                if stack.n_layers() != latent {
                    return Err(Error::Config(format!(
                        "recognition stack has {} layers, model needs {}",
                        stack.n_layers(),
                        latent
                    )));
                }
            }
            Posteriors::Explicit(qs) => {
                if qs.len() != latent {
                    return Err(Error::Config(format!(
                        "{} explicit posteriors, model needs {}",
                        qs.len(),
                        latent
                    )));
                }
                for q in qs {
                    if q.n_points() != n {
                        return Err(Error::shape(
                            "model",
                            format!("posterior has {} points, data has {}", q.n_points(), n),
                        ));
                    }
                }
            }
        }
        if let Mode::Supervised { inputs, .. } = &self.mode {
            if inputs.nrows() != n {
                return Err(Error::shape(
                    "model",
                    format!("{} supervised inputs vs {} data rows", inputs.nrows(), n),
                ));
            }
        }
        Ok(())
    }

    /// Latent posteriors for the given rows of the data.
    pub fn posteriors_for(
        &self,
        y: &ArrayView2<F>,
        begin: usize,
        end: usize,
    ) -> Result<Vec<DiagGaussianPosterior<F>>> {
        match &self.posteriors {
            Posteriors::Recognition(stack) => {
                let rows = y.slice(s![begin..end, ..]);
                stack.forward(&rows)
            }
            Posteriors::Explicit(qs) => {
                qs.iter().map(|q| q.slice_rows(begin, end)).collect()
            }
        }
    }

    /// The kernel-input posterior of layer `i`, given the latent posteriors
    /// of the same row range. Applies the supervised top substitution and
    /// the skip-connection augmentation of the observed layer.
    pub fn layer_input(
        &self,
        i: usize,
        latents: &[DiagGaussianPosterior<F>],
        begin: usize,
        end: usize,
    ) -> Result<DiagGaussianPosterior<F>> {
        let l = self.layers.len();
        if self.is_supervised() && i == l - 1 {
            let inputs = self.supervised_inputs().unwrap();
            return DiagGaussianPosterior::delta(&inputs.slice(s![begin..end, ..]));
        }
        let base = &latents[i];
        if i == 0 && self.skip_active() {
            let inputs = self.supervised_inputs().unwrap();
            let x = inputs.slice(s![begin..end, ..]);
            let n = base.n_points();
            let q1 = base.dim();
            let qx = x.ncols();
            let mut means = Array2::<F>::zeros((n, q1 + qx));
            means.slice_mut(s![.., ..q1]).assign(base.means());
            means.slice_mut(s![.., q1..]).assign(&x);
            let mut var = Array1::<F>::zeros(q1 + qx);
            var.slice_mut(s![..q1]).assign(base.shared_variance());
            return DiagGaussianPosterior::new(means, var);
        }
        Ok(base.clone())
    }

    /// Per-layer reduced statistics over a row range; the serial bound uses
    /// the full range, shards use theirs. All sums run in ascending row
    /// order so a single shard reproduces the serial numbers exactly.
    pub fn stats_for_rows(
        &self,
        y: &ArrayView2<F>,
        begin: usize,
        end: usize,
    ) -> Result<ModelStats<F>> {
        let l = self.layers.len();
        let latents = self.posteriors_for(y, begin, end)?;
        let mut per_layer = Vec::with_capacity(l);
        for i in 0..l {
            let input = self.layer_input(i, &latents, begin, end)?;
            let (target_means, target_var_trace): (Array2<F>, F) = if i == 0 {
                (y.slice(s![begin..end, ..]).to_owned(), F::zero())
            } else {
                (latents[i - 1].means().clone(), latents[i - 1].trace_variance())
            };
            let layer = &self.layers[i];
            let mut stats = LayerStats::zeros(layer.n_inducing(), target_means.ncols());
            let var = input.shared_variance().view();
            for r in 0..input.n_points() {
                let (p0, row, phi_n) = per_point_psi(
                    &layer.kernel,
                    &input.means().row(r),
                    &var,
                    &layer.z.view(),
                )
                .map_err(|e| e.in_layer(i))?;
                stats.add_point(p0, &row.view(), &phi_n, &target_means.row(r), target_var_trace);
            }
            per_layer.push(stats);
        }
        let mut top_mean_sq = F::zero();
        if !self.is_supervised() {
            let top = &latents[l - 1];
            for v in top.means().iter() {
                top_mean_sq = top_mean_sq + *v * *v;
            }
        }
        Ok(ModelStats {
            layers: per_layer,
            top_mean_sq,
            count: end - begin,
        })
    }

    /// Output width of layer `i` (D for the observed layer).
    fn layer_out_dim(&self, i: usize, data_dim: usize) -> usize {
        if i == 0 {
            data_dim
        } else {
            self.layers[i - 1].input_dim()
                - if i == 1 && self.skip_active() {
                    self.supervised_inputs().unwrap().ncols()
                } else {
                    0
                }
        }
    }

    /// Entropy and KL terms; they depend only on the shared variances and
    /// the reduced top_mean_sq statistic.
    fn entropy_kl_terms(&self, stats: &ModelStats<F>) -> Result<(Vec<F>, F)> {
        let n = F::c(stats.count as f64);
        let half = F::c(0.5);
        let two_pi_e = F::c(2.0) * F::PI() * F::E();
        let latent_vars: Vec<Array1<F>> = match &self.posteriors {
            Posteriors::Recognition(stack) => stack
                .log_shared_variances
                .iter()
                .map(|lv| lv.mapv(|v| v.exp()))
                .collect(),
            Posteriors::Explicit(qs) => {
                qs.iter().map(|q| q.shared_variance().clone()).collect()
            }
        };
        let n_latent = latent_vars.len();
        let mut entropies = Vec::new();
        let mut kl_top = F::zero();
        for (j, var) in latent_vars.iter().enumerate() {
            if var.iter().any(|v| !(*v > F::zero())) {
                return Err(Error::invalid("bound", "latent variance must be positive"));
            }
            let is_unsup_top = !self.is_supervised() && j == n_latent - 1;
            if is_unsup_top {
                let mut per_dim = F::zero();
                for v in var.iter() {
                    per_dim = per_dim + *v - F::one() - v.ln();
                }
                kl_top = half * (n * per_dim + stats.top_mean_sq);
            } else {
                let mut s = F::zero();
                for v in var.iter() {
                    s = s + (two_pi_e * *v).ln();
                }
                entropies.push(n * half * s);
            }
        }
        Ok((entropies, kl_top))
    }

    /// Assemble the bound from reduced statistics.
    pub fn assemble(
        &self,
        stats: &ModelStats<F>,
        data_dim: usize,
    ) -> Result<(BoundBreakdown<F>, Vec<LayerBoundResult<F>>)> {
        let l = self.layers.len();
        let mut free_energies = Vec::with_capacity(l);
        let mut results = Vec::with_capacity(l);
        for i in 0..l {
            let d_out = self.layer_out_dim(i, data_dim);
            let res = assemble_layer_bound(&self.layers[i], &stats.layers[i], d_out)
                .map_err(|e| e.in_layer(i))?;
            free_energies.push(res.value);
            results.push(res);
        }
        let (entropies, kl_top) = self.entropy_kl_terms(stats)?;
        let mut total = F::zero();
        for f in &free_energies {
            total = total + *f;
        }
        for h in &entropies {
            total = total + *h;
        }
        total = total - kl_top;
        Ok((
            BoundBreakdown {
                total,
                free_energies,
                entropies,
                kl_top,
            },
            results,
        ))
    }

    /// Serial bound evaluation.
    pub fn evaluate_bound(&self, y: &ArrayView2<F>) -> Result<BoundBreakdown<F>> {
        self.validate(y)?;
        let stats = self.stats_for_rows(y, 0, y.nrows())?;
        Ok(self.assemble(&stats, y.ncols())?.0)
    }

    /// Central adjoint bundles for every layer, given assembled results.
    pub fn adjoints(
        &self,
        stats: &ModelStats<F>,
        results: &[LayerBoundResult<F>],
        data_dim: usize,
    ) -> Vec<LayerAdjoints<F>> {
        (0..self.layers.len())
            .map(|i| {
                layer_adjoints(
                    &self.layers[i],
                    &stats.layers[i],
                    &results[i],
                    self.layer_out_dim(i, data_dim),
                )
            })
            .collect()
    }

    /// Gradient contributions of a row range, given the central adjoints.
    /// Returns per-layer psi-side gradients plus the latent mean/variance
    /// gradients of the local rows (recognition backward is applied by the
    /// caller via `ShardGradOutput`).
    pub fn scatter_rows(
        &self,
        y: &ArrayView2<F>,
        begin: usize,
        end: usize,
        adjoints: &[LayerAdjoints<F>],
    ) -> Result<ShardGradOutput<F>> {
        let l = self.layers.len();
        let n_local = end - begin;
        let latents = self.posteriors_for(y, begin, end)?;
        let n_latent = latents.len();

        let mut mean_grads: Vec<Array2<F>> = latents
            .iter()
            .map(|q| Array2::zeros((n_local, q.dim())))
            .collect();
        let mut var_grads: Vec<Array1<F>> =
            latents.iter().map(|q| Array1::zeros(q.dim())).collect();
        let mut layer_psi_grads = Vec::with_capacity(l);

        for i in 0..l {
            let input = self.layer_input(i, &latents, begin, end)?;
            let (target_means, target_var_trace): (Array2<F>, F) = if i == 0 {
                (y.slice(s![begin..end, ..]).to_owned(), F::zero())
            } else {
                (latents[i - 1].means().clone(), latents[i - 1].trace_variance())
            };
            let layer = &self.layers[i];
            let mut psi_grads = PsiGrads {
                means: Array2::zeros((n_local, input.dim())),
                shared_variance: Array1::zeros(input.dim()),
                z: Array2::zeros(layer.z.raw_dim()),
                variance: F::zero(),
                lengthscales: Array1::zeros(match &layer.kernel {
                    KernelSpec::ExpQuad { lengthscales, .. } => lengthscales.len(),
                    KernelSpec::Linear { .. } => 0,
                }),
                bias: F::zero(),
            };
            let targets_are_posterior = i > 0;
            let mut target_mean_grad = if targets_are_posterior {
                Some(Array2::<F>::zeros((n_local, target_means.ncols())))
            } else {
                None
            };
            let mut target_var_trace_grad = F::zero();
            let in_var = input.shared_variance().clone();
            for r in 0..n_local {
                accumulate_point_layer_gradients(
                    layer,
                    &adjoints[i],
                    &input.means().row(r),
                    &in_var.view(),
                    &target_means.row(r),
                    target_var_trace,
                    r,
                    &mut psi_grads,
                    target_mean_grad.as_mut().map(|g| g.row_mut(r)),
                    if targets_are_posterior {
                        Some(&mut target_var_trace_grad)
                    } else {
                        None
                    },
                )
                .map_err(|e| e.in_layer(i))?;
            }

            // route the input-side gradients into the latent posterior of
            // layer i (trimming skip-connection columns on the observed
            // layer; the supervised top has no latent input)
            let feeds_latent = !(self.is_supervised() && i == l - 1);
            if feeds_latent {
                let q1 = latents[i].dim();
                let mg = &mut mean_grads[i];
                *mg = &*mg + &psi_grads.means.slice(s![.., ..q1]);
                let vg = &mut var_grads[i];
                *vg = &*vg + &psi_grads.shared_variance.slice(s![..q1]);
            }
            // target-side gradients belong to latent i−1
            if let Some(tg) = target_mean_grad {
                mean_grads[i - 1] = &mean_grads[i - 1] + &tg;
                let vg = &mut var_grads[i - 1];
                vg.mapv_inplace(|v| v + target_var_trace_grad);
            }
            layer_psi_grads.push(psi_grads);
        }

        // KL mean-gradient of the unsupervised top layer: d(−KL)/dμ = −μ
        if !self.is_supervised() {
            let top = n_latent - 1;
            let m = latents[top].means();
            mean_grads[top] = &mean_grads[top] - m;
        }

        Ok(ShardGradOutput {
            layer_psi_grads,
            mean_grads,
            var_grads,
            latents,
        })
    }

    /// Entropy/KL contributions to the shared-variance gradients (central:
    /// they depend only on N and the variances).
    fn entropy_kl_variance_grads(&self, n: usize, var_grads: &mut [Array1<F>]) {
        let nf = F::c(n as f64);
        let half = F::c(0.5);
        let latent_vars: Vec<Array1<F>> = match &self.posteriors {
            Posteriors::Recognition(stack) => stack
                .log_shared_variances
                .iter()
                .map(|lv| lv.mapv(|v| v.exp()))
                .collect(),
            Posteriors::Explicit(qs) => {
                qs.iter().map(|q| q.shared_variance().clone()).collect()
            }
        };
        let n_latent = latent_vars.len();
        for (j, var) in latent_vars.iter().enumerate() {
            let is_unsup_top = !self.is_supervised() && j == n_latent - 1;
            for q in 0..var.len() {
                if is_unsup_top {
                    // d(−KL)/ds = −N/2·(1 − 1/s)
                    var_grads[j][q] =
                        var_grads[j][q] - nf * half * (F::one() - F::one() / var[q]);
                } else {
                    // dH/ds = N/(2s)
                    var_grads[j][q] = var_grads[j][q] + nf * half / var[q];
                }
            }
        }
    }

    /// Serial evaluation of the bound and the full packed gradient: the
    /// single-shard instance of the distributed pipeline.
    pub fn evaluate_gradients(&self, y: &ArrayView2<F>) -> Result<(BoundBreakdown<F>, Array1<F>)> {
        self.validate(y)?;
        let n = y.nrows();
        let stats = self.stats_for_rows(y, 0, n)?;
        let (breakdown, results) = self.assemble(&stats, y.ncols())?;
        let adjoints = self.adjoints(&stats, &results, y.ncols());
        let shard = self.scatter_rows(y, 0, n, &adjoints)?;
        let y_rows = y.slice(s![0..n, ..]);
        let mut grad = self.pack_shard_gradient(&y_rows, 0, shard)?;
        grad = &grad + &self.central_gradient_vector(n, &adjoints)?;
        Ok((breakdown, grad))
    }

    /// Shard-side packed gradient contribution: psi-side layer gradients
    /// and the latent-parameter gradients of the shard's rows (through the
    /// recognition backward when present). Central-only slots stay zero.
    /// `y_rows` are the shard's data rows; `global_begin` is their offset in
    /// the full data matrix (explicit-posterior slots need it).
    pub fn pack_shard_gradient(
        &self,
        y_rows: &ArrayView2<F>,
        global_begin: usize,
        shard: ShardGradOutput<F>,
    ) -> Result<Array1<F>> {
        let ShardGradOutput {
            layer_psi_grads,
            mean_grads,
            var_grads,
            latents: _,
        } = shard;
        let mut out = Array1::<F>::zeros(self.n_params());
        let mut at = 0;
        for (layer, psi) in self.layers.iter().zip(layer_psi_grads.iter()) {
            match &layer.kernel {
                KernelSpec::ExpQuad {
                    variance,
                    lengthscales,
                } => {
                    out[at] = *variance * psi.variance;
                    at += 1;
                    for (q, l) in lengthscales.iter().enumerate() {
                        out[at] = *l * psi.lengthscales[q];
                        at += 1;
                    }
                }
                KernelSpec::Linear { variance, bias } => {
                    out[at] = *variance * psi.variance;
                    at += 1;
                    if *bias > F::zero() {
                        out[at] = *bias * psi.bias;
                        at += 1;
                    }
                }
            }
            at += 1; // noise slot is central
            for g in psi.z.iter() {
                out[at] = *g;
                at += 1;
            }
        }
        match &self.posteriors {
            Posteriors::Recognition(stack) => {
                let rec = stack.backward(y_rows, &mean_grads, &var_grads)?;
                for mlp_stages in &rec.stages {
                    for (w, b) in mlp_stages {
                        for g in w.iter() {
                            out[at] = *g;
                            at += 1;
                        }
                        for g in b.iter() {
                            out[at] = *g;
                            at += 1;
                        }
                    }
                }
                for lv in &rec.log_shared_variances {
                    for g in lv.iter() {
                        out[at] = *g;
                        at += 1;
                    }
                }
            }
            Posteriors::Explicit(qs) => {
                for (j, q) in qs.iter().enumerate() {
                    let dim = q.dim();
                    let row0 = at + global_begin * dim;
                    for (r, row) in mean_grads[j].rows().into_iter().enumerate() {
                        for (c, g) in row.iter().enumerate() {
                            out[row0 + r * dim + c] = *g;
                        }
                    }
                    at += q.means().len();
                    for (s, g) in q.shared_variance().iter().zip(var_grads[j].iter()) {
                        out[at] = *s * *g;
                        at += 1;
                    }
                }
            }
        }
        debug_assert_eq!(at, out.len());
        Ok(out)
    }

    /// Central packed gradient contribution: the K_uu chain into Z and the
    /// kernel hyperparameters, the noise gradients, and the entropy/KL
    /// variance terms (they depend only on N and the shared variances).
    pub fn central_gradient_vector(
        &self,
        n: usize,
        adjoints: &[LayerAdjoints<F>],
    ) -> Result<Array1<F>> {
        let mut out = Array1::<F>::zeros(self.n_params());
        let mut at = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let (zc, vc, lc, bc) = central_layer_gradients(layer, &adjoints[i])
                .map_err(|e| e.in_layer(i))?;
            match &layer.kernel {
                KernelSpec::ExpQuad {
                    variance,
                    lengthscales,
                } => {
                    out[at] = *variance * vc;
                    at += 1;
                    for (q, l) in lengthscales.iter().enumerate() {
                        out[at] = *l * lc[q];
                        at += 1;
                    }
                }
                KernelSpec::Linear { variance, bias } => {
                    out[at] = *variance * vc;
                    at += 1;
                    if *bias > F::zero() {
                        out[at] = *bias * bc;
                        at += 1;
                    }
                }
            }
            out[at] = (layer.noise_variance - layer.noise_floor) * adjoints[i].dvalue_dnoise;
            at += 1;
            for g in zc.iter() {
                out[at] = *g;
                at += 1;
            }
        }
        // entropy/KL variance gradients, mapped into the variance slots
        let latent_dims: Vec<usize> = match &self.posteriors {
            Posteriors::Recognition(stack) => stack
                .log_shared_variances
                .iter()
                .map(|v| v.len())
                .collect(),
            Posteriors::Explicit(qs) => qs.iter().map(|q| q.dim()).collect(),
        };
        let mut var_grads: Vec<Array1<F>> =
            latent_dims.iter().map(|&d| Array1::zeros(d)).collect();
        self.entropy_kl_variance_grads(n, &mut var_grads);
        match &self.posteriors {
            Posteriors::Recognition(stack) => {
                for mlp in &stack.mlps {
                    at += mlp.n_params();
                }
                for (j, lv) in stack.log_shared_variances.iter().enumerate() {
                    let var = lv.mapv(|v| v.exp());
                    for q in 0..lv.len() {
                        out[at] = var[q] * var_grads[j][q];
                        at += 1;
                    }
                }
            }
            Posteriors::Explicit(qs) => {
                for (j, q) in qs.iter().enumerate() {
                    at += q.means().len();
                    for (s, g) in q.shared_variance().iter().zip(var_grads[j].iter()) {
                        out[at] = *s * *g;
                        at += 1;
                    }
                }
            }
        }
        debug_assert_eq!(at, out.len());
        Ok(out)
    }
}

/// Gradient contributions of one shard before the recognition backward.
#[derive(Debug, Clone)]
pub struct ShardGradOutput<F> {
    pub layer_psi_grads: Vec<PsiGrads<F>>,
    pub mean_grads: Vec<Array2<F>>,
    pub var_grads: Vec<Array1<F>>,
    pub latents: Vec<DiagGaussianPosterior<F>>,
}

// ---- parameter packing -------------------------------------------------

impl<F: Real> DgpModel<F> {
    /// Number of packed parameters. The layout, in order: per layer
    /// [ln variance, ln lengthscales | ln bias, ln (noise−floor), Z rows],
    /// then recognition weights/biases + log shared variances, or explicit
    /// means + ln variances.
    pub fn n_params(&self) -> usize {
        let mut n = 0;
        for layer in &self.layers {
            n += 1; // variance
            n += match &layer.kernel {
                KernelSpec::ExpQuad { lengthscales, .. } => lengthscales.len(),
                KernelSpec::Linear { bias, .. } => usize::from(*bias > F::zero()),
            };
            n += 1; // noise
            n += layer.z.len();
        }
        match &self.posteriors {
            Posteriors::Recognition(stack) => n += stack.n_params(),
            Posteriors::Explicit(qs) => {
                for q in qs {
                    n += q.means().len() + q.dim();
                }
            }
        }
        n
    }

    pub fn pack_parameters(&self) -> Array1<F> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            match &layer.kernel {
                KernelSpec::ExpQuad {
                    variance,
                    lengthscales,
                } => {
                    out.push(variance.ln());
                    out.extend(lengthscales.iter().map(|l| l.ln()));
                }
                KernelSpec::Linear { variance, bias } => {
                    out.push(variance.ln());
                    if *bias > F::zero() {
                        out.push(bias.ln());
                    }
                }
            }
            out.push((layer.noise_variance - layer.noise_floor).ln());
            out.extend(layer.z.iter().copied());
        }
        match &self.posteriors {
            Posteriors::Recognition(stack) => {
                for mlp in &stack.mlps {
                    for stage in &mlp.stages {
                        out.extend(stage.weights.iter().copied());
                        out.extend(stage.bias.iter().copied());
                    }
                }
                for lv in &stack.log_shared_variances {
                    out.extend(lv.iter().copied());
                }
            }
            Posteriors::Explicit(qs) => {
                for q in qs {
                    out.extend(q.means().iter().copied());
                    out.extend(q.shared_variance().iter().map(|v| v.ln()));
                }
            }
        }
        Array1::from_vec(out)
    }

    pub fn unpack_parameters(&mut self, theta: &ArrayView1<F>) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::ParamLength {
                expected: self.n_params(),
                got: theta.len(),
            });
        }
        let mut at = 0;
        let mut take = |k: usize| {
            let s = theta.slice(s![at..at + k]).to_owned();
            at += k;
            s
        };
        for layer in &mut self.layers {
            match &mut layer.kernel {
                KernelSpec::ExpQuad {
                    variance,
                    lengthscales,
                } => {
                    *variance = take(1)[0].exp();
                    let ls = take(lengthscales.len());
                    *lengthscales = ls.mapv(|v| v.exp());
                }
                KernelSpec::Linear { variance, bias } => {
                    *variance = take(1)[0].exp();
                    if *bias > F::zero() {
                        *bias = take(1)[0].exp();
                    }
                }
            }
            layer.noise_variance = layer.noise_floor + take(1)[0].exp();
            let zflat = take(layer.z.len());
            layer.z = Array2::from_shape_vec(layer.z.raw_dim(), zflat.to_vec()).unwrap();
        }
        match &mut self.posteriors {
            Posteriors::Recognition(stack) => {
                for mlp in &mut stack.mlps {
                    for stage in &mut mlp.stages {
                        let w = take(stage.weights.len());
                        stage.weights =
                            Array2::from_shape_vec(stage.weights.raw_dim(), w.to_vec()).unwrap();
                        stage.bias = take(stage.bias.len());
                    }
                }
                for lv in &mut stack.log_shared_variances {
                    *lv = take(lv.len());
                }
            }
            Posteriors::Explicit(qs) => {
                for q in qs.iter_mut() {
                    let means = take(q.means().len());
                    let means =
                        Array2::from_shape_vec(q.means().raw_dim(), means.to_vec()).unwrap();
                    let var = take(q.dim()).mapv(|v| v.exp());
                    *q = DiagGaussianPosterior::new(means, var)?;
                }
            }
        }
        debug_assert_eq!(at, theta.len());
        Ok(())
    }

}


// ---- structural configuration -------------------------------------------

/// Structural description of a model, sufficient to rebuild its skeleton
/// (checkpoint header, worker bootstrap, CLI config).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub mode: ModeKind,
    #[serde(default)]
    pub skip_connection: bool,
    /// Latent widths bottom-up: q(X_1)..; excludes observed supervised inputs.
    pub latent_dims: Vec<usize>,
    /// Inducing count per layer, observed layer first.
    pub inducing: Vec<usize>,
    /// Kernel family per layer, observed layer first.
    pub kernels: Vec<KernelFamily>,
    /// Initial bias of linear kernels; zero keeps the bias out of the
    /// optimized parameters.
    #[serde(default)]
    pub linear_bias: f64,
    /// Present when the posteriors are recognition-reparameterized.
    #[serde(default)]
    pub recognition: Option<RecognitionConfig>,
    /// Input dimensionality (supervised mode; filled at initialization).
    #[serde(default)]
    pub input_dim: usize,
    /// Data dimensionality (filled at initialization).
    #[serde(default)]
    pub data_dim: usize,
    /// Number of training rows (explicit posteriors need it).
    #[serde(default)]
    pub n_train: usize,
    /// Additive noise floor per layer (surrogate usage).
    #[serde(default)]
    pub noise_floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Unsupervised,
    Supervised,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RecognitionConfig {
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub tanh_output: bool,
}

impl ModelConfig {
    pub fn n_layers(&self) -> usize {
        self.latent_dims.len() + usize::from(self.mode == ModeKind::Supervised)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.n_layers();
        if l == 0 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if self.inducing.len() != l {
            return Err(Error::Config(format!(
                "field `inducing` must list {} layers, got {}",
                l,
                self.inducing.len()
            )));
        }
        if self.kernels.len() != l {
            return Err(Error::Config(format!(
                "field `kernels` must list {} layers, got {}",
                l,
                self.kernels.len()
            )));
        }
        if self.inducing.iter().any(|m| *m == 0) {
            return Err(Error::Config("inducing counts must be ≥ 1".into()));
        }
        if self.mode == ModeKind::Unsupervised && self.skip_connection {
            return Err(Error::Config(
                "skip_connection requires supervised mode".into(),
            ));
        }
        if self.recognition.is_some() && self.latent_dims.is_empty() {
            return Err(Error::Config(
                "recognition model needs at least one latent layer".into(),
            ));
        }
        Ok(())
    }

    /// Kernel input width of layer `i` once data/input dims are known.
    pub fn layer_kernel_dim(&self, i: usize) -> usize {
        let l = self.n_layers();
        if self.mode == ModeKind::Supervised && i == l - 1 {
            return self.input_dim;
        }
        let base = self.latent_dims[i];
        if i == 0 && self.skip_connection && l >= 2 {
            base + self.input_dim
        } else {
            base
        }
    }

    /// Build a structurally complete model with placeholder parameter
    /// values, ready for `unpack_parameters`. Workers and the checkpoint
    /// loader bootstrap from this.
    pub fn build_skeleton<F: Real>(&self) -> Result<DgpModel<F>> {
        self.validate()?;
        let l = self.n_layers();
        let mut layers = Vec::with_capacity(l);
        for i in 0..l {
            let dim = self.layer_kernel_dim(i);
            let kernel = match self.kernels[i] {
                KernelFamily::ExpQuad => {
                    KernelSpec::expquad(F::one(), Array1::from_elem(dim, F::one()))?
                }
                KernelFamily::Linear => {
                    KernelSpec::linear(F::one(), F::c(self.linear_bias))?
                }
            };
            let mut layer = LayerParams::new(
                Array2::from_elem((self.inducing[i], dim), F::c(0.01)),
                kernel,
                F::c(0.1) + F::c(self.noise_floor),
            )?;
            layer.noise_floor = F::c(self.noise_floor);
            layers.push(layer);
        }
        let posteriors = match &self.recognition {
            Some(rc) => {
                let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
                Posteriors::Recognition(RecognitionStack::init(
                    self.data_dim,
                    &self.latent_dims,
                    &rc.hidden_widths,
                    rc.tanh_output,
                    &mut rng,
                )?)
            }
            None => Posteriors::Explicit(
                self.latent_dims
                    .iter()
                    .map(|&q| {
                        DiagGaussianPosterior::new(
                            Array2::zeros((self.n_train, q)),
                            Array1::from_elem(q, F::one()),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let mode = match self.mode {
            ModeKind::Unsupervised => Mode::Unsupervised,
            ModeKind::Supervised => Mode::Supervised {
                inputs: Array2::zeros((self.n_train, self.input_dim)),
                skip_connection: self.skip_connection,
            },
        };
        Ok(DgpModel {
            layers,
            posteriors,
            mode,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_model(seed: u64) -> (DgpModel<f64>, Array2<f64>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let y = crate::model::tests::randu(&mut rng, 6, 2);
        let stack = RecognitionStack::init(2, &[2, 1], &[3], false, &mut rng).unwrap();
        let layers = vec![
            LayerParams::new(
                crate::model::tests::randu(&mut rng, 3, 2),
                KernelSpec::expquad(1.0, array![1.0, 1.1]).unwrap(),
                0.4,
            )
            .unwrap(),
            LayerParams::new(
                crate::model::tests::randu(&mut rng, 2, 1),
                KernelSpec::expquad(0.8, array![1.2]).unwrap(),
                0.5,
            )
            .unwrap(),
        ];
        (
            DgpModel {
                layers,
                posteriors: Posteriors::Recognition(stack),
                mode: Mode::Unsupervised,
            },
            y,
        )
    }

    pub(crate) fn randu(rng: &mut ChaCha20Rng, n: usize, d: usize) -> Array2<f64> {
        use rand::Rng;
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn breakdown_sums_to_total() {
        let (model, y) = tiny_model(3);
        let b = model.evaluate_bound(&y.view()).unwrap();
        let sum: f64 = b.free_energies.iter().sum::<f64>()
            + b.entropies.iter().sum::<f64>()
            - b.kl_top;
        assert!((b.total - sum).abs() < 1e-12);
        assert_eq!(b.free_energies.len(), 2);
        assert_eq!(b.entropies.len(), 1);
    }

    #[test]
    fn pack_unpack_roundtrip_and_reevaluation() {
        let (mut model, y) = tiny_model(4);
        let theta = model.pack_parameters();
        assert_eq!(theta.len(), model.n_params());
        let b0 = model.evaluate_bound(&y.view()).unwrap().total;
        model.unpack_parameters(&theta.view()).unwrap();
        let theta2 = model.pack_parameters();
        assert_eq!(theta, theta2);
        let b1 = model.evaluate_bound(&y.view()).unwrap().total;
        assert_eq!(b0, b1);
    }

    #[test]
    fn unpack_rejects_wrong_length() {
        let (mut model, _) = tiny_model(5);
        let theta = Array1::zeros(model.n_params() + 1);
        assert!(model.unpack_parameters(&theta.view()).is_err());
    }

    #[test]
    fn perturbing_each_coordinate_changes_exactly_one_parameter_block() {
        let (mut model, y) = tiny_model(6);
        let theta = model.pack_parameters();
        let base = model.evaluate_bound(&y.view()).unwrap().total;
        // a couple of representative coordinates: kernel variance of layer 0
        // and a recognition weight near the end
        for idx in [0usize, theta.len() - 1] {
            let mut t = theta.clone();
            t[idx] += 0.05;
            model.unpack_parameters(&t.view()).unwrap();
            let changed = model.evaluate_bound(&y.view()).unwrap().total;
            assert!((changed - base).abs() > 0.0, "coordinate {idx} had no effect");
            model.unpack_parameters(&theta.view()).unwrap();
        }
    }

    #[test]
    fn recognition_and_explicit_posteriors_agree_when_equal() {
        let (model, y) = tiny_model(7);
        let b_rec = model.evaluate_bound(&y.view()).unwrap().total;
        let latents = model.posteriors_for(&y.view(), 0, y.nrows()).unwrap();
        let explicit = DgpModel {
            layers: model.layers.clone(),
            posteriors: Posteriors::Explicit(latents),
            mode: Mode::Unsupervised,
        };
        let b_exp = explicit.evaluate_bound(&y.view()).unwrap().total;
        assert_eq!(b_rec, b_exp);
    }

    #[test]
    fn top_standard_normal_posterior_zeroes_kl() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let y = randu(&mut rng, 5, 2);
        let q1 = DiagGaussianPosterior::new(randu(&mut rng, 5, 2), array![0.3, 0.4]).unwrap();
        let q2 = DiagGaussianPosterior::new(Array2::zeros((5, 1)), array![1.0]).unwrap();
        let layers = vec![
            LayerParams::new(
                randu(&mut rng, 3, 2),
                KernelSpec::expquad(1.0, array![1.0, 1.0]).unwrap(),
                0.4,
            )
            .unwrap(),
            LayerParams::new(
                randu(&mut rng, 2, 1),
                KernelSpec::expquad(1.0, array![1.0]).unwrap(),
                0.5,
            )
            .unwrap(),
        ];
        let model = DgpModel {
            layers,
            posteriors: Posteriors::Explicit(vec![q1, q2]),
            mode: Mode::Unsupervised,
        };
        let b = model.evaluate_bound(&y.view()).unwrap();
        assert_eq!(b.kl_top, 0.0);
        let expect =
            b.free_energies.iter().sum::<f64>() + b.entropies.iter().sum::<f64>();
        assert!((b.total - expect).abs() < 1e-12);
    }
}
