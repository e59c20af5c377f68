//! The recognition model: one MLP per layer mapping the means of the layer
//! below to this layer's variational means, with tanh hidden stages and a
//! linear output stage (tanh output available behind a flag). Shared
//! log-variances per layer are free parameters alongside the weights.

use crate::error::{Error, Result};
use crate::posterior::DiagGaussianPosterior;
use crate::scalar::Real;
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// One affine stage: x ↦ x·W + b with W of shape (in, out).
#[derive(Debug, Clone)]
pub struct AffineStage<F> {
    pub weights: Array2<F>,
    pub bias: Array1<F>,
}

/// Feed-forward network, tanh on hidden stages.
#[derive(Debug, Clone)]
pub struct Mlp<F> {
    pub stages: Vec<AffineStage<F>>,
    /// Apply tanh to the final stage as well (off by default: unbounded
    /// means are required under an unconstrained Gaussian prior).
    pub tanh_output: bool,
}

impl<F: Real> Mlp<F> {
    /// Widths [input, hidden.., output]; weights Xavier-uniform, biases zero.
    pub fn init(widths: &[usize], tanh_output: bool, rng: &mut ChaCha20Rng) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|w| *w == 0) {
            return Err(Error::invalid("mlp", "widths must be ≥ 1 with ≥ 2 stages"));
        }
        let mut stages = Vec::with_capacity(widths.len() - 1);
        for s in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[s], widths[s + 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights =
                Array2::from_shape_fn((fan_in, fan_out), |_| F::c(rng.gen_range(-a..a)));
            stages.push(AffineStage {
                weights,
                bias: Array1::zeros(fan_out),
            });
        }
        Ok(Mlp { stages, tanh_output })
    }

    pub fn input_dim(&self) -> usize {
        self.stages[0].weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.stages.last().unwrap().weights.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.weights.len() + s.bias.len())
            .sum()
    }

    /// Rowwise forward pass, keeping every stage's post-activation output
    /// for the backward pass. activations[0] is the input itself.
    pub fn forward_cached(&self, x: &ArrayView2<F>) -> Result<Vec<Array2<F>>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(
                "mlp",
                format!("input has {} columns, expected {}", x.ncols(), self.input_dim()),
            ));
        }
        let mut acts = Vec::with_capacity(self.stages.len() + 1);
        acts.push(x.to_owned());
        for (s, stage) in self.stages.iter().enumerate() {
            let mut h = acts[s].dot(&stage.weights);
            for mut row in h.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = *v + stage.bias[j];
                }
            }
            let is_last = s + 1 == self.stages.len();
            if !is_last || self.tanh_output {
                h.mapv_inplace(|v| v.tanh());
            }
            acts.push(h);
        }
        Ok(acts)
    }

    pub fn forward(&self, x: &ArrayView2<F>) -> Result<Array2<F>> {
        Ok(self.forward_cached(x)?.pop().unwrap())
    }

    /// Reverse-mode pass. Returns per-stage (weight, bias) gradients and the
    /// gradient with respect to the input rows.
    pub fn backward(
        &self,
        acts: &[Array2<F>],
        upstream: &ArrayView2<F>,
    ) -> Result<(Vec<(Array2<F>, Array1<F>)>, Array2<F>)> {
        let last = acts.last().unwrap();
        if upstream.raw_dim() != last.raw_dim() {
            return Err(Error::shape("mlp_backward", "upstream shape"));
        }
        let mut grads = vec![
            (Array2::zeros((0, 0)), Array1::zeros(0));
            self.stages.len()
        ];
        let mut delta = upstream.to_owned();
        for s in (0..self.stages.len()).rev() {
            let is_last = s + 1 == self.stages.len();
            if !is_last || self.tanh_output {
                // δ ∘ (1 − tanh²); acts[s+1] already holds tanh(pre-activation)
                let act = &acts[s + 1];
                for (d, a) in delta.iter_mut().zip(act.iter()) {
                    *d = *d * (F::one() - *a * *a);
                }
            }
            let wg = acts[s].t().dot(&delta);
            let bg = delta.sum_axis(ndarray::Axis(0));
            delta = delta.dot(&self.stages[s].weights.t());
            grads[s] = (wg, bg);
        }
        Ok((grads, delta))
    }
}

/// One MLP per DGP layer plus the per-layer shared log-variances.
#[derive(Debug, Clone)]
pub struct RecognitionStack<F> {
    pub mlps: Vec<Mlp<F>>,
    pub log_shared_variances: Vec<Array1<F>>,
}

/// Gradients for every recognition parameter, in stack order.
#[derive(Debug, Clone)]
pub struct RecognitionGrads<F> {
    pub stages: Vec<Vec<(Array2<F>, Array1<F>)>>,
    pub log_shared_variances: Vec<Array1<F>>,
}

impl<F: Real> RecognitionGrads<F> {
    pub fn zeros_like(stack: &RecognitionStack<F>) -> Self {
        RecognitionGrads {
            stages: stack
                .mlps
                .iter()
                .map(|m| {
                    m.stages
                        .iter()
                        .map(|s| {
                            (
                                Array2::zeros(s.weights.raw_dim()),
                                Array1::zeros(s.bias.len()),
                            )
                        })
                        .collect()
                })
                .collect(),
            log_shared_variances: stack
                .log_shared_variances
                .iter()
                .map(|v| Array1::zeros(v.len()))
                .collect(),
        }
    }

    pub fn add(&mut self, other: &RecognitionGrads<F>) {
        for (a, b) in self.stages.iter_mut().zip(other.stages.iter()) {
            for ((wa, ba), (wb, bb)) in a.iter_mut().zip(b.iter()) {
                *wa = &*wa + wb;
                *ba = &*ba + bb;
            }
        }
        for (a, b) in self
            .log_shared_variances
            .iter_mut()
            .zip(other.log_shared_variances.iter())
        {
            *a = &*a + b;
        }
    }
}

impl<F: Real> RecognitionStack<F> {
    /// Builds the stack for latent widths `latent_dims` on data of width
    /// `data_dim`, each MLP getting the given hidden widths. Log-variances
    /// start at ln 0.1.
    pub fn init(
        data_dim: usize,
        latent_dims: &[usize],
        hidden_widths: &[usize],
        tanh_output: bool,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        if latent_dims.is_empty() {
            return Err(Error::invalid("recognition", "no latent layers"));
        }
        let mut mlps = Vec::with_capacity(latent_dims.len());
        let mut in_dim = data_dim;
        for &q in latent_dims {
            let mut widths = Vec::with_capacity(hidden_widths.len() + 2);
            widths.push(in_dim);
            widths.extend_from_slice(hidden_widths);
            widths.push(q);
            mlps.push(Mlp::init(&widths, tanh_output, rng)?);
            in_dim = q;
        }
        let log_shared_variances = latent_dims
            .iter()
            .map(|&q| Array1::from_elem(q, F::c(0.1f64.ln())))
            .collect();
        Ok(RecognitionStack {
            mlps,
            log_shared_variances,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.mlps.len()
    }

    pub fn n_params(&self) -> usize {
        self.mlps.iter().map(|m| m.n_params()).sum::<usize>()
            + self
                .log_shared_variances
                .iter()
                .map(|v| v.len())
                .sum::<usize>()
    }

    fn check_composition(&self, data_dim: usize) -> Result<()> {
        let mut in_dim = data_dim;
        for (l, mlp) in self.mlps.iter().enumerate() {
            if mlp.input_dim() != in_dim {
                return Err(Error::shape(
                    "recognition",
                    format!(
                        "mlp {} expects input width {}, got {}",
                        l,
                        mlp.input_dim(),
                        in_dim
                    ),
                ));
            }
            if self.log_shared_variances[l].len() != mlp.output_dim() {
                return Err(Error::shape(
                    "recognition",
                    format!("layer {} variance width mismatch", l),
                ));
            }
            in_dim = mlp.output_dim();
        }
        Ok(())
    }

    /// μ_l = g_l(μ_{l−1}) rowwise, variances broadcast from the shared
    /// log-variances. Returns one posterior per latent layer, bottom up.
    pub fn forward(&self, y: &ArrayView2<F>) -> Result<Vec<DiagGaussianPosterior<F>>> {
        self.check_composition(y.ncols())?;
        let mut out = Vec::with_capacity(self.mlps.len());
        let mut x = y.to_owned();
        for (l, mlp) in self.mlps.iter().enumerate() {
            x = mlp.forward(&x.view())?;
            let var = self.log_shared_variances[l].mapv(|v| v.exp());
            out.push(DiagGaussianPosterior::new(x.clone(), var)?);
        }
        Ok(out)
    }

    /// Reverse-mode gradients of ⟨upstream_means, means⟩ + ⟨upstream_vars,
    /// variances⟩. Means of layer l feed both the bound and mlp_{l+1}, so
    /// input-gradients accumulate on the way down.
    pub fn backward(
        &self,
        y: &ArrayView2<F>,
        upstream_means: &[Array2<F>],
        upstream_vars: &[Array1<F>],
    ) -> Result<RecognitionGrads<F>> {
        self.check_composition(y.ncols())?;
        if upstream_means.len() != self.mlps.len() || upstream_vars.len() != self.mlps.len() {
            return Err(Error::shape("recognition_backward", "upstream count"));
        }
        // forward with caches
        let mut caches = Vec::with_capacity(self.mlps.len());
        let mut x = y.to_owned();
        for mlp in &self.mlps {
            let acts = mlp.forward_cached(&x.view())?;
            x = acts.last().unwrap().clone();
            caches.push(acts);
        }
        let mut grads = RecognitionGrads::zeros_like(self);
        // d var / d logvar = var
        for (l, uv) in upstream_vars.iter().enumerate() {
            if uv.len() != self.log_shared_variances[l].len() {
                return Err(Error::shape("recognition_backward", "variance upstream"));
            }
            let var = self.log_shared_variances[l].mapv(|v| v.exp());
            grads.log_shared_variances[l] = uv * &var;
        }
        // top-down accumulation through the mean chain
        let mut carry: Option<Array2<F>> = None;
        for l in (0..self.mlps.len()).rev() {
            let mut upstream = upstream_means[l].clone();
            if let Some(c) = carry.take() {
                upstream = &upstream + &c;
            }
            let (stage_grads, input_grad) =
                self.mlps[l].backward(&caches[l], &upstream.view())?;
            grads.stages[l] = stage_grads;
            carry = Some(input_grad);
        }
        Ok(grads)
    }
}
