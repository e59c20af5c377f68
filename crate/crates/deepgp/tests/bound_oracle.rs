//! Layer-bound correctness against independent references: the dense GP
//! log marginal (exact-collapse configuration), a Monte-Carlo expectation
//! oracle for hidden layers, and finite differences for every gradient.

use deepgp::bound::{
    collapsed_qu, explicit_observed_bound, hidden_layer_bound, layer_bound_gradients,
    observed_layer_bound, LayerParams, LayerTargets,
};
use deepgp::kernel::KernelSpec;
use deepgp::posterior::DiagGaussianPosterior;
use deepgp::psi::compute_psi;
use deepgp_testkit::{datasets, dense_gp_log_marginal, dense_gp_posterior_mean};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_kernel(rng: &mut ChaCha8Rng, q: usize, linear: bool) -> KernelSpec<f64> {
    if linear {
        KernelSpec::linear(rng.gen_range(0.6..1.4), 0.0).unwrap()
    } else {
        let ls = Array1::from_shape_fn(q, |_| rng.gen_range(0.9..1.8));
        KernelSpec::expquad(rng.gen_range(0.7..1.3), ls).unwrap()
    }
}

#[test]
fn exact_collapse_matches_dense_gp_marginal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let linear = trial % 2 == 1;
        let n = rng.gen_range(8..=16);
        let q = rng.gen_range(1..=2);
        let d = rng.gen_range(1..=3);
        let x = Array2::from_shape_fn((n, q), |_| rng.gen_range(-1.5..1.5));
        let y = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let kernel = random_kernel(&mut rng, q, linear);
        let noise = rng.gen_range(1.0..3.0);

        // Z = means, variance → 0: the bound collapses onto the exact GP
        let q1 =
            DiagGaussianPosterior::new(x.clone(), Array1::from_elem(q, 1e-12)).unwrap();
        let layer = LayerParams::new(x.clone(), kernel.clone(), noise).unwrap();
        let bound = observed_layer_bound(&y.view(), &q1, &layer).unwrap();

        let kxx = kernel.eval(&x.view(), &x.view()).unwrap();
        let exact = dense_gp_log_marginal(&kxx.view(), &y.view(), noise);
        let rel = (bound.value - exact).abs() / exact.abs();
        assert!(
            rel < 1e-6,
            "trial {trial} (linear={linear}): bound {} vs dense {} rel {rel}",
            bound.value,
            exact
        );
    }
}

#[test]
fn bound_never_exceeds_dense_marginal() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..20 {
        let linear = trial % 2 == 1;
        let n = 14;
        let q = 2;
        let m = rng.gen_range(2..=6);
        let x = Array2::from_shape_fn((n, q), |_| rng.gen_range(-1.5..1.5));
        let y = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
        let z = Array2::from_shape_fn((m, q), |_| rng.gen_range(-1.5..1.5));
        let kernel = random_kernel(&mut rng, q, linear);
        let noise = rng.gen_range(0.5..2.0);
        let q1 =
            DiagGaussianPosterior::new(x.clone(), Array1::from_elem(q, 1e-12)).unwrap();
        let layer = LayerParams::new(z, kernel.clone(), noise).unwrap();
        let bound = observed_layer_bound(&y.view(), &q1, &layer).unwrap();
        let kxx = kernel.eval(&x.view(), &x.view()).unwrap();
        let exact = dense_gp_log_marginal(&kxx.view(), &y.view(), noise);
        assert!(
            bound.value <= exact + 1e-8,
            "trial {trial}: sparse bound {} exceeds dense {}",
            bound.value,
            exact
        );
    }
}

#[test]
fn bound_is_additive_over_output_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let n = 9;
    let x_means = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
    let q1 = DiagGaussianPosterior::new(x_means, ndarray::array![0.2, 0.3]).unwrap();
    let z = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
    let layer = LayerParams::new(
        z,
        KernelSpec::expquad(1.1f64, ndarray::array![1.0, 1.2]).unwrap(),
        0.4,
    )
    .unwrap();
    let y = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
    let both = observed_layer_bound(&y.view(), &q1, &layer).unwrap().value;
    let c0 = y.slice(ndarray::s![.., 0..1]).to_owned();
    let c1 = y.slice(ndarray::s![.., 1..2]).to_owned();
    let b0 = observed_layer_bound(&c0.view(), &q1, &layer).unwrap().value;
    let b1 = observed_layer_bound(&c1.view(), &q1, &layer).unwrap().value;
    assert!((both - (b0 + b1)).abs() < 1e-9 * both.abs().max(1.0));
}

#[test]
fn shifting_targets_away_decreases_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let n = 10;
    let x_means = Array2::from_shape_fn((n, 1), |_| rng.gen_range(-1.0..1.0));
    let q1 = DiagGaussianPosterior::new(x_means, ndarray::array![0.1]).unwrap();
    let z = Array2::from_shape_fn((3, 1), |_| rng.gen_range(-1.0..1.0));
    let layer = LayerParams::new(
        z,
        KernelSpec::expquad(1.0f64, ndarray::array![1.0]).unwrap(),
        0.3,
    )
    .unwrap();
    let y = Array2::from_shape_fn((n, 1), |_| rng.gen_range(-0.5..0.5));
    let base = observed_layer_bound(&y.view(), &q1, &layer).unwrap().value;
    let shifted = y.mapv(|v| v + 10.0);
    let far = observed_layer_bound(&shifted.view(), &q1, &layer).unwrap().value;
    assert!(far < base);
}

#[test]
fn bound_invariant_under_joint_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 8;
    let means = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
    let y = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
    let q1 = DiagGaussianPosterior::new(means.clone(), ndarray::array![0.2, 0.1]).unwrap();
    let z = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));
    let layer = LayerParams::new(
        z,
        KernelSpec::expquad(0.9f64, ndarray::array![1.0, 1.1]).unwrap(),
        0.5,
    )
    .unwrap();
    let base = observed_layer_bound(&y.view(), &q1, &layer).unwrap().value;

    let perm: Vec<usize> = (0..n).rev().collect();
    let means_p = Array2::from_shape_fn((n, 2), |(i, j)| means[(perm[i], j)]);
    let y_p = Array2::from_shape_fn((n, 2), |(i, j)| y[(perm[i], j)]);
    let q1p = DiagGaussianPosterior::new(means_p, ndarray::array![0.2, 0.1]).unwrap();
    let permuted = observed_layer_bound(&y_p.view(), &q1p, &layer).unwrap().value;
    assert!((base - permuted).abs() <= 1e-10 * base.abs().max(1.0));
}

#[test]
fn adding_inducing_points_never_decreases_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for trial in 0..10 {
        let n = 12;
        let means = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.5..1.5));
        let y = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
        let q1 = DiagGaussianPosterior::new(means, ndarray::array![0.15, 0.25]).unwrap();
        let z_small = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.5..1.5));
        let mut z_big = Array2::zeros((5, 2));
        z_big.slice_mut(ndarray::s![0..3, ..]).assign(&z_small);
        for i in 3..5 {
            for j in 0..2 {
                z_big[(i, j)] = rng.gen_range(-1.5..1.5);
            }
        }
        let kernel = KernelSpec::expquad(1.0f64, ndarray::array![1.0, 1.0]).unwrap();
        let small = observed_layer_bound(
            &y.view(),
            &q1,
            &LayerParams::new(z_small, kernel.clone(), 0.4).unwrap(),
        )
        .unwrap()
        .value;
        let big = observed_layer_bound(
            &y.view(),
            &q1,
            &LayerParams::new(z_big, kernel, 0.4).unwrap(),
        )
        .unwrap()
        .value;
        assert!(
            big >= small - 1e-6 * small.abs().max(1.0),
            "trial {trial}: {big} < {small}"
        );
    }
}

#[test]
fn hidden_layer_delta_limit_matches_observed() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let n = 7;
    let out_means = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
    let q_out =
        DiagGaussianPosterior::new(out_means.clone(), Array1::from_elem(2, 1e-14)).unwrap();
    let in_means = Array2::from_shape_fn((n, 1), |_| rng.gen_range(-1.0..1.0));
    let q_in = DiagGaussianPosterior::new(in_means, ndarray::array![0.2]).unwrap();
    let z = Array2::from_shape_fn((3, 1), |_| rng.gen_range(-1.0..1.0));
    let layer = LayerParams::new(
        z,
        KernelSpec::expquad(1.1f64, ndarray::array![0.9]).unwrap(),
        0.6,
    )
    .unwrap();
    let hidden = hidden_layer_bound(&q_out, &q_in, &layer).unwrap().value;
    let observed = observed_layer_bound(&out_means.view(), &q_in, &layer)
        .unwrap()
        .value;
    assert!((hidden - observed).abs() < 1e-8 * observed.abs().max(1.0));
}

#[test]
fn hidden_layer_matches_monte_carlo_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let n = 6;
    let d = 2;
    let out_means = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
    let out_var = ndarray::array![0.3, 0.15];
    let q_out = DiagGaussianPosterior::new(out_means.clone(), out_var.clone()).unwrap();
    let in_means = Array2::from_shape_fn((n, 1), |_| rng.gen_range(-1.0..1.0));
    let q_in = DiagGaussianPosterior::new(in_means, ndarray::array![0.2]).unwrap();
    let z = Array2::from_shape_fn((3, 1), |_| rng.gen_range(-1.0..1.0));
    let layer = LayerParams::new(
        z,
        KernelSpec::expquad(1.0f64, ndarray::array![1.0]).unwrap(),
        0.5,
    )
    .unwrap();
    let hidden = hidden_layer_bound(&q_out, &q_in, &layer).unwrap().value;

    // Monte-Carlo oracle: E over q_out of the observed-layer bound
    let samples = 100_000;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..samples {
        let mut x = out_means.clone();
        for i in 0..n {
            for j in 0..d {
                let e: f64 = StandardNormal.sample(&mut rng);
                x[(i, j)] += out_var[j].sqrt() * e;
            }
        }
        let b = observed_layer_bound(&x.view(), &q_in, &layer).unwrap().value;
        sum += b;
        sumsq += b * b;
    }
    let mean = sum / samples as f64;
    let var = (sumsq / samples as f64 - mean * mean).max(0.0);
    let se = (var / samples as f64).sqrt();
    assert!(
        (hidden - mean).abs() < 3.0 * se,
        "hidden bound {hidden} vs MC {mean} ± {se}"
    );
}

#[test]
fn hidden_bound_scales_with_duplicated_points() {
    // all-zero output means: the data-dependent sums reduce to the Σ tr(Σ)
    // terms and double exactly when the points are duplicated
    let n = 5;
    let out_means = Array2::<f64>::zeros((n, 2));
    let q_out = DiagGaussianPosterior::new(out_means, ndarray::array![0.4, 0.2]).unwrap();
    let in_means = datasets::randn(n, 1, 7);
    let q_in = DiagGaussianPosterior::new(in_means.clone(), ndarray::array![0.1]).unwrap();
    let z = datasets::randn(3, 1, 8);
    let layer = LayerParams::new(
        z,
        KernelSpec::expquad(1.0f64, ndarray::array![1.0]).unwrap(),
        0.5,
    )
    .unwrap();
    let s1 = deepgp::bound::layer_stats(&layer, &q_in, &LayerTargets::Posterior(&q_out)).unwrap();

    let mut means2 = Array2::<f64>::zeros((2 * n, 1));
    means2.slice_mut(ndarray::s![..n, ..]).assign(&in_means);
    means2.slice_mut(ndarray::s![n.., ..]).assign(&in_means);
    let q_in2 = DiagGaussianPosterior::new(means2, ndarray::array![0.1]).unwrap();
    let q_out2 = DiagGaussianPosterior::new(
        Array2::<f64>::zeros((2 * n, 2)),
        ndarray::array![0.4, 0.2],
    )
    .unwrap();
    let s2 = deepgp::bound::layer_stats(&layer, &q_in2, &LayerTargets::Posterior(&q_out2)).unwrap();

    assert!((s2.trace_targets - 2.0 * s1.trace_targets).abs() < 1e-12);
    assert!((s2.psi0 - 2.0 * s1.psi0).abs() < 1e-12);
    for (a, b) in s2.g.iter().zip(s1.g.iter()) {
        assert!((a - 2.0 * b).abs() < 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn collapsed_qu_zero_data_and_exact_collapse() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let n = 9;
    let x = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.2..1.2));
    let kernel = KernelSpec::expquad(1.0f64, ndarray::array![1.0, 1.3]).unwrap();
    let noise = 1.5;
    let q1 = DiagGaussianPosterior::new(x.clone(), Array1::from_elem(2, 1e-12)).unwrap();
    let layer = LayerParams::new(x.clone(), kernel.clone(), noise).unwrap();
    let stats = compute_psi(&kernel, &q1, &layer.z.view()).unwrap();

    // zero targets → zero posterior mean
    let y0 = Array2::<f64>::zeros((n, 2));
    let (mean0, _) = collapsed_qu(&layer, &stats, &y0.view()).unwrap();
    assert!(mean0.iter().all(|v| v.abs() < 1e-12));

    // exact collapse → dense GP posterior mean at Z = X
    let y = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
    let (mean, _) = collapsed_qu(&layer, &stats, &y.view()).unwrap();
    let kxx = kernel.eval(&x.view(), &x.view()).unwrap();
    let oracle = dense_gp_posterior_mean(&kxx.view(), &y.view(), noise);
    for (a, b) in mean.iter().zip(oracle.iter()) {
        assert!((a - b).abs() < 1e-6 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn explicit_bound_at_optimal_qu_matches_collapsed() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    for linear in [false, true] {
        let n = 8;
        let m = 4;
        let means = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
        let q1 = DiagGaussianPosterior::new(means, ndarray::array![0.2, 0.3]).unwrap();
        let z = Array2::from_shape_fn((m, 2), |_| rng.gen_range(-1.0..1.0));
        let kernel = random_kernel(&mut rng, 2, linear);
        let layer = LayerParams::new(z, kernel.clone(), 0.7).unwrap();
        let y = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));

        let collapsed = observed_layer_bound(&y.view(), &q1, &layer).unwrap().value;
        let stats = compute_psi(&kernel, &q1, &layer.z.view()).unwrap();
        let (mu, su) = collapsed_qu(&layer, &stats, &y.view()).unwrap();
        let explicit =
            explicit_observed_bound(&y.view(), &q1, &layer, &mu.view(), &su.view()).unwrap();
        assert!(
            (explicit - collapsed).abs() < 1e-8 * collapsed.abs().max(1.0),
            "linear={linear}: explicit {explicit} vs collapsed {collapsed}"
        );

        // any other q(U) must not beat the collapsed optimum
        let mu_off = mu.mapv(|v| v + 0.3);
        let worse =
            explicit_observed_bound(&y.view(), &q1, &layer, &mu_off.view(), &su.view()).unwrap();
        assert!(worse <= collapsed + 1e-9);
    }
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    for (trial, hidden) in [(0, false), (1, true), (2, false), (3, true)] {
        let linear = trial % 2 == 1;
        let n = 6;
        let m = 3;
        let q = 2;
        let d = 2;
        let in_means = Array2::from_shape_fn((n, q), |_| rng.gen_range(-1.0..1.0));
        let in_var = Array1::from_shape_fn(q, |_| rng.gen_range(0.05..0.4));
        let z = Array2::from_shape_fn((m, q), |_| rng.gen_range(-1.0..1.0));
        let out_means = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let out_var = Array1::from_shape_fn(d, |_| rng.gen_range(0.05..0.3));
        let noise = rng.gen_range(0.3..0.8);
        let (v0, l0, b0) = (1.1, [1.0, 1.3], 0.2);

        let build = |theta: &Array1<f64>| -> (DiagGaussianPosterior<f64>, LayerParams<f64>, Array2<f64>, Array1<f64>) {
            let mut at = 0;
            let im = Array2::from_shape_fn((n, q), |(i, j)| theta[at + i * q + j]);
            at += n * q;
            let iv = Array1::from_shape_fn(q, |j| theta[at + j]);
            at += q;
            let zz = Array2::from_shape_fn((m, q), |(i, j)| theta[at + i * q + j]);
            at += m * q;
            let kernel = if linear {
                let k = KernelSpec::linear(theta[at], theta[at + 1]).unwrap();
                at += 2;
                k
            } else {
                let k = KernelSpec::expquad(
                    theta[at],
                    ndarray::array![theta[at + 1], theta[at + 2]],
                )
                .unwrap();
                at += 3;
                k
            };
            let nv = theta[at];
            at += 1;
            let om = Array2::from_shape_fn((n, d), |(i, j)| theta[at + i * d + j]);
            at += n * d;
            let ov = Array1::from_shape_fn(d, |j| theta[at + j]);
            let qin = DiagGaussianPosterior::new(im, iv).unwrap();
            let layer = LayerParams::new(zz, kernel, nv).unwrap();
            (qin, layer, om, ov)
        };

        let mut theta = Vec::new();
        theta.extend(in_means.iter().copied());
        theta.extend(in_var.iter().copied());
        theta.extend(z.iter().copied());
        theta.push(v0);
        if linear {
            theta.push(b0);
        } else {
            theta.extend(l0.iter().copied());
        }
        theta.push(noise);
        theta.extend(out_means.iter().copied());
        theta.extend(out_var.iter().copied());
        let theta = Array1::from_vec(theta);

        let mut objective = |t: &Array1<f64>| -> f64 {
            let (qin, layer, om, ov) = build(t);
            if hidden {
                let qout = DiagGaussianPosterior::new(om, ov).unwrap();
                hidden_layer_bound(&qout, &qin, &layer).unwrap().value
            } else {
                observed_layer_bound(&om.view(), &qin, &layer).unwrap().value
            }
        };
        let numeric = deepgp_testkit::central_difference(&mut objective, &theta, 1e-5);

        let (qin, layer, om, ov) = build(&theta);
        let qout_storage;
        let targets = if hidden {
            qout_storage = DiagGaussianPosterior::new(om.clone(), ov.clone()).unwrap();
            LayerTargets::Posterior(&qout_storage)
        } else {
            LayerTargets::Fixed(om.view())
        };
        let (_, grads) = layer_bound_gradients(&targets, &qin, &layer).unwrap();

        let mut analytic = Vec::new();
        analytic.extend(grads.q_in_means.iter().copied());
        analytic.extend(grads.q_in_variance.iter().copied());
        analytic.extend(grads.z.iter().copied());
        analytic.push(grads.variance);
        if linear {
            analytic.push(grads.bias);
        } else {
            analytic.extend(grads.lengthscales.iter().copied());
        }
        analytic.push(grads.noise_variance);
        if hidden {
            analytic.extend(grads.q_out_means.as_ref().unwrap().iter().copied());
            for _ in 0..d {
                analytic.push(grads.q_out_var_trace);
            }
        } else {
            analytic.extend(std::iter::repeat(0.0).take(n * d + d));
        }
        let analytic = Array1::from_vec(analytic);

        // fixed targets have no gradient slots: compare only the live part
        let live = if hidden { analytic.len() } else { analytic.len() - (n * d + d) };
        let a = analytic.slice(ndarray::s![..live]).to_owned();
        let nmr = numeric.slice(ndarray::s![..live]).to_owned();
        let (err, at) = deepgp_testkit::fd::max_rel_error(&a, &nmr);
        assert!(
            err < 1e-4,
            "trial {trial} hidden={hidden}: max rel err {err} at {at}"
        );
    }
}
