//! Seeded synthetic datasets shared by the test suites.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Three well-separated Gaussian clusters embedded in `dim` dimensions.
pub fn three_clusters(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Array2::<f64>::zeros((3, dim));
    for c in 0..3 {
        for d in 0..dim {
            centers[(c, d)] = rng.gen_range(-4.0..4.0);
        }
    }
    let mut y = Array2::<f64>::zeros((n, dim));
    for i in 0..n {
        let c = i % 3;
        for d in 0..dim {
            y[(i, d)] = centers[(c, d)] + 0.35 * normal(&mut rng);
        }
    }
    y
}

/// Two mirror-image clusters in 2·half dimensions: cluster A lives at
/// (+c, +c), cluster B at (−c, −c). The first `half` coordinates identify
/// the cluster, so imputation of the second half is unambiguous.
pub fn mirrored_two_clusters(n: usize, half: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 2.0;
    let mut y = Array2::<f64>::zeros((n, 2 * half));
    for i in 0..n {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        for d in 0..2 * half {
            y[(i, d)] = sign * c + 0.25 * normal(&mut rng);
        }
    }
    y
}

/// Noisy 2-D data on the line y2 = a·y1 + b.
pub fn line_data(n: usize, a: f64, b: f64, noise: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Array2::<f64>::zeros((n, 2));
    for i in 0..n {
        let t = rng.gen_range(-2.0..2.0);
        y[(i, 0)] = t + noise * normal(&mut rng);
        y[(i, 1)] = a * t + b + noise * normal(&mut rng);
    }
    y
}

/// Smooth nonlinear regression problem: inputs uniform in a box, scalar
/// target with additive Gaussian noise.
pub fn smooth_regression(n: usize, dim: usize, noise: f64, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::<f64>::zeros((n, dim));
    let mut y = Array2::<f64>::zeros((n, 1));
    for i in 0..n {
        let mut s = 0.0;
        for d in 0..dim {
            let v: f64 = rng.gen_range(-2.0..2.0);
            x[(i, d)] = v;
            s += (1.3 * v + 0.4 * d as f64).sin() * (1.0 + 0.3 * v * v) / (1.0 + d as f64);
        }
        y[(i, 0)] = s + noise * normal(&mut rng);
    }
    (x, y)
}

/// Standard normal matrix.
pub fn randn(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| normal(&mut rng))
}

/// Uniform matrix in [lo, hi).
pub fn rand_uniform(n: usize, d: usize, lo: f64, hi: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| rng.gen_range(lo..hi))
}

/// Uniform vector in [lo, hi).
pub fn rand_uniform_vec(n: usize, lo: f64, hi: f64, seed: u64) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array1::from_shape_fn(n, |_| rng.gen_range(lo..hi))
}

/// Workspace data directory (bundled datasets).
pub fn data_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .canonicalize()
        .expect("data directory exists")
}

/// The bundled 8×8 digit images: pixels scaled to [0, 1] plus labels.
pub fn load_digits() -> (Array2<f64>, Vec<u8>) {
    let path = data_dir().join("digits.csv");
    let text = std::fs::read_to_string(&path).expect("digits.csv present");
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells.len(), 65);
        pixels.extend(cells[..64].iter().map(|v| v / 16.0));
        labels.push(cells[64] as u8);
    }
    let n = labels.len();
    (
        Array2::from_shape_vec((n, 64), pixels).unwrap(),
        labels,
    )
}

/// The bundled synthetic shellfish-growth regression set:
/// (features N×8, rings N).
pub fn load_abalone_synth() -> (Array2<f64>, Array1<f64>) {
    let path = data_dir().join("abalone_synth.csv");
    let text = std::fs::read_to_string(&path).expect("abalone_synth.csv present");
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells.len(), 9);
        x.extend_from_slice(&cells[..8]);
        y.push(cells[8]);
    }
    let n = y.len();
    (
        Array2::from_shape_vec((n, 8), x).unwrap(),
        Array1::from_vec(y),
    )
}

/// Deterministic shuffled index split.
pub fn split_indices(n: usize, n_train: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let test = idx.split_off(n_train.min(n));
    (idx, test)
}

/// Select rows by index.
pub fn take_rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((idx.len(), m.ncols()), |(i, j)| m[(idx[i], j)])
}

/// Three-cluster data with controllable separation and within-cluster
/// spread; small separation-to-spread ratios give rugged latent-placement
/// landscapes.
pub fn three_clusters_with(
    n: usize,
    dim: usize,
    center_range: f64,
    spread: f64,
    seed: u64,
) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Array2::<f64>::zeros((3, dim));
    for c in 0..3 {
        for d in 0..dim {
            centers[(c, d)] = rng.gen_range(-center_range..center_range);
        }
    }
    let mut y = Array2::<f64>::zeros((n, dim));
    for i in 0..n {
        let c = i % 3;
        for d in 0..dim {
            y[(i, d)] = centers[(c, d)] + spread * normal(&mut rng);
        }
    }
    y
}
