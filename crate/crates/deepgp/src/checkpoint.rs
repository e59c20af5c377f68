//! Self-describing binary model checkpoint. Layout, all little-endian:
//!
//!   magic  b"DGPCKPT\0"
//!   u32    format version
//!   u64    config length, then that many bytes of model-config JSON
//!   u64    parameter count, then f64 × count   (packed parameter vector)
//!   u64    D, then f64 × D                      (training column means)
//!   f64    training bound value
//!   u64    layer count, then per layer:
//!            f64 relative jitter used
//!            u64 rows, u64 cols, f64 × rows·cols   (Λ)
//!            u64 rows, u64 cols, f64 × rows·cols   (ΨᵀR)
//!
//! Write-then-read is bit-exact: every f64 round-trips through to_le_bytes.

use crate::error::{Error, Result};
use crate::infer::{LayerPredictor, Predictor};
use crate::model::ModelConfig;
use crate::scalar::Real;
use ndarray::{Array1, Array2};
use std::io::{Read, Write};

pub const MAGIC: &[u8; 8] = b"DGPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

fn write_f64s<F: Real>(w: &mut impl Write, it: impl Iterator<Item = F>) -> Result<()> {
    for v in it {
        w.write_all(&v.to_f64c().to_le_bytes())?;
    }
    Ok(())
}

fn write_matrix<F: Real>(w: &mut impl Write, m: &Array2<F>) -> Result<()> {
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    write_f64s(w, m.iter().copied())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f64s<F: Real>(r: &mut impl Read, n: usize) -> Result<Array1<F>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(F::c(read_f64(r)?));
    }
    Ok(Array1::from_vec(out))
}

fn read_matrix<F: Real>(r: &mut impl Read) -> Result<Array2<F>> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let flat = read_f64s::<F>(r, rows * cols)?;
    Ok(Array2::from_shape_vec((rows, cols), flat.to_vec()).unwrap())
}

pub fn save<F: Real>(
    w: &mut impl Write,
    predictor: &Predictor<F>,
    config: &ModelConfig,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(config).map_err(|e| Error::Config(e.to_string()))?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let params = predictor.model.pack_parameters();
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    write_f64s(w, params.iter().copied())?;
    w.write_all(&(predictor.train_col_means.len() as u64).to_le_bytes())?;
    write_f64s(w, predictor.train_col_means.iter().copied())?;
    w.write_all(&predictor.train_bound.to_f64c().to_le_bytes())?;
    w.write_all(&(predictor.layers.len() as u64).to_le_bytes())?;
    for lp in &predictor.layers {
        w.write_all(&lp.used_jitter.to_f64c().to_le_bytes())?;
        write_matrix(w, &lp.lambda)?;
        write_matrix(w, &lp.c)?;
    }
    Ok(())
}

pub fn load<F: Real>(r: &mut impl Read) -> Result<(Predictor<F>, ModelConfig)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Config("not a checkpoint file (bad magic)".into()));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let ver = u32::from_le_bytes(ver);
    if ver != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint format version {ver} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let json_len = read_u64(r)? as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)?;
    let config: ModelConfig =
        serde_json::from_slice(&json).map_err(|e| Error::Config(e.to_string()))?;
    let n_params = read_u64(r)? as usize;
    let params = read_f64s::<F>(r, n_params)?;
    let d = read_u64(r)? as usize;
    let train_col_means = read_f64s::<F>(r, d)?;
    let train_bound = F::c(read_f64(r)?);

    let mut model = config.build_skeleton::<F>()?;
    model.unpack_parameters(&params.view())?;

    let n_layers = read_u64(r)? as usize;
    if n_layers != model.layers.len() {
        return Err(Error::Config("layer count mismatch in checkpoint".into()));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let used_jitter = F::c(read_f64(r)?);
        let lambda: Array2<F> = read_matrix(r)?;
        let c: Array2<F> = read_matrix(r)?;
        layers.push(
            LayerPredictor::from_cache(&model.layers[i], lambda, c, used_jitter)
                .map_err(|e| e.in_layer(i))?,
        );
    }
    Ok((
        Predictor {
            model,
            layers,
            train_col_means,
            train_bound,
        },
        config,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::SerialEvaluator;
    use crate::kernel::KernelFamily;
    use crate::model::{ModeKind, RecognitionConfig};
    use crate::train::{fit, initialize, TrainConfig};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let y = Array2::<f64>::from_shape_fn((30, 3), |_| rng.gen_range(-1.0..1.0));
        let cfg = ModelConfig {
            mode: ModeKind::Unsupervised,
            skip_connection: false,
            latent_dims: vec![2],
            inducing: vec![5],
            kernels: vec![KernelFamily::ExpQuad],
            linear_bias: 0.0,
            recognition: Some(RecognitionConfig {
                hidden_widths: vec![4],
                tanh_output: false,
            }),
            input_dim: 0,
            data_dim: 0,
            n_train: 0,
            noise_floor: 0.0,
        };
        let model = initialize(&cfg, &y.view(), None, 1).unwrap();
        let mut eval = SerialEvaluator { y: y.clone() };
        let tc = TrainConfig {
            max_iters: 5,
            ..TrainConfig::default()
        };
        let trained = fit(model, &mut eval, &tc).unwrap().model;
        let pred = Predictor::fit(trained, &y.view()).unwrap();

        let mut cfg_full = cfg.clone();
        cfg_full.data_dim = 3;
        cfg_full.n_train = 30;
        let mut buf = Vec::new();
        save(&mut buf, &pred, &cfg_full).unwrap();
        let (loaded, _) = load::<f64>(&mut buf.as_slice()).unwrap();
        assert_eq!(
            loaded.model.pack_parameters(),
            pred.model.pack_parameters()
        );
        assert_eq!(loaded.train_col_means, pred.train_col_means);
        assert_eq!(loaded.train_bound, pred.train_bound);

        // writing again yields identical bytes
        let mut buf2 = Vec::new();
        save(&mut buf2, &loaded, &cfg_full).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let garbage = b"NOTDGP!!rest of file";
        assert!(load::<f64>(&mut &garbage[..]).is_err());
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&99u32.to_le_bytes());
        assert!(load::<f64>(&mut buf.as_slice()).is_err());
    }
}
