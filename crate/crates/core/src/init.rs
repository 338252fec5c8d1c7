//! Random weight initialization: fan-in-scaled normal kernels, zero biases.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::params::ParamSet;
use crate::tensor::Tensor;

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// `<prefix>.kernel` `[cout, cin, k, k]` plus `<prefix>.bias` `[cout]`.
pub(crate) fn add_conv(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cout: usize,
    cin: usize,
    k: usize,
) -> Result<()> {
    let kernel = normal_tensor(rng, &[cout, cin, k, k], cin * k * k);
    set.insert(format!("{prefix}.kernel"), kernel)?;
    set.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]))?;
    Ok(())
}

/// `<prefix>.weight` `[out_f, in_f]` plus `<prefix>.bias` `[out_f]`.
pub(crate) fn add_linear(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    out_f: usize,
    in_f: usize,
) -> Result<()> {
    let weight = normal_tensor(rng, &[out_f, in_f], in_f);
    set.insert(format!("{prefix}.weight"), weight)?;
    set.insert(format!("{prefix}.bias"), Tensor::zeros(&[out_f]))?;
    Ok(())
}

/// Three GRU gate convolutions, each `[c, 2c, 3, 3]`.
pub(crate) fn add_gru(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c: usize,
) -> Result<()> {
    for gate in ["reset", "update", "candidate"] {
        add_conv(set, rng, &format!("{prefix}.{gate}"), c, 2 * c, 3)?;
    }
    Ok(())
}

/// Uniform value helper for synthetic data, bit-reproducible under a seed.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
