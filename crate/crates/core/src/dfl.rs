//! Domain-specific feature learning: a shared truncated-VGG front-end, one
//! dilated convolutional back-end per task domain, and pyramid-pooled
//! multi-scale node-state initialization.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::add_conv;
use crate::params::{BoundParams, ParamSet};
use crate::tensor::{Tape, TensorId};

/// The two task domains a node can belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Density,
    Localization,
}

impl Domain {
    pub const BOTH: [Domain; 2] = [Domain::Density, Domain::Localization];

    pub fn index(self) -> usize {
        match self {
            Domain::Density => 0,
            Domain::Localization => 1,
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::Density => Domain::Localization,
            Domain::Localization => Domain::Density,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Density => "density",
            Domain::Localization => "localization",
        }
    }
}

/// Configuration of the feature extractor and node-state pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct DflConfig {
    /// Rational scaling of the backbone channel plan (1/8 for desk scale).
    pub width_multiplier: f64,
    /// Pyramid pooling bin counts, one per scale.
    pub scales: Vec<usize>,
    /// Channel count of every node state.
    pub node_channels: usize,
    /// Dilation rate of both back-ends.
    pub back_end_dilation: usize,
}

impl DflConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::InvalidArgument("scales must not be empty".into()));
        }
        for (i, &s) in self.scales.iter().enumerate() {
            if s == 0 {
                return Err(Error::InvalidArgument("pyramid bins must be >= 1".into()));
            }
            if self.scales[..i].contains(&s) {
                return Err(Error::InvalidArgument(format!(
                    "pyramid bin counts must be distinct, {s} repeats"
                )));
            }
        }
        if self.width_multiplier <= 0.0 {
            return Err(Error::InvalidArgument(
                "width multiplier must be positive".into(),
            ));
        }
        if self.node_channels == 0 || self.back_end_dilation == 0 {
            return Err(Error::InvalidArgument(
                "node channels and dilation must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Default pyramid bin counts for a scale count.
pub fn default_scales(n: usize) -> Vec<usize> {
    match n {
        3 => vec![1, 2, 4],
        5 => vec![1, 2, 3, 4, 6],
        _ => (1..=n).collect(),
    }
}

/// One domain's initial node states: N tensors of identical shape.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub domain: Domain,
    pub states: Vec<TensorId>,
}

const FRONT_PLAN: [usize; 10] = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512];
/// Convolution indices followed by a 2×2 max pool (three stages → 1/8 size).
const FRONT_POOL_AFTER: [usize; 3] = [1, 3, 6];
const BACK_PLAN: [usize; 7] = [512, 512, 512, 256, 256, 128, 64];

fn scaled(c: usize, width_multiplier: f64) -> usize {
    ((c as f64 * width_multiplier).round() as usize).max(1)
}

/// Truncated-VGG channel plan under a width multiplier.
pub fn front_end_channels(width_multiplier: f64) -> Vec<usize> {
    FRONT_PLAN
        .iter()
        .map(|&c| scaled(c, width_multiplier))
        .collect()
}

/// Back-end channel plan: seven scaled widths, then the node channels.
pub fn back_end_channels(width_multiplier: f64, node_channels: usize) -> Vec<usize> {
    let mut plan: Vec<usize> = BACK_PLAN
        .iter()
        .map(|&c| scaled(c, width_multiplier))
        .collect();
    plan.push(node_channels);
    plan
}

pub(crate) fn init_front_end_params(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    width_multiplier: f64,
) -> Result<()> {
    let mut cin = 3;
    for (i, cout) in front_end_channels(width_multiplier).into_iter().enumerate() {
        add_conv(set, rng, &format!("front_end.conv{i}"), cout, cin, 3)?;
        cin = cout;
    }
    Ok(())
}

pub(crate) fn init_back_end_params(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    domain: Domain,
    width_multiplier: f64,
    node_channels: usize,
) -> Result<()> {
    let mut cin = scaled(512, width_multiplier);
    for (i, cout) in back_end_channels(width_multiplier, node_channels)
        .into_iter()
        .enumerate()
    {
        add_conv(
            set,
            rng,
            &format!("back_end.{}.conv{i}", domain.name()),
            cout,
            cin,
            3,
        )?;
        cin = cout;
    }
    Ok(())
}

/// Shared front-end: ten 3×3 convolutions with ReLU and three 2×2 max-pool
/// stages, mapping `[B,3,H,W]` to `f_share` at 1/8 resolution.
pub fn front_end(
    tape: &mut Tape,
    bound: &BoundParams,
    image: TensorId,
    width_multiplier: f64,
) -> Result<TensorId> {
    let shape = tape.shape(image)?.to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "front_end expects [B,3,H,W], got {shape:?}"
        )));
    }
    let (h, w) = (shape[2], shape[3]);
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "front_end input size {h}x{w} must be divisible by 8"
        )));
    }
    let n_layers = front_end_channels(width_multiplier).len();
    let mut x = image;
    for i in 0..n_layers {
        let conv = bound.conv_same(&format!("front_end.conv{i}"), 1)?;
        x = tape.conv2d(x, &conv)?;
        x = tape.relu(x)?;
        if FRONT_POOL_AFTER.contains(&i) {
            x = tape.max_pool2(x)?;
        }
    }
    Ok(x)
}

/// Domain-specific back-end: eight dilated 3×3 convolutions with ReLU, the
/// final layer emitting the node channel count.
pub fn back_end(
    tape: &mut Tape,
    bound: &BoundParams,
    f_share: TensorId,
    domain: Domain,
    dilation: usize,
) -> Result<TensorId> {
    let mut x = f_share;
    for i in 0..8 {
        let conv = bound.conv_same(&format!("back_end.{}.conv{i}", domain.name()), dilation)?;
        x = tape.conv2d(x, &conv)?;
        x = tape.relu(x)?;
    }
    Ok(x)
}

/// Initial node states: one pyramid-pooled copy of the domain feature map
/// per scale, all restored to the feature map's own spatial size.
pub fn init_node_states(
    tape: &mut Tape,
    f_domain: TensorId,
    domain: Domain,
    config: &DflConfig,
) -> Result<FeaturePyramid> {
    config.validate()?;
    let mut states = Vec::with_capacity(config.scales.len());
    for &bins in &config.scales {
        states.push(tape.pyramid_pool(f_domain, bins)?);
    }
    Ok(FeaturePyramid { domain, states })
}
