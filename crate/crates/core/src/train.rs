//! Training configuration and the deterministic training / evaluation /
//! inference-export harness.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::AdamState;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{
    apply_augment, generate_density_gt, generate_localization_gt, DensityMap, LocalizationMap,
    Scene,
};
use crate::dfl::{default_scales, DflConfig};
use crate::error::{Error, Result};
use crate::graph::{model_forward, HybridGraphConfig, ModelConfig};
use crate::metrics::{mae_mse, EvalResult};
use crate::params::{BoundParams, ParamSet};
use crate::ppm::write_pgm;
use crate::tensor::{Tape, Tensor};

/// How MSE terms are reduced over pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossReduction {
    /// Plain mean over all map cells (default; λ is read against means).
    Mean,
    /// Mean scaled back up by the cell count.
    Sum,
}

/// All training knobs. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub crop: usize,
    pub lambda: f64,
    pub iterations: usize,
    pub seed: u64,
    pub n: usize,
    pub k: usize,
    pub width_multiplier: f64,
    pub node_channels: usize,
    pub back_end_dilation: usize,
    pub sigma: f64,
    pub sigma_loc: f64,
    pub enable_cross_domain: bool,
    pub enable_adapter: bool,
    pub loss_reduction: LossReduction,
    /// Snapshot the checkpoint every this many steps (0 disables).
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: 64×64 synthetic scenes, eighth-width backbone.
    /// Optimizer settings follow the full-scale recipe (lr 1e-4, momentum
    /// 0.9, weight decay 1e-4, λ = 0.001).
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
            batch: 8,
            crop: 64,
            lambda: 0.001,
            iterations: 200,
            seed: 0,
            n: 3,
            k: 3,
            width_multiplier: 0.125,
            node_channels: 16,
            back_end_dilation: 2,
            sigma: 1.0,
            sigma_loc: 0.5,
            enable_cross_domain: true,
            enable_adapter: true,
            loss_reduction: LossReduction::Mean,
            checkpoint_interval: 0,
        }
    }
}

/// Config keys settable as plain numbers (booleans as 0/1).
pub(crate) const SCALAR_KEYS: [&str; 20] = [
    "lr",
    "beta1",
    "beta2",
    "epsilon",
    "weight_decay",
    "batch",
    "crop",
    "lambda",
    "iterations",
    "n",
    "k",
    "width_multiplier",
    "node_channels",
    "back_end_dilation",
    "sigma",
    "sigma_loc",
    "enable_cross_domain",
    "enable_adapter",
    "loss_reduction",
    "checkpoint_interval",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("lr", self.lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
            ("width_multiplier", self.width_multiplier),
            ("sigma", self.sigma),
            ("sigma_loc", self.sigma_loc),
        ];
        for (name, v) in positives {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::BadConfigValue {
                    key: name.into(),
                    value: v.to_string(),
                });
            }
        }
        if self.weight_decay < 0.0 || self.lambda < 0.0 {
            return Err(Error::BadConfigValue {
                key: "weight_decay/lambda".into(),
                value: "must be non-negative".into(),
            });
        }
        if self.batch == 0 || self.n == 0 || self.node_channels == 0 || self.back_end_dilation == 0
        {
            return Err(Error::BadConfigValue {
                key: "batch/n/node_channels/back_end_dilation".into(),
                value: "must be positive".into(),
            });
        }
        if self.crop == 0 || !self.crop.is_multiple_of(8) {
            return Err(Error::BadConfigValue {
                key: "crop".into(),
                value: format!("{} (must be a positive multiple of 8)", self.crop),
            });
        }
        self.model_config().validate()
    }

    /// The model architecture this training configuration describes.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dfl: DflConfig {
                width_multiplier: self.width_multiplier,
                scales: default_scales(self.n),
                node_channels: self.node_channels,
                back_end_dilation: self.back_end_dilation,
            },
            graph: HybridGraphConfig {
                n: self.n,
                k: self.k,
                c: self.node_channels,
                enable_cross_domain: self.enable_cross_domain,
                enable_adapter: self.enable_adapter,
                lambda: self.lambda,
            },
        }
    }

    pub(crate) fn scalar_value(&self, key: &str) -> Option<f64> {
        Some(match key {
            "lr" => self.lr,
            "beta1" => self.beta1,
            "beta2" => self.beta2,
            "epsilon" => self.epsilon,
            "weight_decay" => self.weight_decay,
            "batch" => self.batch as f64,
            "crop" => self.crop as f64,
            "lambda" => self.lambda,
            "iterations" => self.iterations as f64,
            "n" => self.n as f64,
            "k" => self.k as f64,
            "width_multiplier" => self.width_multiplier,
            "node_channels" => self.node_channels as f64,
            "back_end_dilation" => self.back_end_dilation as f64,
            "sigma" => self.sigma,
            "sigma_loc" => self.sigma_loc,
            "enable_cross_domain" => self.enable_cross_domain as u8 as f64,
            "enable_adapter" => self.enable_adapter as u8 as f64,
            "loss_reduction" => match self.loss_reduction {
                LossReduction::Mean => 0.0,
                LossReduction::Sum => 1.0,
            },
            "checkpoint_interval" => self.checkpoint_interval as f64,
            _ => return None,
        })
    }

    pub(crate) fn apply_scalar(&mut self, key: &str, value: f64) -> Result<()> {
        let bad = |v: f64| Error::BadConfigValue {
            key: key.to_string(),
            value: v.to_string(),
        };
        let as_usize = |v: f64| -> Result<usize> {
            if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                Err(bad(v))
            } else {
                Ok(v as usize)
            }
        };
        let as_bool = |v: f64| -> Result<bool> {
            if v == 0.0 {
                Ok(false)
            } else if v == 1.0 {
                Ok(true)
            } else {
                Err(bad(v))
            }
        };
        match key {
            "lr" => self.lr = value,
            "beta1" => self.beta1 = value,
            "beta2" => self.beta2 = value,
            "epsilon" => self.epsilon = value,
            "weight_decay" => self.weight_decay = value,
            "batch" => self.batch = as_usize(value)?,
            "crop" => self.crop = as_usize(value)?,
            "lambda" => self.lambda = value,
            "iterations" => self.iterations = as_usize(value)?,
            "n" => self.n = as_usize(value)?,
            "k" => self.k = as_usize(value)?,
            "width_multiplier" => self.width_multiplier = value,
            "node_channels" => self.node_channels = as_usize(value)?,
            "back_end_dilation" => self.back_end_dilation = as_usize(value)?,
            "sigma" => self.sigma = value,
            "sigma_loc" => self.sigma_loc = value,
            "enable_cross_domain" => self.enable_cross_domain = as_bool(value)?,
            "enable_adapter" => self.enable_adapter = as_bool(value)?,
            "loss_reduction" => {
                self.loss_reduction = if value == 0.0 {
                    LossReduction::Mean
                } else if value == 1.0 {
                    LossReduction::Sum
                } else {
                    return Err(bad(value));
                }
            }
            "checkpoint_interval" => self.checkpoint_interval = as_usize(value)?,
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys are errors.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::BadConfigValue {
                key: line.to_string(),
                value: "expected `key = value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "seed" {
                cfg.seed = value.parse().map_err(|_| Error::BadConfigValue {
                    key: key.into(),
                    value: value.into(),
                })?;
                continue;
            }
            if !SCALAR_KEYS.contains(&key) {
                return Err(Error::UnknownConfigKey(key.to_string()));
            }
            let parsed: f64 = match (key, value) {
                (k, "true") if k.starts_with("enable_") => 1.0,
                (k, "false") if k.starts_with("enable_") => 0.0,
                ("loss_reduction", "mean") => 0.0,
                ("loss_reduction", "sum") => 1.0,
                (_, other) => other.parse().map_err(|_| Error::BadConfigValue {
                    key: key.into(),
                    value: value.into(),
                })?,
            };
            cfg.apply_scalar(key, parsed)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One training step's logged losses.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub l1: f64,
    pub l2: f64,
}

/// Everything a finished (or interrupted) training run produces.
pub struct TrainOutcome {
    pub config: TrainConfig,
    pub params: ParamSet,
    pub adam: AdamState,
    pub loss_log: Vec<StepLoss>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Per-step RNG derived from (seed, step), so resuming from a checkpoint
/// replays the exact stream an uninterrupted run would see.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(step as u64)))
}

fn stack(tensors: &[Tensor]) -> Tensor {
    let inner = tensors[0].shape().to_vec();
    let mut shape = vec![tensors.len()];
    shape.extend(&inner);
    let mut data = Vec::with_capacity(tensors.iter().map(|t| t.numel()).sum());
    for t in tensors {
        assert_eq!(t.shape(), &inner[..], "stack needs uniform shapes");
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data).expect("valid stack")
}

/// Seeded mini-batch training: augment, forward, `L1 + λ·L2`, backward,
/// Adam. Loss terms are logged every step; a non-finite loss aborts.
pub fn train(
    cfg: &TrainConfig,
    scenes: &[Scene],
    resume: Option<Checkpoint>,
    snapshot_path: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    for s in scenes {
        if cfg.crop > s.height().min(s.width()) {
            return Err(Error::InvalidArgument(format!(
                "crop {} exceeds a {}x{} scene",
                cfg.crop,
                s.height(),
                s.width()
            )));
        }
    }
    let model_cfg = cfg.model_config();

    let (mut params, mut adam) = match resume {
        Some(ckpt) => {
            let (_, params, adam) = ckpt.into_parts()?;
            (params, adam)
        }
        None => (
            crate::graph::init_model_params(&model_cfg, cfg.seed)?,
            AdamState::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay)?,
        ),
    };

    let ground_truth: Vec<(DensityMap, LocalizationMap)> = scenes
        .iter()
        .map(|s| {
            Ok((
                generate_density_gt(s, cfg.sigma)?,
                generate_localization_gt(s, cfg.sigma_loc)?,
            ))
        })
        .collect::<Result<_>>()?;

    let mut loss_log = Vec::new();
    let start = adam.step_count() as usize;
    for step in start..cfg.iterations {
        let mut rng = step_rng(cfg.seed, step);
        let mut images = Vec::with_capacity(cfg.batch);
        let mut gt_d = Vec::with_capacity(cfg.batch);
        let mut gt_l = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let idx = rng.random_range(0..scenes.len());
            let scene = &scenes[idx];
            let x0 = 8 * rng.random_range(0..=(scene.width() - cfg.crop) / 8);
            let y0 = 8 * rng.random_range(0..=(scene.height() - cfg.crop) / 8);
            let flip = rng.random_bool(0.5);
            let (aug_scene, aug_d, aug_l) = apply_augment(
                scene,
                &ground_truth[idx].0,
                &ground_truth[idx].1,
                x0,
                y0,
                cfg.crop,
                flip,
            )?;
            images.push(aug_scene.image);
            gt_d.push(aug_d.grid);
            gt_l.push(aug_l.grid);
        }

        let batch_image = stack(&images);
        let batch_d = stack(&gt_d);
        let batch_l = stack(&gt_l);

        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let img = tape.input(&batch_image);
        let (d, l) = model_forward(&mut tape, &bound, img, &model_cfg)?;
        let target_d = tape.input(&batch_d);
        let target_l = tape.input(&batch_l);
        let mut l1 = tape.mse_loss(d, target_d)?;
        let mut l2 = tape.mse_loss(l, target_l)?;
        if cfg.loss_reduction == LossReduction::Sum {
            let cells = batch_d.numel() as f64;
            l1 = tape.scale(l1, cells)?;
            l2 = tape.scale(l2, cells)?;
        }
        let weighted = tape.scale(l2, cfg.lambda)?;
        let loss = tape.add(l1, weighted)?;

        let l1_value = tape.value(l1)?.scalar_value()?;
        let l2_value = tape.value(l2)?.scalar_value()?;
        if !l1_value.is_finite() || !l2_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                l1: l1_value,
                l2: l2_value,
            });
        }

        let gmap = tape.backward(loss)?;
        let grads = bound.gather(&gmap)?;
        adam.step(&mut params, &grads)?;
        loss_log.push(StepLoss {
            step,
            l1: l1_value,
            l2: l2_value,
        });

        if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 {
            if let Some(path) = snapshot_path {
                save_checkpoint(path, cfg, &params, &adam)?;
            }
        }
    }

    Ok(TrainOutcome {
        config: cfg.clone(),
        params,
        adam,
        loss_log,
    })
}

/// Per-image predicted counts (the density map's sum) against point counts.
pub fn evaluate(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    scenes: &[Scene],
) -> Result<EvalResult> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("evaluation dataset is empty".into()));
    }
    let mut predicted = Vec::with_capacity(scenes.len());
    let mut truth = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params);
        let mut shape = vec![1];
        shape.extend(scene.image.shape());
        let image = Tensor::new(&shape, scene.image.data().to_vec())?;
        let img = tape.input(&image);
        let (d, _) = model_forward(&mut tape, &bound, img, model_cfg)?;
        predicted.push(tape.value(d)?.sum());
        truth.push(scene.count() as f64);
    }
    let (mae, mse) = mae_mse(&predicted, &truth)?;
    Ok(EvalResult {
        mae,
        mse,
        per_image: predicted.into_iter().zip(truth).collect(),
    })
}

/// Inference artifacts written by [`infer_export`].
#[derive(Debug)]
pub struct InferOutputs {
    pub density_path: std::path::PathBuf,
    pub localization_path: std::path::PathBuf,
    pub count_path: std::path::PathBuf,
    /// Sum over the raw density map, before any normalization.
    pub count: f64,
}

/// Run the model on one `[3,H,W]` image and write the density and
/// localization maps (max-normalized PGMs) plus the raw count.
pub fn infer_export(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    image: &Tensor,
    out_prefix: &Path,
) -> Result<InferOutputs> {
    let mut shape = vec![1];
    shape.extend(image.shape());
    let batched = Tensor::new(&shape, image.data().to_vec())?;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let img = tape.input(&batched);
    let (d, l) = model_forward(&mut tape, &bound, img, model_cfg)?;

    let density = tape.value(d)?;
    let loc = tape.value(l)?;
    let (h, w) = (density.shape()[2], density.shape()[3]);
    let count = density.sum();

    let normalized = |t: &Tensor| -> Vec<f64> {
        let peak = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak == 0.0 {
            vec![0.0; t.numel()]
        } else {
            t.data().iter().map(|v| v.max(0.0) / peak).collect()
        }
    };

    let prefix = out_prefix.to_string_lossy();
    let density_path = std::path::PathBuf::from(format!("{prefix}.density.pgm"));
    let localization_path = std::path::PathBuf::from(format!("{prefix}.localization.pgm"));
    let count_path = std::path::PathBuf::from(format!("{prefix}.count.txt"));
    write_pgm(&density_path, &normalized(density), h, w)?;
    write_pgm(&localization_path, &normalized(loc), h, w)?;
    std::fs::write(&count_path, format!("{count}\n"))?;
    Ok(InferOutputs {
        density_path,
        localization_path,
        count_path,
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::load_checkpoint;
    use crate::data::{synth_scene, SynthConfig};
    use crate::graph::init_model_params;

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            n: 2,
            k: 1,
            width_multiplier: 1.0 / 16.0,
            node_channels: 4,
            crop: 32,
            batch: 2,
            iterations: 3,
            seed: 11,
            sigma: 0.5,
            sigma_loc: 0.5,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn tiny_scenes(count: usize) -> Vec<Scene> {
        let cfg = SynthConfig {
            h: 32,
            w: 32,
            count_range: (2, 5),
            blob_radius_range: (1.5, 3.0),
            margin: 6.0,
        };
        (0..count)
            .map(|i| synth_scene(100 + i as u64, &cfg).unwrap())
            .collect()
    }

    #[test]
    fn config_parse_defaults_comments_and_overrides() {
        let cfg = TrainConfig::parse(
            "# a comment\n\nlr = 0.001\nn = 2\nk = 1 # trailing comment\nenable_adapter = false\nloss_reduction = sum\nseed = 18446744073709551615\n",
        )
        .unwrap();
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.n, 2);
        assert_eq!(cfg.k, 1);
        assert!(!cfg.enable_adapter);
        assert_eq!(cfg.loss_reduction, LossReduction::Sum);
        assert_eq!(cfg.seed, u64::MAX);
        // Untouched keys keep their defaults.
        assert_eq!(cfg.lambda, 0.001);
        assert_eq!(cfg.beta1, 0.9);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.batch, 8);
    }

    #[test]
    fn config_parse_rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            TrainConfig::parse("momentum = 0.9\n"),
            Err(Error::UnknownConfigKey(k)) if k == "momentum"
        ));
        assert!(matches!(
            TrainConfig::parse("lr = fast\n"),
            Err(Error::BadConfigValue { .. })
        ));
        assert!(matches!(
            TrainConfig::parse("crop = 30\n"),
            Err(Error::BadConfigValue { .. })
        ));
        assert!(TrainConfig::parse("just words\n").is_err());
    }

    #[test]
    fn same_seed_runs_produce_identical_loss_logs() {
        let cfg = tiny_train_cfg();
        let scenes = tiny_scenes(3);
        let a = train(&cfg, &scenes, None, None).unwrap();
        let b = train(&cfg, &scenes, None, None).unwrap();
        assert_eq!(a.loss_log, b.loss_log);
        for (name, t) in a.params.iter() {
            assert_eq!(t.data(), b.params.get(name).unwrap().data(), "{name}");
        }
        let c = train(&TrainConfig { seed: 12, ..cfg }, &scenes, None, None).unwrap();
        assert_ne!(a.loss_log, c.loss_log);
    }

    #[test]
    fn zero_lambda_keeps_localization_head_untouched() {
        let cfg = TrainConfig {
            lambda: 0.0,
            ..tiny_train_cfg()
        };
        let model_cfg = cfg.model_config();
        let params = init_model_params(&model_cfg, cfg.seed).unwrap();
        let scenes = tiny_scenes(1);
        let gt_d = generate_density_gt(&scenes[0], cfg.sigma).unwrap();
        let gt_l = generate_localization_gt(&scenes[0], cfg.sigma_loc).unwrap();

        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let mut shape = vec![1];
        shape.extend(scenes[0].image.shape());
        let image = Tensor::new(&shape, scenes[0].image.data().to_vec()).unwrap();
        let img = tape.input(&image);
        let (d, l) = model_forward(&mut tape, &bound, img, &model_cfg).unwrap();
        let mut dshape = vec![1];
        dshape.extend(gt_d.grid.shape());
        let td = tape.input(&Tensor::new(&dshape, gt_d.grid.data().to_vec()).unwrap());
        let tl = tape.input(&Tensor::new(&dshape, gt_l.grid.data().to_vec()).unwrap());
        let l1 = tape.mse_loss(d, td).unwrap();
        let l2 = tape.mse_loss(l, tl).unwrap();
        let weighted = tape.scale(l2, cfg.lambda).unwrap();
        let loss = tape.add(l1, weighted).unwrap();
        let gmap = tape.backward(loss).unwrap();

        let head_kernel = gmap
            .get(bound.id("readout.localization.kernel").unwrap())
            .unwrap();
        let head_bias = gmap
            .get(bound.id("readout.localization.bias").unwrap())
            .unwrap();
        assert!(head_kernel.data().iter().all(|&g| g == 0.0));
        assert!(head_bias.data().iter().all(|&g| g == 0.0));
        // The density head trains.
        let d_kernel = gmap
            .get(bound.id("readout.density.kernel").unwrap())
            .unwrap();
        assert!(d_kernel.data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn resume_matches_uninterrupted_training_bitwise() {
        let scenes = tiny_scenes(3);
        let full_cfg = TrainConfig {
            iterations: 5,
            ..tiny_train_cfg()
        };
        let straight = train(&full_cfg, &scenes, None, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.hygnn");
        let head_cfg = TrainConfig {
            iterations: 2,
            ..full_cfg.clone()
        };
        let head = train(&head_cfg, &scenes, None, None).unwrap();
        save_checkpoint(&path, &full_cfg, &head.params, &head.adam).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        let resumed = train(&full_cfg, &scenes, Some(ckpt), None).unwrap();

        assert_eq!(resumed.adam.step_count(), 5);
        assert_eq!(resumed.loss_log.len(), 3);
        assert_eq!(&straight.loss_log[2..], &resumed.loss_log[..]);
        for (name, t) in straight.params.iter() {
            let bits_a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = resumed
                .params
                .get(name)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(bits_a, bits_b, "{name}");
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic() {
        let cfg = tiny_train_cfg();
        let scenes = tiny_scenes(1);
        let model_cfg = cfg.model_config();
        let mut params = init_model_params(&model_cfg, cfg.seed).unwrap();
        params.get_mut("readout.density.bias").unwrap().data_mut()[0] = f64::NAN;
        let adam =
            AdamState::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay).unwrap();
        let poisoned = crate::checkpoint::Checkpoint::from_state(cfg.clone(), params, &adam);
        assert!(matches!(
            train(&cfg, &scenes, Some(poisoned), None),
            Err(Error::NonFiniteLoss { step: 0, .. })
        ));
    }

    #[test]
    fn train_rejects_empty_dataset_and_oversized_crop() {
        let cfg = tiny_train_cfg();
        assert!(train(&cfg, &[], None, None).is_err());
        let scenes = tiny_scenes(1);
        let big = TrainConfig { crop: 64, ..cfg };
        assert!(train(&big, &scenes, None, None).is_err());
    }

    #[test]
    fn evaluate_reports_per_image_counts() {
        let cfg = tiny_train_cfg();
        let scenes = tiny_scenes(2);
        let params = init_model_params(&cfg.model_config(), 1).unwrap();
        let result = evaluate(&params, &cfg.model_config(), &scenes).unwrap();
        assert_eq!(result.per_image.len(), 2);
        assert!(result.mae.is_finite() && result.mse.is_finite());
        assert!(result.mae <= result.mse + 1e-12);
        assert!(evaluate(&params, &cfg.model_config(), &[]).is_err());
    }

    #[test]
    fn infer_export_zero_density_head_gives_zero_count() {
        let cfg = tiny_train_cfg();
        let scenes = tiny_scenes(1);
        let mut params = init_model_params(&cfg.model_config(), 3).unwrap();
        let kernel = params.get_mut("readout.density.kernel").unwrap();
        kernel.data_mut().fill(0.0);
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("zero");
        let outputs =
            infer_export(&params, &cfg.model_config(), &scenes[0].image, &prefix).unwrap();
        assert_eq!(outputs.count, 0.0);
        let text = std::fs::read_to_string(&outputs.count_path).unwrap();
        assert_eq!(text.trim(), "0");
        let pgm = std::fs::read(&outputs.density_path).unwrap();
        let raster = &pgm[pgm.len() - 16..];
        assert!(raster.iter().all(|&b| b == 0));
    }

    #[test]
    fn infer_export_writes_consistent_artifacts() {
        let cfg = tiny_train_cfg();
        let scenes = tiny_scenes(1);
        let params = init_model_params(&cfg.model_config(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("out");
        let outputs =
            infer_export(&params, &cfg.model_config(), &scenes[0].image, &prefix).unwrap();
        assert!(outputs.density_path.exists());
        assert!(outputs.localization_path.exists());
        let text = std::fs::read_to_string(&outputs.count_path).unwrap();
        let written: f64 = text.trim().parse().unwrap();
        assert_eq!(written, outputs.count);

        // Output grid is input size / 8.
        let pgm = std::fs::read(&outputs.density_path).unwrap();
        let header = String::from_utf8_lossy(&pgm[..14]);
        assert!(header.starts_with("P5\n4 4\n255"), "header: {header}");
    }
}
