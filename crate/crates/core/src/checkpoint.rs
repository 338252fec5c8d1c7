//! Checkpoint file format.
//!
//! Layout: magic `HYGN`, little-endian u32 version, then repeated records of
//! `u32 name length | name bytes | u32 rank | rank × u64 dims | values as
//! little-endian f64`. Parameters save under `param.<name>`, Adam moments
//! under `adam.m.<name>` / `adam.v.<name>`, the step counter as `adam.step`,
//! and the config snapshot as `config.<key>` scalars. Round trips are
//! bitwise.

use std::path::Path;

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::train::{TrainConfig, SCALAR_KEYS};

const MAGIC: &[u8; 4] = b"HYGN";
const VERSION: u32 = 1;

fn push_record(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Write a checkpoint: config snapshot, parameters, and optimizer state.
pub fn save_checkpoint(
    path: &Path,
    cfg: &TrainConfig,
    params: &ParamSet,
    adam: &AdamState,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    for key in SCALAR_KEYS {
        let value = cfg.scalar_value(key).expect("known key");
        push_record(&mut buf, &format!("config.{key}"), &[1], &[value]);
    }
    // The seed is stored bit-for-bit so any u64 survives the round trip.
    push_record(&mut buf, "config.seed", &[1], &[f64::from_bits(cfg.seed)]);

    for (name, tensor) in params.iter() {
        push_record(
            &mut buf,
            &format!("param.{name}"),
            tensor.shape(),
            tensor.data(),
        );
    }
    push_record(&mut buf, "adam.step", &[1], &[adam.step_count() as f64]);
    let (m, v) = adam.moments();
    if !m.is_empty() {
        for (i, name) in params.names().enumerate() {
            push_record(
                &mut buf,
                &format!("adam.m.{name}"),
                m[i].shape(),
                m[i].data(),
            );
            push_record(
                &mut buf,
                &format!("adam.v.{name}"),
                v[i].shape(),
                v[i].data(),
            );
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let slice = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::BadCheckpoint("truncated file".into()))?;
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }
}

/// A parsed checkpoint, ready to resume training or run inference.
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamSet,
    pub adam_step: u64,
    adam_m: Vec<(String, Tensor)>,
    adam_v: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Assemble a checkpoint from live training state.
    pub fn from_state(config: TrainConfig, params: ParamSet, adam: &AdamState) -> Self {
        let (m, v) = adam.moments();
        let adam_m = params
            .names()
            .zip(m)
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let adam_v = params
            .names()
            .zip(v)
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        Checkpoint {
            config,
            adam_step: adam.step_count(),
            adam_m,
            adam_v,
            params,
        }
    }

    /// Split into config, parameters, and a restored optimizer.
    pub fn into_parts(self) -> Result<(TrainConfig, ParamSet, AdamState)> {
        let cfg = self.config.clone();
        let mut adam = AdamState::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay)?;
        if !self.adam_m.is_empty() {
            if self.adam_m.len() != self.params.len() || self.adam_v.len() != self.params.len() {
                return Err(Error::BadCheckpoint(
                    "optimizer moments do not cover the parameters".into(),
                ));
            }
            let mut m = Vec::with_capacity(self.params.len());
            let mut v = Vec::with_capacity(self.params.len());
            for (i, name) in self.params.names().enumerate() {
                if self.adam_m[i].0 != name || self.adam_v[i].0 != name {
                    return Err(Error::BadCheckpoint(format!(
                        "optimizer moment order mismatch at `{name}`"
                    )));
                }
                m.push(self.adam_m[i].1.clone());
                v.push(self.adam_v[i].1.clone());
            }
            adam.restore(self.adam_step, m, v);
        } else if self.adam_step != 0 {
            return Err(Error::BadCheckpoint(
                "nonzero step count without optimizer moments".into(),
            ));
        }
        Ok((self.config, self.params, adam))
    }
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::BadCheckpoint("bad magic, not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::BadCheckpoint(format!(
            "unsupported version {version}"
        )));
    }

    let mut config = TrainConfig::default();
    let mut params = ParamSet::new();
    let mut adam_step = 0u64;
    let mut adam_m = Vec::new();
    let mut adam_v = Vec::new();

    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::BadCheckpoint("non-UTF8 record name".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel == 0 || shape.is_empty() {
            return Err(Error::BadCheckpoint(format!("empty record `{name}`")));
        }
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(r.f64()?);
        }

        if let Some(key) = name.strip_prefix("config.") {
            let value = values[0];
            if key == "seed" {
                config.seed = value.to_bits();
            } else {
                config
                    .apply_scalar(key, value)
                    .map_err(|e| Error::BadCheckpoint(format!("config record `{key}`: {e}")))?;
            }
        } else if let Some(pname) = name.strip_prefix("param.") {
            params.insert(pname, Tensor::new(&shape, values)?)?;
        } else if name == "adam.step" {
            adam_step = values[0] as u64;
        } else if let Some(mname) = name.strip_prefix("adam.m.") {
            adam_m.push((mname.to_string(), Tensor::new(&shape, values)?));
        } else if let Some(vname) = name.strip_prefix("adam.v.") {
            adam_v.push((vname.to_string(), Tensor::new(&shape, values)?));
        } else {
            return Err(Error::BadCheckpoint(format!("unknown record `{name}`")));
        }
    }
    if params.is_empty() {
        return Err(Error::BadCheckpoint(
            "checkpoint holds no parameters".into(),
        ));
    }
    Ok(Checkpoint {
        config,
        params,
        adam_step,
        adam_m,
        adam_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> ParamSet {
        let mut set = ParamSet::new();
        set.insert(
            "layer.kernel",
            Tensor::new(&[2, 3], vec![0.1, -0.2, 0.3, 1.0 / 3.0, -7.5, 1e-300]).unwrap(),
        )
        .unwrap();
        set.insert(
            "layer.bias",
            Tensor::new(&[2], vec![f64::MIN_POSITIVE, -0.0]).unwrap(),
        )
        .unwrap();
        set
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.hygnn");
        let cfg = TrainConfig {
            seed: u64::MAX - 3,
            lr: 3e-4,
            n: 2,
            ..TrainConfig::default()
        };
        let params = sample_params();
        let mut adam =
            AdamState::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay).unwrap();
        let mut moving = params.clone();
        adam.step(&mut moving, &[Tensor::ones(&[2, 3]), Tensor::ones(&[2])])
            .unwrap();
        save_checkpoint(&path, &cfg, &moving, &adam).unwrap();

        let ckpt = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt.config, cfg);
        assert_eq!(ckpt.adam_step, 1);
        for (name, tensor) in moving.iter() {
            let loaded = ckpt.params.get(name).unwrap();
            let a: Vec<u64> = tensor.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = loaded.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{name}");
        }
        let (cfg2, _, adam2) = ckpt.into_parts().unwrap();
        assert_eq!(cfg2.seed, cfg.seed);
        assert_eq!(adam2.step_count(), 1);
        let (m, _) = adam2.moments();
        let (m0, _) = adam.moments();
        assert_eq!(m[0].data(), m0[0].data());
    }

    #[test]
    fn rejects_wrong_magic_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.hygnn");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::BadCheckpoint(_))
        ));
        std::fs::write(&path, b"HYGN\x01\x00\x00\x00\xff\xff").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
