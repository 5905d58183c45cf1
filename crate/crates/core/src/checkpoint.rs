//! Binary training checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EMRA" | u32 version | u64 n | n bytes of config text
//! { u16 len | name | u8 rank | rank × u64 extent | f32 data } ...
//! u64 CRC-64/XZ of everything before it
//! ```
//!
//! The config text is the run configuration followed by `state.epoch` and
//! `state.steps` lines. Records hold the parameters in store order, then
//! the optimizer velocity under `optim.velocity.<param>` when momentum is on.

use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::config::RunConfig;
use crate::error::{CheckpointError, Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::train::{Sgd, Trainer};

pub const MAGIC: &[u8; 4] = b"EMRA";
pub const VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "optim.velocity.";
const CRC: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub steps: u64,
    pub params: ParamStore<f32>,
    pub velocity: Vec<Tensor<f32>>,
}

fn header(msg: impl Into<String>) -> Error {
    CheckpointError::Header(msg.into()).into()
}

fn mismatch(name: &str, detail: impl Into<String>) -> Error {
    CheckpointError::ShapeMismatch { name: name.to_string(), detail: detail.into() }.into()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Truncated(self.bytes.len()).into())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn write_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_record(r: &mut Reader<'_>) -> Result<(String, Tensor<f32>)> {
    let n = u16::from_le_bytes(r.array()?) as usize;
    let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| header("record name is not UTF-8"))?;
    let rank = r.array::<1>()?[0] as usize;
    let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let bytes = numel.and_then(|n| n.checked_mul(4)).ok_or(CheckpointError::Truncated(r.bytes.len()))?;
    let data = r.take(bytes)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((name, Tensor::new(shape, data)?))
}

fn state_value<T: std::str::FromStr>(key: &str, value: Option<&str>) -> Result<T> {
    value
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| header(format!("missing or invalid {key}")))
}

impl Checkpoint {
    pub fn capture<T: Scalar>(config: &RunConfig, trainer: &Trainer<T>) -> Self {
        Self {
            config: RunConfig { model: trainer.model.config.clone(), train: trainer.config.clone(), ..config.clone() },
            epoch: trainer.epoch,
            steps: trainer.optimizer.steps,
            params: trainer.model.params.cast(),
            velocity: trainer.optimizer.velocity.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn model<T: Scalar>(&self) -> Result<Model<T>> {
        Model::from_params(self.config.model.clone(), self.params.cast())
    }

    /// Rebuilds the trainer at the saved position in the schedule.
    pub fn trainer<T: Scalar>(&self) -> Result<Trainer<T>> {
        let mut trainer = Trainer::new(self.model()?, self.config.train.clone())?;
        if trainer.optimizer.velocity.len() != self.velocity.len() {
            return Err(mismatch(
                "optim.velocity",
                format!("{} velocity tensors for momentum {}", self.velocity.len(), self.config.train.momentum),
            ));
        }
        trainer.optimizer = Sgd {
            velocity: self.velocity.iter().map(|t| t.cast()).collect(),
            steps: self.steps,
            ..trainer.optimizer
        };
        trainer.epoch = self.epoch;
        Ok(trainer)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let text = format!("{}\nstate.epoch = {}\nstate.steps = {}\n", self.config.to_text(), self.epoch, self.steps);
        let mut out = Vec::with_capacity(64 + text.len() + 4 * self.params.numel() * 2);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for (name, t) in self.params.iter() {
            write_record(&mut out, name, t);
        }
        for ((name, _), v) in self.params.iter().zip(&self.velocity) {
            write_record(&mut out, &format!("{VELOCITY_PREFIX}{name}"), v);
        }
        let crc = CRC.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.array::<4>()?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic).into());
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version).into());
        }
        let n = r.len()?;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| header("config is not UTF-8"))?;
        let mut records = Vec::new();
        while r.remaining() > 8 {
            records.push(read_record(&mut r)?);
        }
        let body = r.pos;
        let stored = r.u64()?;
        let computed = CRC.checksum(&bytes[..body]);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed }.into());
        }

        let (mut config_text, mut epoch, mut steps) = (String::new(), None, None);
        for line in text.lines() {
            match line.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
                Some(("state.epoch", v)) => epoch = Some(v),
                Some(("state.steps", v)) => steps = Some(v),
                _ => {
                    config_text.push_str(line);
                    config_text.push('\n');
                }
            }
        }
        let config = RunConfig::parse(&config_text).map_err(|e| header(e.to_string()))?;
        let epoch = state_value("state.epoch", epoch)?;
        let steps = state_value("state.steps", steps)?;

        let specs = config.model.param_specs();
        let mut params = ParamStore::default();
        let mut velocity = Vec::new();
        let mut records = records.into_iter();
        for spec in &specs {
            let (name, t) = records.next().ok_or_else(|| mismatch(&spec.name, "missing"))?;
            if name != spec.name || t.shape() != spec.shape.as_slice() {
                return Err(mismatch(&spec.name, format!("found {name} with shape {:?}, expected {:?}", t.shape(), spec.shape)));
            }
            params.insert(name, t)?;
        }
        for (name, t) in records {
            let base = name.strip_prefix(VELOCITY_PREFIX).ok_or_else(|| mismatch(&name, "unexpected record"))?;
            let expect = specs.get(velocity.len()).ok_or_else(|| mismatch(&name, "more velocity tensors than parameters"))?;
            if base != expect.name || t.shape() != expect.shape.as_slice() {
                return Err(mismatch(&name, format!("expected velocity of {} with shape {:?}", expect.name, expect.shape)));
            }
            velocity.push(t);
        }
        if !velocity.is_empty() && velocity.len() != specs.len() {
            return Err(mismatch(VELOCITY_PREFIX.trim_end_matches('.'), format!("{} of {} tensors", velocity.len(), specs.len())));
        }
        Ok(Self { config, epoch, steps, params, velocity })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::train::prepare;

    fn trained(momentum: f64) -> (RunConfig, Trainer<f32>) {
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 4;
        cfg.train.momentum = momentum;
        cfg.train.batch_size = 2;
        let model = Model::new(cfg.model.clone(), 3).unwrap();
        let mut t = Trainer::new(model, cfg.train.clone()).unwrap();
        let data = prepare(&gen_synthetic(&SyntheticSpec { count: 2, ..SyntheticSpec::default() }).unwrap());
        t.train_until(&data, 1).unwrap();
        (cfg, t)
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        for momentum in [0.0, 0.9] {
            let (cfg, t) = trained(momentum);
            let ck = Checkpoint::capture(&cfg, &t);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
            let restored = back.trainer::<f32>().unwrap();
            assert_eq!(restored.model.params, t.model.params);
            assert_eq!(restored.optimizer, t.optimizer);
            assert_eq!(restored.epoch, 1);
        }
    }

    #[test]
    fn corruption_maps_to_distinct_errors() {
        let (cfg, t) = trained(0.0);
        let bytes = Checkpoint::capture(&cfg, &t).to_bytes();
        let err = |b: &[u8]| match Checkpoint::from_bytes(b) {
            Err(Error::Checkpoint(e)) => e,
            other => panic!("{other:?}"),
        };

        let mut b = bytes.clone();
        b[0] = b'X';
        assert_eq!(err(&b), CheckpointError::BadMagic(*b"XMRA"));
        let mut b = bytes.clone();
        b[4] = 2;
        assert_eq!(err(&b), CheckpointError::UnsupportedVersion(2));
        assert!(matches!(err(&bytes[..bytes.len() - 100]), CheckpointError::Truncated(_)));
        assert!(matches!(err(&bytes[..10]), CheckpointError::Truncated(_)));
        let mut b = bytes.clone();
        let last = b.len() - 20;
        b[last] ^= 1;
        assert!(matches!(err(&b), CheckpointError::Checksum { .. }));

        let mut other = cfg.clone();
        other.model.encoder.embed_dim = 64;
        let mut ck = Checkpoint::capture(&cfg, &t);
        ck.config = other;
        assert!(matches!(err(&ck.to_bytes()), CheckpointError::ShapeMismatch { .. }));
    }

    #[test]
    fn file_roundtrip() {
        let (cfg, t) = trained(0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let ck = Checkpoint::capture(&cfg, &t);
        ck.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), ck.to_bytes());
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
