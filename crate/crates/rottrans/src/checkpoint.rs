//! `RTRX` checkpoint files.
//!
//! Layout, all little-endian: magic `RTRX`, `u32` version, `u64` length and
//! UTF-8 bytes of the resolved config text, `u32` record count, then per
//! record a `u32` name length, the name, a `u8` rank, `u64` extents and the
//! `f32` payload. Run position is stored as `meta.*` lines in the config text.

use std::path::Path;

use rottrans_core::model::RotTransModel;
use rottrans_core::optim::{Sgd, SgdConfig};
use rottrans_core::train::{TrainConfig, Trainer};
use rottrans_core::{ParamStore, Scalar, Tensor};

use crate::config;
use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 4] = b"RTRX";
pub const VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "optim.velocity.";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_text: String,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &e in &t.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> AppResult<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(AppError::Data("not an RTRX checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(AppError::Data(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u64("config length")? as usize;
        let config_text = String::from_utf8(r.take(len, "config text")?.to_vec())
            .map_err(|_| AppError::Data("checkpoint config text is not UTF-8".into()))?;
        let count = r.u32("record count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| AppError::Data(format!("tensor name at byte {} is not UTF-8", r.pos)))?;
            let rank = r.take(1, "rank")?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u64("extent").map(|e| e as usize))
                .collect::<AppResult<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| AppError::Data(format!("tensor {name} has an overflowing shape")))?;
            let payload = r.take(n.saturating_mul(4), &format!("payload of {name}"))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(TensorRecord { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(AppError::Data(format!("{} trailing bytes after the last record", bytes.len() - r.pos)));
        }
        Ok(Self {
            version,
            config_text,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| AppError::io(path, e))
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            AppError::Data(m) => AppError::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Drops every rotated-branch tensor and head, with their momentum.
    pub fn strip_rotated(&mut self) {
        self.tensors.retain(|t| {
            let n = t.name.strip_prefix(VELOCITY_PREFIX).unwrap_or(&t.name);
            !(n.starts_with("branch.rot") || n.starts_with("head.rot"))
        });
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Resolved configuration and `meta.*` entries.
    pub fn parse_config(&self) -> AppResult<(TrainConfig, Meta)> {
        let mut cfg = TrainConfig::default();
        let reserved = config::apply_text(&mut cfg, &self.config_text, "checkpoint config", Some("meta."))?;
        let mut meta = Meta::default();
        for (k, v) in reserved {
            let parse = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| AppError::Data(format!("checkpoint meta `{k}` = `{v}` is not an integer")))
            };
            match k.as_str() {
                "meta.epoch" => meta.epoch = parse(&v)?,
                "meta.global_step" => meta.global_step = parse(&v)?,
                "meta.num_ids" => meta.num_ids = parse(&v)?,
                _ => return Err(AppError::Data(format!("unknown checkpoint meta key `{k}`"))),
            }
        }
        cfg.validate()?;
        Ok((cfg, meta))
    }
}

/// Run position stored alongside the config.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Meta {
    pub epoch: usize,
    pub global_step: usize,
    pub num_ids: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> AppResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            AppError::Data(format!("checkpoint truncated at byte {} while reading {what}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> AppResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> AppResult<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn record<F: Scalar>(name: String, t: &Tensor<F>) -> TensorRecord {
    TensorRecord {
        name,
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|v| v.to_f64() as f32).collect(),
    }
}

fn to_tensor<F: Scalar>(r: &TensorRecord) -> Tensor<F> {
    Tensor::new(r.shape.clone(), r.data.iter().map(|&v| F::from_f64(v as f64)).collect()).expect("checked on read")
}

/// Snapshot of a trainer: config, position, parameters, buffers and momentum.
pub fn from_trainer<F: Scalar>(t: &Trainer<F>) -> Checkpoint {
    let mut text = config::render(&t.cfg);
    text.push_str(&format!(
        "meta.epoch = {}\nmeta.global_step = {}\nmeta.num_ids = {}\n",
        t.epoch, t.global_step, t.model.num_ids
    ));
    let mut tensors: Vec<TensorRecord> = t.model.store.iter().map(|(_, p)| record(p.name.clone(), &p.value)).collect();
    for ((_, p), v) in t.model.store.iter().zip(&t.optim.velocity) {
        if p.requires_grad {
            tensors.push(record(format!("{VELOCITY_PREFIX}{}", p.name), v));
        }
    }
    Checkpoint {
        version: VERSION,
        config_text: text,
        tensors,
    }
}

fn fill_store<F: Scalar>(store: &mut ParamStore<F>, ck: &Checkpoint) -> AppResult<Vec<String>> {
    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
    let mut missing = Vec::new();
    for name in names {
        match ck.tensor(&name) {
            Some(r) => store.set_value(&name, to_tensor(r))?,
            None => missing.push(name),
        }
    }
    Ok(missing)
}

/// Model for inference. When the rotated branches were stripped, an
/// original-path-only model is built.
pub fn load_model<F: Scalar>(ck: &Checkpoint) -> AppResult<(TrainConfig, Meta, RotTransModel<F>)> {
    let (mut cfg, meta) = ck.parse_config()?;
    let stripped = cfg.model.rotation.n_rotations > 0 && ck.tensor("branch.rot0.norm.gain").is_none();
    if stripped {
        cfg.model.rotation.n_rotations = 0;
        cfg.model.rotation.fixed_angle_set = None;
    }
    let mut model = RotTransModel::new(&cfg.model, meta.num_ids, cfg.seed)?;
    let missing = fill_store(&mut model.store, ck)?;
    if !missing.is_empty() {
        return Err(AppError::Data(format!("checkpoint lacks tensors: {}", missing.join(", "))));
    }
    Ok((cfg, meta, model))
}

/// Full training state for resuming.
pub fn load_trainer_parts<F: Scalar>(ck: &Checkpoint) -> AppResult<(TrainConfig, Meta, RotTransModel<F>, Sgd<F>)> {
    let (saved, _) = ck.parse_config()?;
    let (cfg, meta, model) = load_model::<F>(ck)?;
    if model.rotated.len() != saved.model.rotation.n_rotations {
        return Err(AppError::Data("cannot resume from a checkpoint without its rotated branches".into()));
    }
    let mut optim = Sgd::new(
        &model.store,
        SgdConfig {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        },
    );
    for ((_, p), v) in model.store.iter().zip(&mut optim.velocity) {
        if !p.requires_grad {
            continue;
        }
        let r = ck
            .tensor(&format!("{VELOCITY_PREFIX}{}", p.name))
            .ok_or_else(|| AppError::Data(format!("checkpoint lacks momentum for {}", p.name)))?;
        *v = to_tensor(r);
    }
    Ok((cfg, meta, model, optim))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            version: VERSION,
            config_text: "lambda = 0.5\nmeta.epoch = 3\nmeta.global_step = 12\nmeta.num_ids = 4\n".into(),
            tensors: vec![
                TensorRecord {
                    name: "branch.ori.norm.gain".into(),
                    shape: vec![2],
                    data: vec![1.0, -0.5],
                },
                TensorRecord {
                    name: "branch.rot0.norm.gain".into(),
                    shape: vec![2, 1],
                    data: vec![0.25, 3.0],
                },
                TensorRecord {
                    name: "optim.velocity.head.rot1.bn.bias".into(),
                    shape: vec![],
                    data: vec![7.0],
                },
            ],
        }
    }

    #[test]
    fn byte_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"RTRX");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        let (_, meta) = ck.parse_config().unwrap();
        assert_eq!(meta, Meta { epoch: 3, global_step: 12, num_ids: 4 });
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn stripping_keeps_the_original_path() {
        let mut ck = sample();
        ck.strip_rotated();
        let names: Vec<_> = ck.tensors.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, vec!["branch.ori.norm.gain"]);
    }
}
