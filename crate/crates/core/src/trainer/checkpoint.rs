//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"CCT1"  u32 version  u64 meta_len  meta (JSON)
//! u64 tensor_count
//! repeated: u32 name_len  name  u64 numel  numel x f64
//! ```
//!
//! The metadata block holds the model config, the vocabulary, the training
//! config, and the optimizer step. Tensors are the model parameters, the
//! scalar head, and (under `adam.m.` / `adam.v.` prefixes) the optimizer
//! moments, so a run can resume exactly where it stopped.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::model::{Model, ModelConfig, ParamTensors, Params};
use super::{AdamW, ScalarHead, Trainer, TrainingConfig};
use crate::error::{CctError, Result};
use crate::sample_builder::Vocab;

pub const MAGIC: &[u8; 4] = b"CCT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub vocab: Vocab,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, vocab: &Vocab) -> Self {
        let mut tensors = Vec::new();
        let mut names = Vec::new();
        let mut grab = |name: &str, t: &[f64]| {
            names.push(name.to_string());
            tensors.push((name.to_string(), t.to_vec()));
        };
        trainer.model.params.visit(&mut grab);
        trainer.head.visit(&mut grab);
        let opt = &trainer.optimizer;
        for (name, m) in names.iter().zip(&opt.m) {
            tensors.push((format!("adam.m.{name}"), m.clone()));
        }
        for (name, v) in names.iter().zip(&opt.v) {
            tensors.push((format!("adam.v.{name}"), v.clone()));
        }
        Self {
            meta: CheckpointMeta {
                model: trainer.model.config.clone(),
                training: trainer.config.clone(),
                vocab: vocab.clone(),
                step: opt.step,
            },
            tensors,
        }
    }

    /// Rebuilds the trainer state. Fails if any expected tensor is missing
    /// or mis-sized.
    pub fn to_trainer(&self) -> Result<Trainer> {
        let map: BTreeMap<&str, &Vec<f64>> =
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let cfg = self.meta.model.clone();
        cfg.validate()?;
        if cfg.vocab_size != self.meta.vocab.len() {
            return Err(CctError::Checkpoint(format!(
                "model vocab_size {} disagrees with stored vocabulary of {}",
                cfg.vocab_size,
                self.meta.vocab.len()
            )));
        }
        let mut params = Params::zeros(&cfg);
        let mut head = ScalarHead::zeros(cfg.d_model);
        let mut missing = None;
        let mut load = |name: &str, t: &mut [f64]| match map.get(name) {
            Some(src) if src.len() == t.len() => t.copy_from_slice(src),
            _ => missing = Some(name.to_string()),
        };
        params.visit_mut(&mut load);
        head.visit_mut(&mut load);
        if let Some(name) = missing {
            return Err(CctError::Checkpoint(format!("tensor `{name}` missing or mis-sized")));
        }
        let mut optimizer = AdamW::new(
            self.meta.training.learning_rate,
            self.meta.training.weight_decay,
            &[&params, &head],
        );
        optimizer.step = self.meta.step;
        let mut names = Vec::new();
        params.visit(&mut |n, _| names.push(n.to_string()));
        head.visit(&mut |n, _| names.push(n.to_string()));
        for (i, name) in names.iter().enumerate() {
            if let Some(m) = map.get(format!("adam.m.{name}").as_str()) {
                optimizer.m[i].clone_from(m);
            }
            if let Some(v) = map.get(format!("adam.v.{name}").as_str()) {
                optimizer.v[i].clone_from(v);
            }
        }
        Ok(Trainer {
            model: Model { config: cfg, params },
            head,
            config: self.meta.training.clone(),
            optimizer,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, data) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CctError::Checkpoint("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != VERSION {
            return Err(CctError::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(read_array(r)?) as usize;
        let meta_bytes = take(r, meta_len)?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)?;
        let count = u64::from_le_bytes(read_array(r)?) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(read_array(r)?) as usize;
            let name = String::from_utf8(take(r, name_len)?.to_vec())
                .map_err(|_| CctError::Checkpoint("tensor name is not UTF-8".into()))?;
            let numel = u64::from_le_bytes(read_array(r)?) as usize;
            let raw = take(r, numel.checked_mul(8).ok_or_else(|| CctError::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, data));
        }
        if !r.is_empty() {
            return Err(CctError::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| CctError::Checkpoint(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(CctError::Checkpoint("truncated checkpoint".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    buf.copy_from_slice(take(r, buf.len())?);
    Ok(())
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut a = [0u8; N];
    read_exact(r, &mut a)?;
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trainer() -> (Trainer, Vocab) {
        let vocab = Vocab::build(["def f ( a ) : return a"], 64);
        let model = Model::new(ModelConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            context_length: 16,
            seed: 3,
        })
        .unwrap();
        (Trainer::new(model, TrainingConfig::default()).unwrap(), vocab)
    }

    #[test]
    fn byte_exact_round_trip() {
        let (t, vocab) = trainer();
        let ck = Checkpoint::from_trainer(&t, &vocab);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CCT1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let t2 = back.to_trainer().unwrap();
        assert_eq!(t2.model.params, t.model.params);
        assert_eq!(t2.head, t.head);
    }

    #[test]
    fn corrupt_input_rejected() {
        let (t, vocab) = trainer();
        let bytes = Checkpoint::from_trainer(&t, &vocab).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
