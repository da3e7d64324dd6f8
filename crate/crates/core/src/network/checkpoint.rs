//! Binary checkpoint container.
//!
//! Layout: the magic bytes `HMLSTMCK`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then every array as
//! little-endian `f64` values in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelParams};
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::trainer::{OptState, TrainConfig};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HMLSTMCK";

/// Everything needed to evaluate a model or continue training it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Option<Vocab>,
    pub train: Option<TrainConfig>,
    /// Completed epochs.
    pub epoch: usize,
    pub slope: f64,
    pub seed: u64,
    pub optimizer: Option<OptState>,
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::Format(format!("checkpoint truncated in {what}")));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    learning_rate: f64,
    slope: f64,
    best_val_bpc: Option<f64>,
    lr_decays: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    vocab: Option<Vocab>,
    train: Option<TrainConfig>,
    epoch: usize,
    slope: f64,
    seed: u64,
    optimizer: Option<OptimizerHeader>,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    fn arrays(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.model.params.named();
        if let Some(opt) = &self.optimizer {
            out.extend(opt.m.named().into_iter().map(|(n, t)| (format!("adam.m.{n}"), t)));
            out.extend(opt.v.named().into_iter().map(|(n, t)| (format!("adam.v.{n}"), t)));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arrays = self.arrays();
        let header = Header {
            model: self.model.config.clone(),
            vocab: self.vocab.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            slope: self.slope,
            seed: self.seed,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                step: o.step,
                learning_rate: o.learning_rate,
                slope: o.slope,
                best_val_bpc: o.best_val_bpc,
                lr_decays: o.lr_decays,
            }),
            arrays: arrays.iter().map(|(n, t)| ArrayEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * arrays.iter().map(|(_, t)| t.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = Reader(bytes);
        if reader.take(8, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(reader.take(4, "version")?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(reader.take(8, "header length")?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| Error::Format("header length overflows".into()))?;
        let header: Header = serde_json::from_slice(reader.take(len, "header")?)?;

        if let Some(v) = &header.vocab {
            if v.size() != header.model.vocab_size {
                return Err(Error::Format(format!("vocabulary of {} classes for a model with {}", v.size(), header.model.vocab_size)));
            }
        }
        let mut params = ModelParams::zeros(&header.model)?;
        let mut optimizer = header.optimizer.as_ref().map(|o| OptState {
            m: params.clone(),
            v: params.clone(),
            step: o.step,
            learning_rate: o.learning_rate,
            slope: o.slope,
            best_val_bpc: o.best_val_bpc,
            lr_decays: o.lr_decays,
        });
        {
            let mut slots = params.named_mut();
            if let Some(opt) = optimizer.as_mut() {
                slots.extend(opt.m.named_mut().into_iter().map(|(n, t)| (format!("adam.m.{n}"), t)));
                slots.extend(opt.v.named_mut().into_iter().map(|(n, t)| (format!("adam.v.{n}"), t)));
            }
            if slots.len() != header.arrays.len() {
                return Err(Error::Format(format!("expected {} arrays, header lists {}", slots.len(), header.arrays.len())));
            }
            for ((name, slot), entry) in slots.into_iter().zip(&header.arrays) {
                if name != entry.name || slot.shape() != entry.shape.as_slice() {
                    return Err(Error::Format(format!(
                        "array {} {:?} where {name} {:?} was expected",
                        entry.name,
                        entry.shape,
                        slot.shape()
                    )));
                }
                let raw = reader.take(8 * slot.len(), &name)?;
                for (v, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                    *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
                }
            }
        }
        if !reader.0.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after the last array", reader.0.len())));
        }
        Ok(Self {
            model: Model::new(header.model, params)?,
            vocab: header.vocab,
            train: header.train,
            epoch: header.epoch,
            slope: header.slope,
            seed: header.seed,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
