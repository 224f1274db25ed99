//! Checkpoint container:
//!
//! ```text
//! magic   8 bytes  "PNETCKPT"
//! version u32 LE
//! hlen    u64 LE   length of the JSON header
//! header  hlen bytes of JSON (descriptor, seed, step, tensor directory)
//! payload f64 LE values of every tensor, in directory order
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelDescriptor};
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PNETCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    descriptor: ModelDescriptor,
    seed: u64,
    step: u64,
    tensors: Vec<TensorEntry>,
}

/// A model together with the seed it was built from and its training step.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let header = Header {
            descriptor: self.model.descriptor(),
            seed: self.seed,
            step: self.step,
            tensors: params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.dims().to_vec(),
                    len: t.numel(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * params.num_elements());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::InvalidArgument("checkpoint is truncated".into());
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u32::from_le_bytes(bytes.get(8..12).ok_or_else(truncated)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes.get(12..20).ok_or_else(truncated)?.try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(hlen).ok_or_else(truncated)?;
        let header: Header = serde_json::from_slice(bytes.get(20..header_end).ok_or_else(truncated)?)?;

        let mut model = Model::build(&header.descriptor, &Prng::new(header.seed))?;
        let expected: BTreeSet<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
        let mut seen = BTreeSet::new();
        for e in &header.tensors {
            if !expected.contains(&e.name) {
                return Err(Error::UnexpectedTensor(e.name.clone()));
            }
            if !seen.insert(e.name.clone()) {
                return Err(Error::UnexpectedTensor(format!("{} (duplicate)", e.name)));
            }
        }
        if let Some(missing) = expected.iter().find(|n| !seen.contains(*n)) {
            return Err(Error::MissingTensor(missing.clone()));
        }

        let mut offset = header_end;
        for e in &header.tensors {
            let id = model.params().find(&e.name).expect("checked above");
            let want = model.params().get(id).dims().to_vec();
            let want_len: usize = want.iter().product();
            if e.shape != want || e.len != want_len || e.shape.iter().product::<usize>() != e.len {
                return Err(Error::TensorShape {
                    name: e.name.clone(),
                    expected: want,
                    expected_len: want_len,
                    found: e.shape.clone(),
                    found_len: e.len,
                });
            }
            let end = offset + 8 * e.len;
            let raw = bytes.get(offset..end).ok_or_else(truncated)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *model.params_mut().get_mut(id) = Tensor::from_vec(want, data)?;
            offset = end;
        }
        if offset != bytes.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} trailing bytes",
                bytes.len() - offset
            )));
        }
        Ok(Self {
            model,
            seed: header.seed,
            step: header.step,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
