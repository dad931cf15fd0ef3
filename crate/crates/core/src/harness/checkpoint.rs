//! Single-file checkpoints.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, a JSON
//! header (configs, counters, sampler state, tensor manifest), then the
//! parameters followed by the first and second optimizer moments, each in
//! manifest order as raw little-endian values.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::RngState;
use super::train::{TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::{LanguageModel, ModelConfig};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TFXCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub tokens_seen: u64,
    pub adam_steps: u64,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

pub fn save<T: Scalar>(path: &Path, t: &Trainer<T>) -> Result<()> {
    let store = &t.model.store;
    let header = Header {
        model: t.model.config.clone(),
        train: t.config.clone(),
        step: t.step,
        tokens_seen: t.tokens_seen,
        adam_steps: t.opt.t,
        rng: t.sampler.state(),
        tensors: store
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                precision: T::PRECISION,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + json.len() + 3 * store.num_scalars() * T::BYTES);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let params = store.iter().map(|(_, p)| &p.value);
    for tensor in params.chain(&t.opt.m).chain(&t.opt.v) {
        for &x in tensor.data() {
            x.push_le(&mut buf);
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    // write-then-rename so a crash never leaves a torn file behind
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn split_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20 + len)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    Ok((header, &bytes[20 + len..]))
}

pub fn read_header(path: &Path) -> Result<Header> {
    split_header(&fs::read(path)?).map(|(h, _)| h)
}

/// Rebuilds a trainer, validating the manifest against the model the
/// stored config describes.
pub fn load<T: Scalar>(path: &Path) -> Result<Trainer<T>> {
    let bytes = fs::read(path)?;
    let (h, mut data) = split_header(&bytes)?;
    let mut model = LanguageModel::<T>::new(h.model.clone())?;
    if h.tensors.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, the config builds {}",
            h.tensors.len(),
            model.store.len()
        )));
    }
    for ((_, p), e) in model.store.iter().zip(&h.tensors) {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() || e.precision != T::PRECISION
        {
            return Err(Error::Checkpoint(format!(
                "manifest entry {} {:?} ({}) does not match model tensor {} {:?} ({})",
                e.name,
                e.shape,
                e.precision.name(),
                p.name,
                p.value.shape(),
                T::PRECISION.name()
            )));
        }
    }
    let expect = 3 * model.store.num_scalars() * T::BYTES;
    if data.len() != expect {
        return Err(Error::Checkpoint(format!(
            "tensor payload holds {} bytes, manifest needs {expect}",
            data.len()
        )));
    }
    let mut take = |t: &mut Tensor<T>| {
        for (x, chunk) in t.data_mut().iter_mut().zip(data.chunks_exact(T::BYTES)) {
            *x = T::read_le(chunk);
        }
        data = &data[t.numel() * T::BYTES..];
    };
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        take(model.store.value_mut(id));
    }
    let mut trainer = Trainer::new(model, h.train)?;
    for m in trainer.opt.m.iter_mut() {
        take(m);
    }
    for v in trainer.opt.v.iter_mut() {
        take(v);
    }
    trainer.opt.t = h.adam_steps;
    trainer.step = h.step;
    trainer.tokens_seen = h.tokens_seen;
    trainer.sampler.restore(&h.rng)?;
    Ok(trainer)
}
