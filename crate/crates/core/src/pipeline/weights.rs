//! Versioned binary weight files.
//!
//! Layout, all integers `u32` little-endian:
//! `"SSMF"`, version, config length, config text, parameter count, then per
//! parameter: name length, name, rank, extents, `f32` data.

use std::path::Path;

use thiserror::Error;

use super::config::{ConfigError, ModelConfig};
use super::model::FlowModel;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SSMF";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a weight file: magic bytes {found:?}, expected \"SSMF\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported weight format version {found}, this build reads version {VERSION}")]
    BadVersion { found: u32 },
    #[error("weight file truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("malformed weight file: {0}")]
    Malformed(String),
    #[error("embedded config: {0}")]
    Config(#[from] ConfigError),
    #[error("config mismatch on '{field}': expected {expected}, file has {found}")]
    ConfigMismatch { field: &'static str, expected: String, found: String },
    #[error("parameter mismatch: {0}")]
    Parameters(String),
}

pub fn encode<T: Scalar>(config: &ModelConfig, store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config.to_text();
    u32le(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    u32le(&mut out, store.len());
    for (name, value) in store.iter() {
        u32le(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        u32le(&mut out, value.shape().len());
        for &e in value.shape() {
            u32le(&mut out, e);
        }
        for v in value.cast::<f32>().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], WeightError> {
        if self.buf.len() < n {
            return Err(WeightError::Truncated { what });
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, WeightError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<String, WeightError> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| WeightError::Malformed(format!("{what} is not UTF-8")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, ParamStore<f32>), WeightError> {
    let mut r = Reader { buf: bytes };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(WeightError::BadMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(WeightError::BadVersion { found: version });
    }
    let config = ModelConfig::parse(&r.string("config")?)?;
    let count = r.u32("parameter count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string("parameter name")?;
        if store.id(&name).is_some() {
            return Err(WeightError::Malformed(format!("duplicate parameter '{name}'")));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("extents")? as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let len = len.ok_or_else(|| WeightError::Malformed(format!("shape {shape:?} overflows")))?;
        let raw =
            r.take(len.checked_mul(4).ok_or(WeightError::Truncated { what: "parameter data" })?, "parameter data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        store.add(name, Tensor::new(&shape, data).map_err(|e| WeightError::Malformed(e.to_string()))?);
    }
    if !r.buf.is_empty() {
        return Err(WeightError::Malformed(format!("{} trailing bytes", r.buf.len())));
    }
    Ok((config, store))
}

pub fn save_weights<T: Scalar>(
    config: &ModelConfig,
    store: &ParamStore<T>,
    path: impl AsRef<Path>,
) -> Result<(), WeightError> {
    let path = path.as_ref();
    std::fs::write(path, encode(config, store))
        .map_err(|source| WeightError::Io { path: path.display().to_string(), source })
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(ModelConfig, ParamStore<f32>), WeightError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| WeightError::Io { path: path.display().to_string(), source })?;
    decode(&bytes)
}

/// Errors when `found` differs from `expected`, naming the first differing field.
pub fn check_config(expected: &ModelConfig, found: &ModelConfig) -> Result<(), WeightError> {
    match expected.first_difference(found) {
        Some((field, expected, found)) => Err(WeightError::ConfigMismatch { field, expected, found }),
        None => Ok(()),
    }
}

/// Rebuilds the model described by the file and checks every parameter
/// name and shape against it.
pub fn instantiate<T: Scalar>(
    config: ModelConfig,
    weights: &ParamStore<f32>,
) -> Result<(ParamStore<T>, FlowModel), WeightError> {
    let (fresh, model) = FlowModel::new::<f32>(config, 0)?;
    if fresh.len() != weights.len() {
        return Err(WeightError::Parameters(format!(
            "model has {} parameters, file has {}",
            fresh.len(),
            weights.len()
        )));
    }
    for (name, value) in fresh.iter() {
        let w = weights.get(name).ok_or_else(|| WeightError::Parameters(format!("missing '{name}'")))?;
        if w.shape() != value.shape() {
            return Err(WeightError::Parameters(format!(
                "'{name}' has shape {:?}, model expects {:?}",
                w.shape(),
                value.shape()
            )));
        }
    }
    let mut store = ParamStore::new();
    for (name, _) in fresh.iter() {
        store.add(name, weights.get(name).expect("checked").cast());
    }
    Ok((store, model))
}
