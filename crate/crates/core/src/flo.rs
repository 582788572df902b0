//! Middlebury `.flo` files: `f32` magic 202021.25, `i32` width, `i32`
//! height, then row-major interleaved `(u, v)` `f32`, all little-endian.

use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: f32 = 202021.25;

#[derive(Debug, Error)]
pub enum FloError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a .flo file: magic is {found}, expected {MAGIC}")]
    BadMagic { found: f32 },
    #[error("truncated .flo data: need {expected} bytes, have {got}")]
    Truncated { expected: usize, got: usize },
    #[error("invalid .flo dimensions {width}x{height}")]
    Dimensions { width: i64, height: i64 },
    #[error("flow field must be [H, W, 2], got {0:?}")]
    Shape(Vec<usize>),
}

pub fn encode(field: &Tensor<f32>) -> Result<Vec<u8>, FloError> {
    let s = field.shape();
    if s.len() != 3 || s[2] != 2 {
        return Err(FloError::Shape(s.to_vec()));
    }
    let mut out = Vec::with_capacity(12 + field.len() * 4);
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&(s[1] as i32).to_le_bytes());
    out.extend_from_slice(&(s[0] as i32).to_le_bytes());
    for v in field.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>, FloError> {
    let word = |i: usize| -> Result<[u8; 4], FloError> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|b| b.try_into().expect("4 bytes"))
            .ok_or(FloError::Truncated { expected: i * 4 + 4, got: bytes.len() })
    };
    let magic = f32::from_le_bytes(word(0)?);
    if magic != MAGIC {
        return Err(FloError::BadMagic { found: magic });
    }
    let width = i32::from_le_bytes(word(1)?) as i64;
    let height = i32::from_le_bytes(word(2)?) as i64;
    if width <= 0 || height <= 0 {
        return Err(FloError::Dimensions { width, height });
    }
    let (w, h) = (width as usize, height as usize);
    let expected = 12 + w * h * 8;
    if bytes.len() < expected {
        return Err(FloError::Truncated { expected, got: bytes.len() });
    }
    let data =
        bytes[12..expected].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Ok(Tensor::new(&[h, w, 2], data).expect("length checked"))
}

pub fn write_flo(field: &Tensor<f32>, path: impl AsRef<Path>) -> Result<(), FloError> {
    let path = path.as_ref();
    std::fs::write(path, encode(field)?).map_err(|source| FloError::Io { path: path.display().to_string(), source })
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<Tensor<f32>, FloError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| FloError::Io { path: path.display().to_string(), source })?;
    decode(&bytes)
}
