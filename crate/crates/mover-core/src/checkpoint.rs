//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//! magic `MOVE`, u32 version, u64 header length + header bytes (text
//! `key=value` lines), then per-tensor records: u64 name length, name bytes,
//! u64 rank, rank dims as u64, f64 payload.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MOVE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated tensor record at byte {offset}")]
    TruncatedTensor { offset: usize },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    /// ordered key=value pairs: hyperparameters, step, RNG state
    pub header: Vec<(String, String)>,
    /// named tensors: model parameters and optimizer moments
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        self.get(key)
            .ok_or_else(|| CheckpointError::BadHeader(format!("missing key `{key}`")))?
            .parse()
            .map_err(|_| CheckpointError::BadHeader(format!("unparsable value for `{key}`")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let mut header = String::new();
        for (k, v) in &self.header {
            debug_assert!(!k.contains('\n') && !v.contains('\n'));
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape.len() as u64).to_le_bytes());
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let data = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
            if *pos + n > data.len() {
                return Err(CheckpointError::TruncatedTensor { offset: *pos });
            }
            let s = &data[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic = take(&mut pos, 4)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let header_bytes = take(&mut pos, header_len)?;
        let header_text = std::str::from_utf8(header_bytes)
            .map_err(|_| CheckpointError::BadHeader("header is not utf-8".into()))?;
        let mut header = Vec::new();
        for line in header_text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::BadHeader(format!("bad line `{line}`")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let mut tensors = Vec::new();
        while pos < data.len() {
            let name_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| CheckpointError::BadHeader("tensor name is not utf-8".into()))?
                .to_string();
            let rank = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = take(&mut pos, numel * 8)?;
            let values = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, values)));
        }
        Ok(Checkpoint { header, tensors })
    }
}
