//! Checkpoint archives: a self-describing binary container for a named
//! subset of model parameters plus run metadata, with a SHA-256 trailer so
//! truncation or corruption is detected before anything is loaded.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CXRG" | version u32 | meta_len u64 | meta JSON
//! n_params u64 | { name_len u64 | name | ndim u8 | dims u64… | f32 data } …
//! sha256 of everything above (32 bytes)
//! ```
//!
//! Loading parses and verifies the whole file before touching a model, so a
//! bad archive can never leave a model half-updated.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::Params;
use crate::{Error, Result};

use super::StageKind;

const MAGIC: &[u8; 4] = b"CXRG";
const VERSION: u32 = 1;

/// Run metadata stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Stage that produced this archive.
    pub stage: StageKind,
    /// 1-based epoch whose weights are stored (the best validation epoch).
    pub epoch: usize,
    /// Validation metric at that epoch (training metric when no validation
    /// objective was computable).
    pub best_val_metric: f64,
    /// Digest of the full configuration the run used.
    pub config_digest: String,
    /// Digest of the configuration keys that fix the archived parameter
    /// shapes and semantics; checked when another stage loads this file.
    pub arch_digest: String,
    pub seed: u64,
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

/// Serialize the parameters of `model` whose names start with any of
/// `prefixes`, then atomically replace `path`.
pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    model: &impl Params,
    prefixes: &[&str],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta_json = serde_json::to_vec(meta).expect("metadata serialization cannot fail");
    buf.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_json);

    let mut params: Vec<(String, ArrayD<f32>)> = Vec::new();
    model.visit(&mut |name, v| {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            params.push((name.to_string(), v.to_owned()));
        }
    });
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, arr) in &params {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(arr.ndim() as u8);
        for d in arr.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        let std = arr.as_standard_layout();
        for &v in std.as_slice().expect("standard layout is contiguous") {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let wrap = |source: std::io::Error| Error::Io { path: path.to_path_buf(), source };
    std::fs::create_dir_all(dir).map_err(wrap)?;
    // write-then-rename so a crash can never leave a half-written archive
    // under the final name
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp.{}", std::process::id()));
    let tmp_path = dir.join(tmp_name);
    let mut tmp = std::fs::File::create(&tmp_path).map_err(wrap)?;
    tmp.write_all(&buf).map_err(wrap)?;
    tmp.sync_all().map_err(wrap)?;
    drop(tmp);
    std::fs::rename(&tmp_path, path).map_err(wrap)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| integrity("checkpoint ends mid-record"))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Read and verify an archive. Any structural damage — bad magic, version,
/// checksum, or truncation — is an integrity error.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<(String, ArrayD<f32>)>)> {
    let data = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if data.len() < MAGIC.len() + 4 + 32 {
        return Err(integrity(format!(
            "checkpoint {} is truncated ({} bytes)",
            path.display(),
            data.len()
        )));
    }
    let (body, trailer) = data.split_at(data.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(integrity(format!(
            "checkpoint {} fails its checksum (corrupt or truncated)",
            path.display()
        )));
    }

    let mut cur = Cursor { data: body, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(integrity(format!("{} is not a checkpoint archive", path.display())));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(integrity(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let meta_len = cur.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| integrity(format!("bad checkpoint metadata: {e}")))?;

    let n_params = cur.u64()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = cur.u64()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| integrity("parameter name is not UTF-8"))?
            .to_string();
        let ndim = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let bytes = cur.take(count * 4)?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let arr = ArrayD::from_shape_vec(shape, values)
            .map_err(|e| integrity(format!("parameter `{name}` has a bad shape: {e}")))?;
        params.push((name, arr));
    }
    if cur.pos != body.len() {
        return Err(integrity("checkpoint has trailing bytes after the last parameter"));
    }
    Ok((meta, params))
}

/// Copy archived parameters into a model by name. Every archived name must
/// exist in the model with an identical shape; this is verified up front so
/// a mismatch mutates nothing.
pub fn apply_params(model: &mut impl Params, params: &[(String, ArrayD<f32>)]) -> Result<()> {
    let mut shapes: HashMap<String, Vec<usize>> = HashMap::new();
    model.visit(&mut |name, v| {
        shapes.insert(name.to_string(), v.shape().to_vec());
    });
    for (name, arr) in params {
        match shapes.get(name.as_str()) {
            None => {
                return Err(Error::Validation(format!(
                    "checkpoint parameter `{name}` does not exist in the model"
                )))
            }
            Some(shape) if shape.as_slice() != arr.shape() => {
                return Err(Error::Validation(format!(
                    "checkpoint parameter `{name}` has shape {:?} but the model expects {:?}",
                    arr.shape(),
                    shape
                )))
            }
            Some(_) => {}
        }
    }

    let map: HashMap<&str, &ArrayD<f32>> =
        params.iter().map(|(n, a)| (n.as_str(), a)).collect();
    model.visit_mut(&mut |name, mut view| {
        if let Some(src) = map.get(name) {
            view.assign(src);
        }
    });
    Ok(())
}
