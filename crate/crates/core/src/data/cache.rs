//! Optional on-disk cache of preprocessed image tensors.
//!
//! When the `CXRGAZE_CACHE` environment variable names a directory,
//! canonical tensors are memoized there as raw little-endian f32 grids,
//! keyed by the source file's absolute path, size and mtime. Cache failures
//! are never fatal: the loader falls back to recomputing.

use super::{load_image_grid, preprocess_image, CanonicalImage};
use crate::{Result, CANON_H, CANON_W};
use ndarray::Array2;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const CACHE_ENV_VAR: &str = "CXRGAZE_CACHE";

/// Loads and preprocesses an image, consulting the tensor cache when
/// `CXRGAZE_CACHE` is set.
pub fn load_canonical_image(path: &Path) -> Result<CanonicalImage> {
    let cache_path = cache_entry_path(path);
    if let Some(cp) = &cache_path {
        if let Some(img) = read_cached(cp) {
            return Ok(img);
        }
    }
    let raw = load_image_grid(path)?;
    let canon = preprocess_image(&raw)?;
    if let Some(cp) = &cache_path {
        if let Err(e) = write_cached(cp, &canon) {
            log::warn!("tensor cache write failed for {}: {e}", cp.display());
        }
    }
    Ok(canon)
}

fn cache_entry_path(source: &Path) -> Option<PathBuf> {
    let dir = PathBuf::from(std::env::var_os(CACHE_ENV_VAR)?);
    cache_entry_path_in(&dir, source)
}

fn cache_entry_path_in(dir: &Path, source: &Path) -> Option<PathBuf> {
    let meta = std::fs::metadata(source).ok()?;
    let abs = std::fs::canonicalize(source).ok()?;
    let mut hasher = Sha256::new();
    hasher.update(abs.to_string_lossy().as_bytes());
    hasher.update(meta.len().to_le_bytes());
    if let Ok(mtime) = meta.modified() {
        if let Ok(d) = mtime.duration_since(std::time::UNIX_EPOCH) {
            hasher.update(d.as_nanos().to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    let mut name = String::with_capacity(64);
    for b in digest.iter().take(16) {
        use std::fmt::Write;
        let _ = write!(name, "{b:02x}");
    }
    Some(dir.join(format!("{name}.f32")))
}

fn read_cached(path: &Path) -> Option<CanonicalImage> {
    let mut f = std::fs::File::open(path).ok()?;
    let mut bytes = Vec::with_capacity(CANON_H * CANON_W * 4);
    f.read_to_end(&mut bytes).ok()?;
    if bytes.len() != CANON_H * CANON_W * 4 {
        log::warn!("ignoring malformed cache entry {}", path.display());
        return None;
    }
    let mut values = Vec::with_capacity(CANON_H * CANON_W);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let grid = Array2::from_shape_vec((CANON_H, CANON_W), values).ok()?;
    CanonicalImage::new(grid).ok()
}

fn write_cached(path: &Path, img: &CanonicalImage) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("f32.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        let mut buf = Vec::with_capacity(CANON_H * CANON_W * 4);
        for &v in img.pixels().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf)?;
    }
    std::fs::rename(&tmp, path)
}
