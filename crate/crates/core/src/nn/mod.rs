//! Minimal deterministic CPU neural-network layer library.
//!
//! Everything is `f32` ndarray-based with explicit forward/backward methods
//! per layer; there is no tape. Layers are stateless with respect to
//! activations: callers keep per-layer caches and hand them back for the
//! backward pass, so a frozen model can serve concurrent forward passes
//! from multiple threads.
//!
//! Reductions that feed training decisions (batch-norm statistics, pooled
//! means, loss sums) accumulate in `f64` with a fixed iteration order, so
//! repeated runs with the same seed are bit-identical.

pub mod adam;
pub mod conv;
pub mod init;
pub mod linear;
pub mod norm;
pub mod ops;
pub mod pool;

#[cfg(test)]
pub(crate) mod testutil;

pub use adam::{Adam, AdamConfig};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{BatchNorm2d, BnCache};
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2d};

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};
use sha2::{Digest, Sha256};
use std::collections::HashMap;

/// Visitor access to every parameter (and persistent buffer) of a model,
/// in a canonical order fixed by construction.
///
/// Buffers that are state but not trainable (batch-norm running statistics)
/// are visited too: they participate in checkpoints and digests, and the
/// optimizer skips them naturally because no gradient is ever recorded
/// under their names.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f32>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f32>));

    /// Number of scalar parameters.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v| n += v.len());
        n
    }
}

/// Accumulated gradients keyed by parameter name.
#[derive(Debug, Default)]
pub struct GradStore {
    map: HashMap<String, ArrayD<f32>>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add `grad` into the slot for `name`, creating it on first use.
    pub fn accumulate(&mut self, name: &str, grad: ArrayViewD<'_, f32>) {
        match self.map.get_mut(name) {
            Some(slot) => *slot += &grad,
            None => {
                self.map.insert(name.to_string(), grad.to_owned());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.map.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Scale every stored gradient (used to turn sums into batch means).
    pub fn scale(&mut self, factor: f32) {
        for g in self.map.values_mut() {
            *g *= factor;
        }
    }

    /// L2 norm over all gradients whose name starts with `prefix`.
    pub fn l2_norm_of_prefix(&self, prefix: &str) -> f64 {
        let mut acc = 0.0f64;
        for (k, g) in &self.map {
            if k.starts_with(prefix) {
                acc += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            }
        }
        acc.sqrt()
    }

    pub fn clear(&mut self) {
        self.map.clear();
    }

    /// Drop every gradient whose name does not start with one of the given
    /// prefixes. Defense in depth for stage training: the backward passes
    /// already confine themselves to the trainable namespaces, and this
    /// makes the optimizer blind to anything else regardless.
    pub fn retain_prefixes(&mut self, prefixes: &[&str]) {
        self.map
            .retain(|k, _| prefixes.iter().any(|p| k.starts_with(p)));
    }
}

fn hash_f32_slice(hasher: &mut Sha256, data: &[f32]) {
    // chunked little-endian encoding keeps hashing cheap on large tensors
    let mut buf = Vec::with_capacity(4 * 8192.min(data.len()));
    for chunk in data.chunks(8192) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        hasher.update(&buf);
    }
}

/// Stable cryptographic digest of all parameters whose name starts with
/// `prefix` (empty prefix = whole model). Hashes name, shape and raw
/// little-endian bytes in visit order, so any byte-level change to any
/// covered parameter changes the digest.
pub fn digest_params(model: &impl Params, prefix: &str) -> String {
    let mut hasher = Sha256::new();
    model.visit(&mut |name, v| {
        if !name.starts_with(prefix) {
            return;
        }
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update((v.ndim() as u64).to_le_bytes());
        for d in v.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        let owned;
        let slice = match v.as_slice() {
            Some(s) => s,
            None => {
                owned = v.to_owned();
                owned.as_slice().expect("owned array is contiguous")
            }
        };
        hash_f32_slice(&mut hasher, slice);
    });
    hex_string(&hasher.finalize())
}

/// [`digest_params`] over the union of several prefixes: a parameter is
/// hashed when its name starts with any of them.
pub fn digest_params_multi(model: &impl Params, prefixes: &[&str]) -> String {
    let mut hasher = Sha256::new();
    model.visit(&mut |name, v| {
        if !prefixes.iter().any(|p| name.starts_with(p)) {
            return;
        }
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update((v.ndim() as u64).to_le_bytes());
        for d in v.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        let owned;
        let slice = match v.as_slice() {
            Some(s) => s,
            None => {
                owned = v.to_owned();
                owned.as_slice().expect("owned array is contiguous")
            }
        };
        hash_f32_slice(&mut hasher, slice);
    });
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        use std::fmt::Write;
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Collect `(name, tensor)` pairs in canonical order.
pub fn export_params(model: &impl Params) -> Vec<(String, ArrayD<f32>)> {
    let mut out = Vec::new();
    model.visit(&mut |name, v| out.push((name.to_string(), v.to_owned())));
    out
}

/// Overwrite parameters from `(name, tensor)` pairs. Every visited
/// parameter must be present with a matching shape; unknown extra names
/// are reported as errors by the caller via the returned leftover count.
pub fn import_params(
    model: &mut impl Params,
    source: &HashMap<String, ArrayD<f32>>,
) -> crate::Result<usize> {
    let mut missing = Vec::new();
    let mut used = 0usize;
    model.visit_mut(&mut |name, mut v| match source.get(name) {
        Some(src) if src.shape() == v.shape() => {
            v.assign(src);
            used += 1;
        }
        Some(src) => missing.push(format!(
            "{name}: shape {:?} in archive vs {:?} in model",
            src.shape(),
            v.shape()
        )),
        None => missing.push(format!("{name}: absent from archive")),
    });
    if !missing.is_empty() {
        return Err(crate::Error::Validation(format!(
            "parameter import mismatch: {}",
            missing.join("; ")
        )));
    }
    Ok(source.len() - used)
}
