//! Deterministic synthetic pseudo-CXR dataset generator.
//!
//! Images are 640×512 16-bit grayscale with class-dependent structure:
//!
//! * class 0 (normal): smooth chest-like background only — a broad torso
//!   blob, a gentle vertical gradient and a low-frequency ripple;
//! * class 1 (heart failure): the background plus a bright blob in the
//!   lower-central region;
//! * class 2 (pneumonia): the background plus a textured patch inside a
//!   randomly chosen left/right lung field.
//!
//! Ground-truth saliency is a Gaussian centered on the discriminative
//! region (broad and central for class 0). A `meta.jsonl` sidecar records
//! each image's focus center so attribution tests can check localization.

use super::{ClassLabel, Split};
use crate::{Error, Result, CANON_H, CANON_W};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Sidecar record describing where a generated image's discriminative
/// feature (and saliency mass) is centered.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthMeta {
    pub image_path: String,
    pub label: String,
    /// Canonical-frame column of the feature center.
    pub focus_x: f64,
    /// Canonical-frame row of the feature center.
    pub focus_y: f64,
}

/// Reads the generator's `meta.jsonl` sidecar.
pub fn load_synth_meta(path: &Path) -> Result<Vec<SynthMeta>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Generates `n` images (classes balanced as i mod 3), their ground-truth
/// saliency maps, a manifest and the meta sidecar. Bit-deterministic for a
/// fixed seed. Returns the manifest path.
///
/// Split policy, per class with m members: when n ≥ 30, the last
/// max(1, m/10) records are test; of the remainder, the last max(1, ·/10)
/// are val (when at least 2 remain); the rest train.
pub fn generate_synthetic_dataset(n: usize, rng_seed: u64, out_dir: &Path) -> Result<PathBuf> {
    if n < 3 {
        return Err(Error::Validation(format!(
            "synthetic dataset needs n ≥ 3 (one image per class), got {n}"
        )));
    }
    let images_dir = out_dir.join("images");
    let saliency_dir = out_dir.join("saliency");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&saliency_dir).map_err(|e| Error::io(&saliency_dir, e))?;

    let splits = assign_splits(n);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let manifest_path = out_dir.join("manifest.jsonl");
    let meta_path = out_dir.join("meta.jsonl");
    let mut manifest = std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut meta = std::fs::File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;

    for i in 0..n {
        let label = ClassLabel::from_index(i % 3).expect("mod 3 in range");
        let (canvas, focus_y, focus_x, sal_sigma) = render_image(label, &mut rng);

        let image_rel = format!("images/img_{i:05}.png");
        let sal_rel = format!("saliency/sal_{i:05}.png");
        write_quantized(&out_dir.join(&image_rel), &canvas)?;

        let saliency = gaussian_map(focus_y, focus_x, sal_sigma);
        write_scaled_u16(&out_dir.join(&sal_rel), &saliency)?;

        let row = serde_json::json!({
            "image_path": image_rel,
            "label": label.as_str(),
            "saliency_path": sal_rel,
            "split": splits[i].as_str(),
        });
        writeln!(manifest, "{row}").map_err(|e| Error::io(&manifest_path, e))?;
        let meta_row = SynthMeta {
            image_path: image_rel,
            label: label.as_str().to_string(),
            focus_x,
            focus_y,
        };
        writeln!(meta, "{}", serde_json::to_string(&meta_row).expect("meta serializes"))
            .map_err(|e| Error::io(&meta_path, e))?;
    }
    log::info!(
        "generated {n} synthetic images under {} (seed {rng_seed})",
        out_dir.display()
    );
    Ok(manifest_path)
}

fn assign_splits(n: usize) -> Vec<Split> {
    let mut splits = vec![Split::Train; n];
    for class in 0..3usize {
        let members: Vec<usize> = (0..n).filter(|i| i % 3 == class).collect();
        let m = members.len();
        if m == 0 {
            continue;
        }
        let test = if n >= 30 { (m / 10).max(1) } else { 0 };
        let rest = m - test;
        let val = if rest >= 2 { (rest / 10).max(1) } else { 0 };
        for (pos, &idx) in members.iter().enumerate() {
            splits[idx] = if pos >= m - test {
                Split::Test
            } else if pos >= m - test - val {
                Split::Val
            } else {
                Split::Train
            };
        }
    }
    splits
}

/// Renders one image; returns (canvas in [0,1], focus row, focus col,
/// saliency sigma).
fn render_image(label: ClassLabel, rng: &mut ChaCha8Rng) -> (Array2<f64>, f64, f64, f64) {
    let h = CANON_H;
    let w = CANON_W;
    let mut canvas = Array2::<f64>::from_elem((h, w), 0.30);

    // torso blob
    let torso_cy = 320.0 + rng.gen_range(-30.0..30.0);
    let torso_cx = 256.0 + rng.gen_range(-20.0..20.0);
    let torso_row = gauss_profile(h, torso_cy, 260.0);
    let torso_col = gauss_profile(w, torso_cx, 170.0);
    add_outer(&mut canvas, 0.30, &torso_row, &torso_col);

    // gentle vertical gradient
    let grad = rng.gen_range(0.02..0.08);
    let grad_row: Vec<f64> = (0..h).map(|r| r as f64 / h as f64).collect();
    let ones_col = vec![1.0f64; w];
    add_outer(&mut canvas, grad, &grad_row, &ones_col);

    // low-frequency ripple
    let ripple_amp = rng.gen_range(0.02..0.05);
    let period_r = rng.gen_range(200.0..400.0);
    let period_c = rng.gen_range(160.0..320.0);
    let phase_r = rng.gen_range(0.0..1.0);
    let phase_c = rng.gen_range(0.0..1.0);
    let rip_row = cos_profile(h, period_r, phase_r);
    let rip_col = cos_profile(w, period_c, phase_c);
    add_outer(&mut canvas, ripple_amp, &rip_row, &rip_col);

    let (focus_y, focus_x, sigma) = match label {
        ClassLabel::Normal => (torso_cy, torso_cx, 120.0),
        ClassLabel::HeartFailure => {
            // bright blob, lower-central
            let by = rng.gen_range(420.0..540.0);
            let bx = rng.gen_range(200.0..312.0);
            let blob_row = gauss_profile(h, by, 40.0);
            let blob_col = gauss_profile(w, bx, 40.0);
            add_outer(&mut canvas, 0.45, &blob_row, &blob_col);
            (by, bx, 48.0)
        }
        ClassLabel::Pneumonia => {
            // textured patch in a randomly chosen lung field
            let left = rng.gen_bool(0.5);
            let ty = rng.gen_range(180.0..420.0);
            let tx = if left {
                rng.gen_range(100.0..200.0)
            } else {
                rng.gen_range(312.0..412.0)
            };
            let win_row = gauss_profile(h, ty, 30.0);
            let win_col = gauss_profile(w, tx, 30.0);
            // visible mean shift plus a ripple the windows confine
            add_outer(&mut canvas, 0.12, &win_row, &win_col);
            let tex_row: Vec<f64> = win_row
                .iter()
                .enumerate()
                .map(|(r, &g)| (2.0 * std::f64::consts::PI * r as f64 / 24.0).sin() * g)
                .collect();
            let tex_col: Vec<f64> = win_col
                .iter()
                .enumerate()
                .map(|(c, &g)| (2.0 * std::f64::consts::PI * c as f64 / 24.0).sin() * g)
                .collect();
            add_outer(&mut canvas, 0.30, &tex_row, &tex_col);
            (ty, tx, 48.0)
        }
    };
    canvas.mapv_inplace(|v| v.clamp(0.0, 1.0));
    (canvas, focus_y, focus_x, sigma)
}

fn gauss_profile(len: usize, center: f64, sigma: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    (0..len)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d * inv).exp()
        })
        .collect()
}

fn cos_profile(len: usize, period: f64, phase: f64) -> Vec<f64> {
    (0..len)
        .map(|i| (2.0 * std::f64::consts::PI * (i as f64 / period + phase)).cos())
        .collect()
}

fn add_outer(canvas: &mut Array2<f64>, amp: f64, row: &[f64], col: &[f64]) {
    for (r, &rv) in row.iter().enumerate() {
        let k = amp * rv;
        let mut line = canvas.row_mut(r);
        let ls = line.as_slice_mut().expect("canvas row contiguous");
        for (v, &cv) in ls.iter_mut().zip(col) {
            *v += k * cv;
        }
    }
}

fn gaussian_map(cy: f64, cx: f64, sigma: f64) -> Array2<f64> {
    let row = gauss_profile(CANON_H, cy, sigma);
    let col = gauss_profile(CANON_W, cx, sigma);
    let mut map = Array2::<f64>::zeros((CANON_H, CANON_W));
    add_outer(&mut map, 1.0, &row, &col);
    let sum: f64 = map.iter().sum();
    map.mapv_inplace(|v| v / sum);
    map
}

fn write_quantized(path: &Path, canvas: &Array2<f64>) -> Result<()> {
    let grid = canvas.mapv(|v| (v * 65535.0).round().clamp(0.0, 65535.0) as u16);
    super::pngio::save_u16_png(path, &grid)
}

fn write_scaled_u16(path: &Path, weights: &Array2<f64>) -> Result<()> {
    let max = weights.iter().copied().fold(0.0f64, f64::max);
    let grid = if max > 0.0 {
        weights.mapv(|v| ((v / max) * 65535.0).round().clamp(0.0, 65535.0) as u16)
    } else {
        weights.mapv(|_| 0u16)
    };
    super::pngio::save_u16_png(path, &grid)
}
