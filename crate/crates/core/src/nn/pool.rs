//! Spatial pooling and resampling primitives.

use ndarray::{s, Array1, Array2, Array4, ArrayView4};

/// Max pooling with an argmax cache for exact backward routing.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct MaxPoolCache {
    /// Flat input index (into the `(h*w)` plane) of each output's winner.
    pub argmax: Vec<u32>,
    pub in_hw: (usize, usize),
}

impl MaxPool2d {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: ArrayView4<'_, f32>) -> (Array4<f32>, MaxPoolCache) {
        let x_std = x.as_standard_layout();
        let x = x_std.view();
        let (n, c, h, w) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let mut y = Array4::<f32>::zeros((n, c, ho, wo));
        let mut argmax = vec![0u32; n * c * ho * wo];
        let mut flat = 0usize;
        for i in 0..n {
            for ch in 0..c {
                let plane = x.slice(s![i, ch, .., ..]);
                let ps = plane.to_slice().expect("pool input plane contiguous");
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = iy as usize * w + ix as usize;
                                let v = ps[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx as u32;
                                }
                            }
                        }
                        y[[i, ch, oy, ox]] = best;
                        argmax[flat] = best_idx;
                        flat += 1;
                    }
                }
            }
        }
        (y, MaxPoolCache { argmax, in_hw: (h, w) })
    }

    pub fn backward(&self, cache: &MaxPoolCache, dy: &Array4<f32>) -> Array4<f32> {
        let (n, c, ho, wo) = dy.dim();
        let (h, w) = cache.in_hw;
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        let mut flat = 0usize;
        for i in 0..n {
            for ch in 0..c {
                let mut plane = dx.slice_mut(s![i, ch, .., ..]);
                let ds = plane.as_slice_mut().unwrap();
                for oy in 0..ho {
                    for ox in 0..wo {
                        ds[cache.argmax[flat] as usize] += dy[[i, ch, oy, ox]];
                        flat += 1;
                    }
                }
            }
        }
        dx
    }
}

/// Non-overlapping 2×2 average pooling (dense-block transitions).
pub fn avg_pool_2x2(x: ArrayView4<'_, f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array4::<f32>::zeros((n, c, ho, wo));
    for i in 0..n {
        for ch in 0..c {
            let plane = x.slice(s![i, ch, .., ..]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let sum = plane[[2 * oy, 2 * ox]]
                        + plane[[2 * oy, 2 * ox + 1]]
                        + plane[[2 * oy + 1, 2 * ox]]
                        + plane[[2 * oy + 1, 2 * ox + 1]];
                    y[[i, ch, oy, ox]] = sum * 0.25;
                }
            }
        }
    }
    y
}

pub fn avg_pool_2x2_backward(dy: &Array4<f32>, in_hw: (usize, usize)) -> Array4<f32> {
    let (n, c, ho, wo) = dy.dim();
    let (h, w) = in_hw;
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = dy[[i, ch, oy, ox]] * 0.25;
                    dx[[i, ch, 2 * oy, 2 * ox]] += g;
                    dx[[i, ch, 2 * oy, 2 * ox + 1]] += g;
                    dx[[i, ch, 2 * oy + 1, 2 * ox]] += g;
                    dx[[i, ch, 2 * oy + 1, 2 * ox + 1]] += g;
                }
            }
        }
    }
    dx
}

/// Global average pooling to `(n, c)`, accumulated in f64 so the result is
/// independent of element ordering roundoff at f32 precision.
pub fn global_avg_pool(x: ArrayView4<'_, f32>) -> Array2<f32> {
    let x_std = x.as_standard_layout();
    let x = x_std.view();
    let (n, c, h, w) = x.dim();
    let cnt = (h * w) as f64;
    let mut y = Array2::<f32>::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            let plane = x.slice(s![i, ch, .., ..]);
            let ps = plane.to_slice().expect("gap input plane contiguous");
            let sum: f64 = ps.iter().map(|&v| v as f64).sum();
            y[[i, ch]] = (sum / cnt) as f32;
        }
    }
    y
}

pub fn global_avg_pool_backward(dy: &Array2<f32>, in_hw: (usize, usize)) -> Array4<f32> {
    let (n, c) = dy.dim();
    let (h, w) = in_hw;
    let scale = 1.0 / (h * w) as f32;
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            let g = dy[[i, ch]] * scale;
            dx.slice_mut(s![i, ch, .., ..]).fill(g);
        }
    }
    dx
}

/// Per-channel spatial mean of a single-image feature map `(c, h, w)` laid
/// out as a 4-d view; convenience for attribution weights.
pub fn channel_means(x: ArrayView4<'_, f32>) -> Array1<f64> {
    let x_std = x.as_standard_layout();
    let x = x_std.view();
    let (n, c, h, w) = x.dim();
    assert_eq!(n, 1, "channel_means expects a single image");
    let cnt = (h * w) as f64;
    let mut out = Array1::<f64>::zeros(c);
    for ch in 0..c {
        let plane = x.slice(s![0, ch, .., ..]);
        let ps = plane.to_slice().unwrap();
        out[ch] = ps.iter().map(|&v| v as f64).sum::<f64>() / cnt;
    }
    out
}

/// Nearest-neighbour 2× upsampling (decoder path).
pub fn upsample_nearest_2x(x: ArrayView4<'_, f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<f32>::zeros((n, c, 2 * h, 2 * w));
    for i in 0..n {
        for ch in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let v = x[[i, ch, iy, ix]];
                    y[[i, ch, 2 * iy, 2 * ix]] = v;
                    y[[i, ch, 2 * iy, 2 * ix + 1]] = v;
                    y[[i, ch, 2 * iy + 1, 2 * ix]] = v;
                    y[[i, ch, 2 * iy + 1, 2 * ix + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample_nearest_2x_backward(dy: &Array4<f32>) -> Array4<f32> {
    let (n, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    dx[[i, ch, iy, ix]] = dy[[i, ch, 2 * iy, 2 * ix]]
                        + dy[[i, ch, 2 * iy, 2 * ix + 1]]
                        + dy[[i, ch, 2 * iy + 1, 2 * ix]]
                        + dy[[i, ch, 2 * iy + 1, 2 * ix + 1]];
                }
            }
        }
    }
    dx
}

/// Bilinear resampling of a single-channel map to an arbitrary size using
/// half-pixel centers (same convention as image preprocessing).
pub fn bilinear_resize_plane(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Array2::<f32>::zeros((out_h, out_w));
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = (fy - y0 as f64) as f32;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = (fx - x0 as f64) as f32;
            let top = src[[y0, x0]] * (1.0 - wx) + src[[y0, x1]] * wx;
            let bot = src[[y1, x0]] * (1.0 - wx) + src[[y1, x1]] * wx;
            out[[oy, ox]] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}
