//! 2-D convolution via im2col + GEMM.

use super::GradStore;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView4};

/// Convolution layer with square stride/padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    /// (c_out, c_in, kh, kw)
    pub weight: Array4<f32>,
    pub bias: Option<ndarray::Array1<f32>>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-initialized convolution; `bias` is usually false because a batch
    /// norm follows.
    pub fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl rand::Rng,
    ) -> Self {
        Self {
            name: name.into(),
            weight: super::init::kaiming_conv(cout, cin, k, k, rng),
            bias: bias.then(|| ndarray::Array1::zeros(cout)),
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.dim();
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn forward(&self, x: ArrayView4<'_, f32>) -> Array4<f32> {
        let x_std = x.as_standard_layout();
        let x = x_std.view();
        let (n, cin, h, w) = x.dim();
        let (cout, wcin, kh, kw) = self.weight.dim();
        assert_eq!(cin, wcin, "{}: input channels {cin} != {wcin}", self.name);
        let (ho, wo) = self.out_hw(h, w);
        let ckk = cin * kh * kw;

        let mut y = Array4::<f32>::zeros((n, cout, ho, wo));
        let mut col = Array2::<f32>::zeros((ckk, ho * wo));
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((cout, ckk))
            .expect("conv weight is standard layout");

        for i in 0..n {
            let xi = x.slice(s![i, .., .., ..]);
            let xs = xi.to_slice().expect("conv input image is contiguous");
            im2col_into(
                xs,
                cin,
                h,
                w,
                kh,
                kw,
                self.stride,
                self.pad,
                ho,
                wo,
                col.as_slice_mut().unwrap(),
            );
            let mut yi = y
                .slice_mut(s![i, .., .., ..])
                .into_shape_with_order((cout, ho * wo))
                .unwrap();
            general_mat_mul(1.0, &w2, &col.view(), 0.0, &mut yi);
        }
        if let Some(b) = &self.bias {
            for i in 0..n {
                for c in 0..cout {
                    let bc = b[c];
                    y.slice_mut(s![i, c, .., ..]).mapv_inplace(|v| v + bc);
                }
            }
        }
        y
    }

    /// Backward pass. `x` must be the forward input. Returns `dx` unless
    /// `want_dx` is false (leaf inputs skip the col2im scatter).
    pub fn backward(
        &self,
        x: ArrayView4<'_, f32>,
        dy: &Array4<f32>,
        grads: &mut GradStore,
        want_dx: bool,
    ) -> Option<Array4<f32>> {
        let x_std = x.as_standard_layout();
        let x = x_std.view();
        let (n, cin, h, w) = x.dim();
        let (cout, _, kh, kw) = self.weight.dim();
        let (ho, wo) = self.out_hw(h, w);
        let ckk = cin * kh * kw;

        let mut col = Array2::<f32>::zeros((ckk, ho * wo));
        let mut dw = Array2::<f32>::zeros((cout, ckk));
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((cout, ckk))
            .unwrap();
        let mut dx = want_dx.then(|| Array4::<f32>::zeros((n, cin, h, w)));
        let mut dcol = want_dx.then(|| Array2::<f32>::zeros((ckk, ho * wo)));

        for i in 0..n {
            let xi = x.slice(s![i, .., .., ..]);
            let xs = xi.to_slice().expect("conv input image is contiguous");
            im2col_into(
                xs,
                cin,
                h,
                w,
                kh,
                kw,
                self.stride,
                self.pad,
                ho,
                wo,
                col.as_slice_mut().unwrap(),
            );
            let dyi = dy
                .slice(s![i, .., .., ..])
                .into_shape_with_order((cout, ho * wo))
                .unwrap();
            // dW += dY · colᵀ
            general_mat_mul(1.0, &dyi, &col.t(), 1.0, &mut dw.view_mut());
            if let (Some(dx), Some(dcol)) = (dx.as_mut(), dcol.as_mut()) {
                // dcol = Wᵀ · dY, then scatter back to image coordinates
                general_mat_mul(1.0, &w2.t(), &dyi, 0.0, &mut dcol.view_mut());
                let mut dxi = dx.slice_mut(s![i, .., .., ..]);
                col2im_add(
                    dcol.as_slice().unwrap(),
                    cin,
                    h,
                    w,
                    kh,
                    kw,
                    self.stride,
                    self.pad,
                    ho,
                    wo,
                    dxi.as_slice_mut().unwrap(),
                );
            }
        }

        grads.accumulate(
            &format!("{}.weight", self.name),
            dw.into_shape_with_order((cout, cin, kh, kw))
                .unwrap()
                .view()
                .into_dyn(),
        );
        if self.bias.is_some() {
            let mut db = ndarray::Array1::<f32>::zeros(cout);
            for i in 0..n {
                for c in 0..cout {
                    db[c] += dy.slice(s![i, c, .., ..]).sum();
                }
            }
            grads.accumulate(&format!("{}.bias", self.name), db.view().into_dyn());
        }
        dx
    }
}

/// Pack one image (c_in, h, w) into the (c_in·kh·kw, ho·wo) patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col_into(
    xs: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [f32],
) {
    let hw_o = ho * wo;
    for c in 0..cin {
        let plane = &xs[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * hw_o;
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    let dst = &mut col[row + oh * wo..row + (oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[ih as usize * w..(ih as usize + 1) * w];
                    let off = kj as isize - pad as isize;
                    if stride == 1 {
                        // valid ow range: 0 <= ow + off < w
                        let lo = (-off).max(0) as usize;
                        let hi = ((w as isize - off).max(0) as usize).min(wo);
                        dst[..lo.min(wo)].fill(0.0);
                        if lo < hi {
                            dst[lo..hi]
                                .copy_from_slice(&src_row[(lo as isize + off) as usize..(hi as isize + off) as usize]);
                        }
                        if hi < wo {
                            dst[hi..].fill(0.0);
                        }
                    } else {
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * stride) as isize + off;
                            *d = if iw >= 0 && iw < w as isize {
                                src_row[iw as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient back into image coordinates.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    dcol: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f32],
) {
    let hw_o = ho * wo;
    for c in 0..cin {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * hw_o;
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &dcol[row + oh * wo..row + (oh + 1) * wo];
                    let dst_row = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    let off = kj as isize - pad as isize;
                    if stride == 1 {
                        let lo = (-off).max(0) as usize;
                        let hi = ((w as isize - off).max(0) as usize).min(wo);
                        for ow in lo..hi {
                            dst_row[(ow as isize + off) as usize] += src[ow];
                        }
                    } else {
                        for (ow, &v) in src.iter().enumerate() {
                            let iw = (ow * stride) as isize + off;
                            if iw >= 0 && iw < w as isize {
                                dst_row[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl super::Params for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, f32>)) {
        f(&format!("{}.weight", self.name), self.weight.view().into_dyn());
        if let Some(b) = &self.bias {
            f(&format!("{}.bias", self.name), b.view().into_dyn());
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, f32>)) {
        f(
            &format!("{}.weight", self.name),
            self.weight.view_mut().into_dyn(),
        );
        if let Some(b) = &mut self.bias {
            f(&format!("{}.bias", self.name), b.view_mut().into_dyn());
        }
    }
}
