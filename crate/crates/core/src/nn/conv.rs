//! im2col convolution kernels on `(N, C, H, W)` tensors. Cross-correlation
//! semantics: the kernel is not flipped.

use crate::tensor::{gemm, Tensor4};

/// Shape bookkeeping for one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        (height, width): (usize, usize),
        filters: usize,
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let ph = height + 2 * pad;
        let pw = width + 2 * pad;
        if ph < kh || pw < kw || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            filters,
            kh,
            kw,
            stride,
            pad,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn out_area(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let area = g.out_area();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * area..(row + 1) * area];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.ow + ox] = if iy >= 0
                            && (iy as usize) < g.height
                            && ix >= 0
                            && (ix as usize) < g.width
                        {
                            x[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let area = g.out_area();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * area..(row + 1) * area];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        dx[(c * g.height + iy as usize) * g.width + ix as usize] += src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

/// `y[n] = W · im2col(x[n])` with `weight` laid out `F × (C·kh·kw)`.
pub(crate) fn forward(x: &Tensor4, weight: &[f64], g: &ConvGeom) -> Tensor4 {
    let n = x.shape()[0];
    let area = g.out_area();
    let mut out = vec![0.0; n * g.filters * area];
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { g.patch_len() * area }];
    for s in 0..n {
        let xs = &x.data()[s * g.in_len()..(s + 1) * g.in_len()];
        let patches: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        gemm(
            g.filters,
            g.patch_len(),
            area,
            1.0,
            weight,
            false,
            patches,
            false,
            0.0,
            &mut out[s * g.filters * area..(s + 1) * g.filters * area],
        );
    }
    Tensor4::from_raw([n, g.filters, g.oh, g.ow], out)
}

/// Gradients of [`forward`]: `(dx, dW)`. `dW` is only computed when asked.
pub(crate) fn backward(
    x: &Tensor4,
    weight: &[f64],
    g: &ConvGeom,
    grad_out: &Tensor4,
    want_input: bool,
    want_weight: bool,
) -> (Option<Tensor4>, Option<Vec<f64>>) {
    let n = x.shape()[0];
    let area = g.out_area();
    let mut dw = want_weight.then(|| vec![0.0; g.filters * g.patch_len()]);
    let mut dx = want_input.then(|| vec![0.0; n * g.in_len()]);
    let mut cols = vec![0.0; g.patch_len() * area];
    let mut dcols = vec![0.0; g.patch_len() * area];
    for s in 0..n {
        let xs = &x.data()[s * g.in_len()..(s + 1) * g.in_len()];
        let gy = &grad_out.data()[s * g.filters * area..(s + 1) * g.filters * area];
        if let Some(dw) = dw.as_mut() {
            let patches: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            gemm(g.filters, area, g.patch_len(), 1.0, gy, false, patches, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * g.in_len()..(s + 1) * g.in_len()];
            if g.is_pointwise() {
                gemm(g.patch_len(), g.filters, area, 1.0, weight, true, gy, false, 0.0, dxs);
            } else {
                gemm(g.patch_len(), g.filters, area, 1.0, weight, true, gy, false, 0.0, &mut dcols);
                col2im_add(&dcols, g, dxs);
            }
        }
    }
    (
        dx.map(|d| Tensor4::from_raw(x.shape(), d)),
        dw,
    )
}
