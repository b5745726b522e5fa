//! Layout helpers for convolution: patch extraction and its adjoint.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Number of columns of the patch matrix: `batch * out_h * out_w`.
    pub fn cols(&self) -> usize {
        let (oh, ow) = self.out_hw();
        self.batch * oh * ow
    }
}

/// `x[N, C, H, W]` into the patch matrix `[C*K*K, N*OH*OW]`.
pub fn im2col<S: Scalar>(x: &[S], g: ConvGeom) -> Vec<S> {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let ncols = g.batch * plane;
    let mut cols = vec![S::zero(); g.patch_len() * ncols];
    let k = g.kernel;
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &x[(n * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..][..g.width];
                        let dst = &mut dst_row[n * plane + oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into `[N, C, H, W]`.
pub fn col2im<S: Scalar>(cols: &[S], g: ConvGeom) -> Vec<S> {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let ncols = g.batch * plane;
    let mut x = vec![S::zero(); g.batch * g.channels * g.height * g.width];
    let k = g.kernel;
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let base = (n * g.channels + c) * g.height * g.width;
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut x[base + iy as usize * g.width..][..g.width];
                        let src = &src_row[n * plane + oy * ow..][..ow];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[N, C, P]` to `[C, N*P]`.
pub fn batch_to_channel_major<S: Scalar>(x: &[S], n: usize, c: usize, p: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * p + b * p..][..p].copy_from_slice(&x[(b * c + ch) * p..][..p]);
        }
    }
    out
}

/// `[C, N*P]` to `[N, C, P]`.
pub fn channel_to_batch_major<S: Scalar>(x: &[S], n: usize, c: usize, p: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * p..][..p].copy_from_slice(&x[ch * n * p + b * p..][..p]);
        }
    }
    out
}
