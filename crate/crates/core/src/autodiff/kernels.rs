//! im2col / col2im lowering shared by convolution and transposed convolution.

use super::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1x1, stride-1, unpadded window makes im2col the identity.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Valid output index range along one axis for kernel offset `k`:
/// outputs `o` with `0 <= o*stride + k - pad < len`.
#[inline]
fn valid_range(k: usize, stride: usize, pad: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// `cols[(c,ki,kj), (oi,oj)] = x[c, oi*s+ki-p, oj*s+kj-p]` (zero outside).
pub(crate) fn im2col<T: Real>(x: &[T], w: &Window, cols: &mut [T]) {
    let (k, s, p) = (w.kernel, w.stride, w.pad);
    let ncols = w.cols();
    debug_assert_eq!(cols.len(), w.rows() * ncols);
    for c in 0..w.channels {
        let plane = &x[c * w.height * w.width..(c + 1) * w.height * w.width];
        for ki in 0..k {
            let (oi_lo, oi_hi) = valid_range(ki, s, p, w.height, w.out_h);
            for kj in 0..k {
                let (oj_lo, oj_hi) = valid_range(kj, s, p, w.width, w.out_w);
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                dst.fill(T::zero());
                for oi in oi_lo..oi_hi {
                    let ii = oi * s + ki - p;
                    let src_row = &plane[ii * w.width..(ii + 1) * w.width];
                    let dst_row = &mut dst[oi * w.out_w..(oi + 1) * w.out_w];
                    if s == 1 {
                        let j0 = oj_lo + kj - p;
                        let len = oj_hi - oj_lo;
                        dst_row[oj_lo..oj_hi].copy_from_slice(&src_row[j0..j0 + len]);
                    } else {
                        for oj in oj_lo..oj_hi {
                            dst_row[oj] = src_row[oj * s + kj - p];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto `x`.
pub(crate) fn col2im<T: Real>(cols: &[T], w: &Window, x: &mut [T]) {
    let (k, s, p) = (w.kernel, w.stride, w.pad);
    let ncols = w.cols();
    for c in 0..w.channels {
        let plane = &mut x[c * w.height * w.width..(c + 1) * w.height * w.width];
        for ki in 0..k {
            let (oi_lo, oi_hi) = valid_range(ki, s, p, w.height, w.out_h);
            for kj in 0..k {
                let (oj_lo, oj_hi) = valid_range(kj, s, p, w.width, w.out_w);
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oi in oi_lo..oi_hi {
                    let ii = oi * s + ki - p;
                    let src_row = &src[oi * w.out_w..(oi + 1) * w.out_w];
                    let dst_row = &mut plane[ii * w.width..(ii + 1) * w.width];
                    for oj in oj_lo..oj_hi {
                        dst_row[oj * s + kj - p] += src_row[oj];
                    }
                }
            }
        }
    }
}
