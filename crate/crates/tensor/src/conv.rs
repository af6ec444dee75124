//! im2col-based convolution and pooling kernels on NCHW buffers.

use crate::Float;

/// Spatial geometry of a 2-D convolution or pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn valid(&self) -> bool {
        self.stride > 0
            && self.height + 2 * self.pad >= self.kh
            && self.width + 2 * self.pad >= self.kw
    }
}

/// Column budget per im2col chunk (elements).
const CHUNK_ELEMS: usize = 1 << 23;

pub(crate) fn chunk_len(geom: &Conv2dGeom, batch: usize) -> usize {
    let per = geom.patch() * geom.out_h() * geom.out_w();
    (CHUNK_ELEMS / per.max(1)).clamp(1, batch.max(1))
}

/// Writes `cols` with layout `(patch, count * out_h * out_w)` for samples
/// `first..first+count` of `x`.
pub(crate) fn im2col<T: Float>(x: &[T], geom: &Conv2dGeom, first: usize, count: usize, cols: &mut [T]) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let plane = oh * ow;
    let row_len = count * plane;
    let img = geom.channels * geom.height * geom.width;
    for c in 0..geom.channels {
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let r = (c * geom.kh + ky) * geom.kw + kx;
                let row = &mut cols[r * row_len..(r + 1) * row_len];
                for j in 0..count {
                    let src = &x[(first + j) * img + c * geom.height * geom.width..];
                    let dst = &mut row[j * plane..(j + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= geom.height as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * geom.width..(iy as usize + 1) * geom.width];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            *o = if ix < 0 || ix >= geom.width as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dx`.
pub(crate) fn col2im<T: Float>(cols: &[T], geom: &Conv2dGeom, first: usize, count: usize, dx: &mut [T]) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let plane = oh * ow;
    let row_len = count * plane;
    let img = geom.channels * geom.height * geom.width;
    for c in 0..geom.channels {
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let r = (c * geom.kh + ky) * geom.kw + kx;
                let row = &cols[r * row_len..(r + 1) * row_len];
                for j in 0..count {
                    let base = (first + j) * img + c * geom.height * geom.width;
                    let src = &row[j * plane..(j + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if iy < 0 || iy >= geom.height as isize {
                            continue;
                        }
                        let drow = base + iy as usize * geom.width;
                        for ox in 0..ow {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if ix >= 0 && ix < geom.width as isize {
                                dx[drow + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling over `batch` samples; returns outputs and flat argmax indices into `x`.
pub(crate) fn max_pool<T: Float>(x: &[T], geom: &Conv2dGeom, batch: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let mut out = Vec::with_capacity(batch * geom.channels * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for n in 0..batch {
        for c in 0..geom.channels {
            let base = (n * geom.channels + c) * geom.height * geom.width;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ky in 0..geom.kh {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if iy < 0 || iy >= geom.height as isize {
                            continue;
                        }
                        for kx in 0..geom.kw {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if ix < 0 || ix >= geom.width as isize {
                                continue;
                            }
                            let i = base + iy as usize * geom.width + ix as usize;
                            if best_i == usize::MAX || x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (out, arg)
}
