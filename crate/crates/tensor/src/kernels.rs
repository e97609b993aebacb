//! Raw array kernels shared by the forward and backward passes.

use crate::float::Float;

/// Geometry of a 2-D convolution over channel-last input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

/// Unfold `input` into a `[rows, k*k*cin]` matrix ordered `(ky, kx, ci)`.
pub(crate) fn im2col<T: Float>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plen = g.patch_len();
    let cin = g.in_channels;
    let mut cols = vec![T::zero(); g.rows() * plen];
    let mut row = 0;
    for n in 0..g.batch {
        let img = &input[n * g.height * g.width * cin..(n + 1) * g.height * g.width * cin];
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for ky in 0..g.kernel {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = (iy as usize * g.width + ix as usize) * cin;
                        let off = (ky * g.kernel + kx) * cin;
                        dst[off..off + cin].copy_from_slice(&img[src..src + cin]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the input grid.
pub(crate) fn col2im<T: Float>(dcols: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plen = g.patch_len();
    let cin = g.in_channels;
    let mut dx = vec![T::zero(); g.batch * g.height * g.width * cin];
    let mut row = 0;
    for n in 0..g.batch {
        let img = &mut dx[n * g.height * g.width * cin..(n + 1) * g.height * g.width * cin];
        for oy in 0..oh {
            for ox in 0..ow {
                let src = &dcols[row * plen..(row + 1) * plen];
                for ky in 0..g.kernel {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.width + ix as usize) * cin;
                        let off = (ky * g.kernel + kx) * cin;
                        for c in 0..cin {
                            img[dst + c] += src[off + c];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

/// Per-channel sums over every position of a channel-last buffer, accumulated in f64.
pub(crate) fn channel_sums<T: Float>(data: &[T], channels: usize) -> Vec<f64> {
    let mut sums = vec![0.0f64; channels];
    for chunk in data.chunks_exact(channels) {
        for (s, &v) in sums.iter_mut().zip(chunk) {
            *s += v.to_f64_lossy();
        }
    }
    sums
}

/// Numerically stable softmax of one row.
pub fn softmax_row<T: Float>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
