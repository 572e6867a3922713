//! Hot inner loops shared by the forward and backward convolution/linear
//! paths.
//!
//! Convolutions are lowered to patch matrices (im2col) so that every
//! multiply-accumulate happens inside [`dot`] or [`axpy`]. Both are written
//! with lane-independent accumulators so the optimizer can vectorize them
//! without reassociating floating-point math — results are bit-identical
//! across thread counts and optimization levels.

use super::Element;

const LANES: usize = 8;

/// Dot product with eight independent accumulator lanes.
#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; LANES];
    let chunks = a.len() / LANES;
    let (a_main, a_tail) = a.split_at(chunks * LANES);
    let (b_main, b_tail) = b.split_at(chunks * LANES);
    for (ca, cb) in a_main.chunks_exact(LANES).zip(b_main.chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    // Fixed pairwise reduction keeps the summation order independent of
    // input length parity.
    let mut tail = T::ZERO;
    for (x, y) in a_tail.iter().zip(b_tail) {
        tail += *x * *y;
    }
    let s0 = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    let s1 = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

/// `y[i] += alpha * x[i]` for all `i`.
#[inline]
pub fn axpy<T: Element>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// Sum of a slice using the same lane-stable scheme as [`dot`].
#[inline]
pub fn sum<T: Element>(a: &[T]) -> T {
    let mut acc = [T::ZERO; LANES];
    let chunks = a.len() / LANES;
    let (main, rest) = a.split_at(chunks * LANES);
    for ca in main.chunks_exact(LANES) {
        for l in 0..LANES {
            acc[l] += ca[l];
        }
    }
    let mut tail = T::ZERO;
    for x in rest {
        tail += *x;
    }
    let s0 = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    let s1 = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

/// `out[m][n] = dot(a[m], b[n])` where `a` is `[rows_a][k]` and `b` is
/// `[rows_b][k]` — a matrix product with the second operand transposed,
/// which keeps both inner operands contiguous.
pub fn matmul_nt<T: Element>(a: &[T], b: &[T], rows_a: usize, rows_b: usize, k: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), rows_a * k);
    debug_assert_eq!(b.len(), rows_b * k);
    debug_assert_eq!(out.len(), rows_a * rows_b);
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(rows_b)) {
        for (brow, o) in b.chunks_exact(k).zip(orow.iter_mut()) {
            *o = dot(arow, brow);
        }
    }
}

/// Geometry of one convolution, shared by im2col and col2im.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Patch length: `channels * kernel * kernel`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Number of output pixels.
    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Expands one `[c, h, w]` image into a `[out_pixels][patch_len]` patch
/// matrix. Patch entries are ordered `(channel, ky, kx)` to match the
/// row-major layout of an `[out_ch, in_ch, k, k]` weight tensor. Padded
/// positions read as zero.
pub fn im2col<T: Element>(input: &[T], g: ConvGeom, patches: &mut [T]) {
    debug_assert_eq!(input.len(), g.channels * g.h * g.w);
    debug_assert_eq!(patches.len(), g.out_pixels() * g.patch_len());
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let plane = g.h * g.w;
    patches.fill(T::ZERO);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut patches[(oy * ow + ox) * g.patch_len()..][..g.patch_len()];
            let iy0 = (oy * g.stride) as isize - g.padding as isize;
            let ix0 = (ox * g.stride) as isize - g.padding as isize;
            for c in 0..g.channels {
                let src_plane = &input[c * plane..][..plane];
                for ky in 0..k {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut row[(c * k + ky) * k..][..k];
                    let src_row = &src_plane[iy as usize * g.w..][..g.w];
                    for kx in 0..k {
                        let ix = ix0 + kx as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[kx] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a `[out_pixels][patch_len]` gradient matrix back onto a
/// `[c, h, w]` input gradient — the adjoint of [`im2col`].
pub fn col2im_add<T: Element>(patches: &[T], g: ConvGeom, grad_input: &mut [T]) {
    debug_assert_eq!(grad_input.len(), g.channels * g.h * g.w);
    debug_assert_eq!(patches.len(), g.out_pixels() * g.patch_len());
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let plane = g.h * g.w;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &patches[(oy * ow + ox) * g.patch_len()..][..g.patch_len()];
            let iy0 = (oy * g.stride) as isize - g.padding as isize;
            let ix0 = (ox * g.stride) as isize - g.padding as isize;
            for c in 0..g.channels {
                let dst_plane = &mut grad_input[c * plane..][..plane];
                for ky in 0..k {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &row[(c * k + ky) * k..][..k];
                    let dst_row = &mut dst_plane[iy as usize * g.w..][..g.w];
                    for kx in 0..k {
                        let ix = ix0 + kx as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[kx];
                        }
                    }
                }
            }
        }
    }
}
