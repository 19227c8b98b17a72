//! Hot numeric kernels: blocked GEMM variants, im2col/col2im, and the
//! deterministic batch-parallel helpers the layer ops are built from.
//!
//! Everything here is bitwise deterministic: blocking factors are fixed and
//! reductions run in a fixed order regardless of thread count (parallel work
//! is split into fixed-size chunks whose partial results are folded in index
//! order).

use alloc::vec;
use alloc::vec::Vec;

/// Samples per parallel work unit. Fixed so that chunk boundaries (and
/// therefore reduction order) do not depend on the thread count.
pub const BATCH_CHUNK: usize = 8;

/// Register-tile rows.
const MR: usize = 4;
/// Register-tile columns (f64 lanes; two AVX-512 vectors when available).
const NR: usize = 16;

/// C[m x n] += A[m x k] * B[k x n], all row-major.
///
/// MR x NR register tiles accumulate over the full k extent before spilling,
/// so each B vector load feeds MR fused multiply-adds.
pub fn gemm_accum(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let brow = &b[p * n + j..p * n + j + NR];
                for (r, accr) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for (l, s) in accr.iter_mut().enumerate() {
                        *s += av * brow[l];
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                for (cv, &s) in crow.iter_mut().zip(accr.iter()) {
                    *cv += s;
                }
            }
            j += NR;
        }
        if j < n {
            gemm_edge(c, a, b, i, i + MR, j, n, k, n);
        }
        i += MR;
    }
    if i < m {
        gemm_edge(c, a, b, i, m, 0, n, k, n);
    }
}

/// Scalar fallback for tile edges of [`gemm_accum`].
fn gemm_edge(
    c: &mut [f64],
    a: &[f64],
    b: &[f64],
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
    k: usize,
    n: usize,
) {
    for i in i0..i1 {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n + j0..p * n + j1];
            let crow = &mut c[i * n + j0..i * n + j1];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m x n] += A[m x k] * B[n x k]^T (B stored row-major, n rows of length k).
///
/// Vectorizes along k with per-tile lane accumulators, folded to scalars in a
/// fixed order at the end.
pub fn gemm_abt_accum(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    const LANES: usize = 8;
    const TI: usize = 2;
    const TJ: usize = 2;
    let kv = k - k % LANES;
    let mut i = 0;
    while i < m {
        let ti = TI.min(m - i);
        let mut j = 0;
        while j < n {
            let tj = TJ.min(n - j);
            let mut acc = [[[0.0f64; LANES]; TJ]; TI];
            let mut p = 0;
            while p < kv {
                for r in 0..ti {
                    let arow = &a[(i + r) * k + p..(i + r) * k + p + LANES];
                    for s in 0..tj {
                        let brow = &b[(j + s) * k + p..(j + s) * k + p + LANES];
                        let accl = &mut acc[r][s];
                        for l in 0..LANES {
                            accl[l] += arow[l] * brow[l];
                        }
                    }
                }
                p += LANES;
            }
            for r in 0..ti {
                for s in 0..tj {
                    let mut dot: f64 = acc[r][s].iter().sum();
                    for pp in kv..k {
                        dot += a[(i + r) * k + pp] * b[(j + s) * k + pp];
                    }
                    c[(i + r) * n + j + s] += dot;
                }
            }
            j += tj;
        }
        i += ti;
    }
}

/// C[k x n] += A[m x k]^T * B[m x n], all row-major.
///
/// Same axpy structure as [`gemm_accum`] with the roles of the A loop nests
/// swapped; used for conv input gradients without materializing transposes.
pub fn gemm_atb_accum(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let mut j0 = 0;
    while j0 < k {
        let j1 = (j0 + MR).min(k);
        let mut l0 = 0;
        while l0 < n {
            let l1 = (l0 + NR).min(n);
            if j1 - j0 == MR && l1 - l0 == NR {
                let mut acc = [[0.0f64; NR]; MR];
                for p in 0..m {
                    let brow = &b[p * n + l0..p * n + l0 + NR];
                    let arow = &a[p * k + j0..p * k + j0 + MR];
                    for (r, accr) in acc.iter_mut().enumerate() {
                        let av = arow[r];
                        for (l, s) in accr.iter_mut().enumerate() {
                            *s += av * brow[l];
                        }
                    }
                }
                for (r, accr) in acc.iter().enumerate() {
                    let crow = &mut c[(j0 + r) * n + l0..(j0 + r) * n + l0 + NR];
                    for (cv, &s) in crow.iter_mut().zip(accr.iter()) {
                        *cv += s;
                    }
                }
            } else {
                for p in 0..m {
                    for j in j0..j1 {
                        let av = a[p * k + j];
                        let brow = &b[p * n + l0..p * n + l1];
                        let crow = &mut c[j * n + l0..j * n + l1];
                        for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                            *cv += av * bv;
                        }
                    }
                }
            }
            l0 = l1;
        }
        j0 = j1;
    }
}

/// Row-major transpose: `src` is r x c, result is c x r.
pub fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

/// Output extent of a convolution axis; `None` when nonpositive.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry of one conv2d call, shared by forward and both backwards.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub h: usize,
    pub w: usize,
    pub hout: usize,
    pub wout: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.hout * self.wout
    }
}

/// Unfold one sample `x[cin x h x w]` into `col[patch_len x out_pixels]`,
/// zero-filling out-of-bounds (padding) taps.
pub fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    debug_assert_eq!(x.len(), g.cin * g.h * g.w);
    debug_assert_eq!(col.len(), g.patch_len() * g.out_pixels());
    let pixels = g.out_pixels();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..g.kh {
            for kw in 0..g.kw {
                let row = ((ci * g.kh + kh) * g.kw + kw) * pixels;
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + kh) as isize - g.padding as isize;
                    let dst = &mut col[row + oy * g.wout..row + (oy + 1) * g.wout];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // ix = ox + kw - padding: one contiguous copy with
                        // zero-filled ends where ix falls outside the row.
                        let shift = kw as isize - g.padding as isize;
                        let lo = (-shift).clamp(0, g.wout as isize) as usize;
                        let hi = (g.w as isize - shift).clamp(0, g.wout as isize) as usize;
                        dst[..lo].iter_mut().for_each(|v| *v = 0.0);
                        dst[hi..].iter_mut().for_each(|v| *v = 0.0);
                        if lo < hi {
                            let s0 = (lo as isize + shift) as usize;
                            dst[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kw) as isize - g.padding as isize;
                            *d = if ix < 0 || ix >= g.w as isize {
                                0.0
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

/// Fold `col[patch_len x out_pixels]` back onto an input-shaped buffer,
/// accumulating overlapping taps. Adjoint of [`im2col`].
pub fn col2im_accum(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    debug_assert_eq!(x.len(), g.cin * g.h * g.w);
    debug_assert_eq!(col.len(), g.patch_len() * g.out_pixels());
    let pixels = g.out_pixels();
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..g.kh {
            for kw in 0..g.kw {
                let row = ((ci * g.kh + kh) * g.kw + kw) * pixels;
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + kh) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * g.wout..row + (oy + 1) * g.wout];
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kw) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Map fixed-size sample chunks to output chunks, in parallel when the
/// `parallel` feature is on. Outputs are disjoint, so the result is
/// identical either way.
pub fn for_each_chunk_pair(
    input: &[f64],
    in_stride: usize,
    output: &mut [f64],
    out_stride: usize,
    f: impl Fn(usize, &[f64], &mut [f64]) + Sync + Send,
) {
    let in_chunk = in_stride * BATCH_CHUNK;
    let out_chunk = out_stride * BATCH_CHUNK;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        input
            .par_chunks(in_chunk.max(1))
            .zip(output.par_chunks_mut(out_chunk.max(1)))
            .enumerate()
            .for_each(|(ci, (xin, xout))| f(ci * BATCH_CHUNK, xin, xout));
    }
    #[cfg(not(feature = "parallel"))]
    {
        input
            .chunks(in_chunk.max(1))
            .zip(output.chunks_mut(out_chunk.max(1)))
            .enumerate()
            .for_each(|(ci, (xin, xout))| f(ci * BATCH_CHUNK, xin, xout));
    }
}

/// Compute one partial result per fixed-size chunk of `0..count`, then
/// fold the partials in chunk order. The fold order is fixed, so sums
/// are bitwise reproducible under any thread count.
pub fn map_reduce_chunks<T: Send>(
    count: usize,
    map: impl Fn(core::ops::Range<usize>) -> T + Sync + Send,
    mut fold: impl FnMut(&mut T, T),
) -> Option<T> {
    let ranges: Vec<core::ops::Range<usize>> = (0..count)
        .step_by(BATCH_CHUNK.max(1))
        .map(|s| s..(s + BATCH_CHUNK).min(count))
        .collect();
    #[cfg(feature = "parallel")]
    let partials: Vec<T> = {
        use rayon::prelude::*;
        ranges.into_par_iter().map(map).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<T> = ranges.into_iter().map(map).collect();

    let mut it = partials.into_iter();
    let mut acc = it.next()?;
    for p in it {
        fold(&mut acc, p);
    }
    Some(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn fill(len: usize, mul: usize, add: usize, modulo: usize, sub: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * mul + add) % modulo) as f64 - sub).collect()
    }

    #[test]
    fn gemm_matches_naive_on_integers() {
        // Sizes straddle the tile edges on purpose.
        for (m, k, n) in [(3, 5, 4), (4, 8, 16), (9, 17, 33), (1, 1, 1), (8, 3, 20)] {
            let a = fill(m * k, 7, 3, 11, 5.0);
            let b = fill(k * n, 5, 1, 13, 6.0);
            let mut c = vec![0.0; m * n];
            gemm_accum(&mut c, &a, &b, m, k, n);
            assert_eq!(c, naive_gemm(&a, &b, m, k, n), "gemm {m}x{k}x{n}");
        }
    }

    #[test]
    fn gemm_abt_matches_naive_on_integers() {
        for (m, n, k) in [(3, 4, 5), (4, 4, 16), (5, 9, 23), (1, 1, 1), (2, 7, 8)] {
            let a = fill(m * k, 7, 3, 11, 5.0);
            let bt = fill(n * k, 5, 1, 13, 6.0);
            // Reference: transpose bt into b[k x n], then plain gemm.
            let b = transpose(&bt, n, k);
            let mut c = vec![0.0; m * n];
            gemm_abt_accum(&mut c, &a, &bt, m, n, k);
            assert_eq!(c, naive_gemm(&a, &b, m, k, n), "abt {m}x{n}x{k}");
        }
    }

    #[test]
    fn gemm_atb_matches_naive_on_integers() {
        for (m, k, n) in [(5, 3, 4), (8, 4, 16), (23, 5, 9), (1, 1, 1), (6, 2, 7)] {
            let at = fill(m * k, 7, 3, 11, 5.0);
            let b = fill(m * n, 5, 1, 13, 6.0);
            let a = transpose(&at, m, k);
            let mut c = vec![0.0; k * n];
            gemm_atb_accum(&mut c, &at, &b, m, k, n);
            assert_eq!(c, naive_gemm(&a, &b, k, m, n), "atb {m}x{k}x{n}");
        }
    }

    #[test]
    fn transpose_round_trip() {
        let src: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let t = transpose(&src, 3, 4);
        let back = transpose(&t, 4, 3);
        assert_eq!(src, back);
        // t[j][i] == src[i][j]
        assert_eq!(t[1 * 3 + 0], src[0 * 4 + 1]);
    }

    #[test]
    fn conv_extent_arithmetic() {
        assert_eq!(conv_out_extent(32, 3, 1, 1), Some(32));
        assert_eq!(conv_out_extent(32, 3, 2, 1), Some(16));
        assert_eq!(conv_out_extent(2, 5, 1, 0), None);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <col(x), y> == <x, col2im(y)> on integer fills.
        let g = ConvGeom {
            cin: 2,
            cout: 1,
            kh: 3,
            kw: 3,
            h: 5,
            w: 4,
            hout: conv_out_extent(5, 3, 2, 1).unwrap(),
            wout: conv_out_extent(4, 3, 2, 1).unwrap(),
            stride: 2,
            padding: 1,
        };
        let x = fill(g.cin * g.h * g.w, 13, 5, 7, 0.0);
        let y = fill(g.patch_len() * g.out_pixels(), 11, 2, 5, 0.0);
        let mut col = vec![0.0; g.patch_len() * g.out_pixels()];
        im2col(&x, &g, &mut col);
        let mut xt = vec![0.0; x.len()];
        col2im_accum(&y, &g, &mut xt);
        let lhs: f64 = col.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(xt.iter()).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn map_reduce_is_order_stable() {
        let sum = map_reduce_chunks(100, |r| r.map(|i| i as u64).sum::<u64>(), |a, b| *a += b).unwrap();
        assert_eq!(sum, 4950);
    }
}
