//! Slice-level compute kernels used by the tape operations.
//!
//! Matrices are row-major. The reduction over the inner dimension always runs
//! in ascending index order for every output element.

use crate::element::Element;
use crate::parallel;

const COL_BLOCK: usize = 256;
const ROW_CHUNK: usize = 4;

fn gemm_rows<T: Element>(a: &[T], b: &[T], c_rows: &mut [T], row0: usize, k: usize, n: usize) {
    let rows = c_rows.len() / n;
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_BLOCK).min(n);
        for r in 0..rows {
            let i = row0 + r;
            let a_row = &a[i * k..(i + 1) * k];
            let c_blk = &mut c_rows[r * n + j0..r * n + j1];
            for (kk, &aik) in a_row.iter().enumerate() {
                if aik == T::zero() {
                    continue;
                }
                let b_blk = &b[kk * n + j0..kk * n + j1];
                for (cv, &bv) in c_blk.iter_mut().zip(b_blk) {
                    *cv = *cv + aik * bv;
                }
            }
        }
        j0 = j1;
    }
}

/// `c[m,n] += a[m,k] · b[k,n]` on the calling thread.
pub fn gemm_seq<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (ci, chunk) in c.chunks_mut(ROW_CHUNK * n).enumerate() {
        gemm_rows(a, b, chunk, ci * ROW_CHUNK, k, n);
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`, row chunks spread over the worker pool.
#[cfg(feature = "parallel")]
pub fn gemm_par<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    use rayon::prelude::*;
    debug_assert_eq!(c.len(), m * n);
    c.par_chunks_mut(ROW_CHUNK * n)
        .enumerate()
        .for_each(|(ci, chunk)| gemm_rows(a, b, chunk, ci * ROW_CHUNK, k, n));
}

/// `c[m,n] += a[m,k] · b[k,n]` using the build's default execution mode.
pub fn gemm<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    if m * n == 0 {
        return;
    }
    parallel::for_each_chunk(c, ROW_CHUNK * n, |ci, chunk| gemm_rows(a, b, chunk, ci * ROW_CHUNK, k, n));
}

pub fn transpose<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm(a, &bt, c, m, k, n);
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let at = transpose(a, k, m);
    gemm(&at, b, c, m, k, n);
}

/// Geometry of a 2-D convolution on one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output extent along one axis, `None` when the window does not fit.
    pub fn out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = size + 2 * padding;
        if padded < kernel || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one `[C,H,W]` sample into a `[C·kh·kw, out_h·out_w]` matrix.
pub fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.col_cols();
    let mut out = vec![T::zero(); g.col_rows() * cols];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Folds a column matrix back, accumulating into a `[C,H,W]` sample.
pub fn col2im_add<T: Element>(cols_mat: &[T], g: &ConvGeom, x: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols_mat[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            let o = (c * g.height + iy as usize) * g.width + ix as usize;
                            x[o] = x[o] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution for a batch: `x` is `[N,C,H,W]`, `w` is `[K,C,kh,kw]`.
pub fn conv2d_forward<T: Element>(x: &[T], w: &[T], batch: usize, out_ch: usize, g: &ConvGeom) -> Vec<T> {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_ch * g.col_cols();
    let mut out = vec![T::zero(); batch * out_len];
    for n in 0..batch {
        let xs = &x[n * in_len..(n + 1) * in_len];
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        if g.is_pointwise() {
            gemm(w, xs, dst, out_ch, g.col_rows(), g.col_cols());
        } else {
            let cols = im2col(xs, g);
            gemm(w, &cols, dst, out_ch, g.col_rows(), g.col_cols());
        }
    }
    out
}

/// Gradients of a batched convolution. Returns `(dx, dw)`; either may be
/// skipped when not needed.
pub fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    dout: &[T],
    batch: usize,
    out_ch: usize,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_ch * g.col_cols();
    let mut dx = need_dx.then(|| vec![T::zero(); batch * in_len]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    for n in 0..batch {
        let d = &dout[n * out_len..(n + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            let xs = &x[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm_nt(d, xs, dw, out_ch, g.col_cols(), g.col_rows());
            } else {
                let cols = im2col(xs, g);
                gemm_nt(d, &cols, dw, out_ch, g.col_cols(), g.col_rows());
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm_tn(w, d, dxs, g.col_rows(), out_ch, g.col_cols());
            } else {
                let mut dcols = vec![T::zero(); g.col_rows() * g.col_cols()];
                gemm_tn(w, d, &mut dcols, g.col_rows(), out_ch, g.col_cols());
                col2im_add(&dcols, g, dxs);
            }
        }
    }
    (dx, dw)
}

/// Max pooling over `[N·C]` planes. Returns values and the flat in-plane
/// argmax of each output (first maximum wins).
pub fn max_pool2d<T: Element>(x: &[T], planes: usize, g: &ConvGeom) -> (Vec<T>, Vec<usize>) {
    let plane_in = g.height * g.width;
    let plane_out = g.out_h * g.out_w;
    let mut out = vec![T::zero(); planes * plane_out];
    let mut arg = vec![0usize; planes * plane_out];
    for p in 0..planes {
        let src = &x[p * plane_in..(p + 1) * plane_in];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ki in 0..g.kh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kj in 0..g.kw {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let i = iy as usize * g.width + ix as usize;
                        if src[i] > best || best_i == usize::MAX {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                out[p * plane_out + oy * g.out_w + ox] = best;
                arg[p * plane_out + oy * g.out_w + ox] = best_i;
            }
        }
    }
    (out, arg)
}
