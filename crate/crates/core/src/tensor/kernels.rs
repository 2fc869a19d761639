//! Raw slice kernels shared by the graph ops. No shape checking happens here;
//! callers validate extents first.

/// `c = op(a) · op(b) + beta · c`, with `op(a)` of size `m×k` and `op(b)` of
/// size `k×n`, all row-major. A transposed operand is stored in its
/// untransposed layout (`k×m` for `a`, `n×k` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: extents were checked above; strides describe dense row-major
    // buffers of exactly those lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }

    /// 1×1, stride 1, no padding: the input already is its own column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output positions `o` whose source index `o·stride + k_off − pad` lies in
/// `0..n_in`, as a half-open range.
fn valid_outputs(
    k_off: usize,
    pad: usize,
    stride: usize,
    n_in: usize,
    n_out: usize,
) -> (usize, usize) {
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    let hi = if n_in + pad > k_off {
        ((n_in + pad - k_off - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds `x[C,H,W]` into `cols[C·k·k, H_out·W_out]` (zero padding).
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let out_len = g.out_len();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            let (r_lo, r_hi) = valid_outputs(ki, g.pad, g.stride, g.h, g.h_out);
            for kj in 0..g.k {
                let (c_lo, c_hi) = valid_outputs(kj, g.pad, g.stride, g.w, g.w_out);
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * out_len..(row + 1) * out_len];
                for oi in 0..g.h_out {
                    let dst_row = &mut dst[oi * g.w_out..(oi + 1) * g.w_out];
                    if oi < r_lo || oi >= r_hi || c_lo == c_hi {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let ii = oi * g.stride + ki - g.pad;
                    let src_row = &plane[ii * g.w..(ii + 1) * g.w];
                    dst_row[..c_lo].fill(0.0);
                    dst_row[c_hi..].fill(0.0);
                    let j0 = c_lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        dst_row[c_lo..c_hi].copy_from_slice(&src_row[j0..j0 + (c_hi - c_lo)]);
                    } else {
                        for (n, d) in dst_row[c_lo..c_hi].iter_mut().enumerate() {
                            *d = src_row[j0 + n * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx[C,H,W]`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let out_len = g.out_len();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            let (r_lo, r_hi) = valid_outputs(ki, g.pad, g.stride, g.h, g.h_out);
            for kj in 0..g.k {
                let (c_lo, c_hi) = valid_outputs(kj, g.pad, g.stride, g.w, g.w_out);
                if c_lo == c_hi {
                    continue;
                }
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * out_len..(row + 1) * out_len];
                for oi in r_lo..r_hi {
                    let ii = oi * g.stride + ki - g.pad;
                    let dst_row = &mut plane[ii * g.w..(ii + 1) * g.w];
                    let src_row = &src[oi * g.w_out + c_lo..oi * g.w_out + c_hi];
                    let j0 = c_lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        for (d, s) in dst_row[j0..j0 + src_row.len()].iter_mut().zip(src_row) {
                            *d += s;
                        }
                    } else {
                        for (n, s) in src_row.iter().enumerate() {
                            dst_row[j0 + n * g.stride] += s;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Per-channel 3×3 correlation with a fixed kernel and edge-replicated borders.
pub(crate) fn filter3x3(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kernel: &[f64; 9],
    out: &mut [f64],
) {
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                // Positive and negative taps accumulate separately so a
                // zero-sum kernel maps a constant patch to exactly 0.
                let (mut pos, mut neg) = (0.0, 0.0);
                for di in 0..3 {
                    let ii = clamp_index(i as isize + di as isize - 1, h);
                    for dj in 0..3 {
                        let jj = clamp_index(j as isize + dj as isize - 1, w);
                        let t = kernel[di * 3 + dj] * plane[ii * w + jj];
                        if kernel[di * 3 + dj] >= 0.0 {
                            pos += t;
                        } else {
                            neg += t;
                        }
                    }
                }
                dst[i * w + j] = pos + neg;
            }
        }
    }
}

pub(crate) fn filter3x3_backward(
    grad: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kernel: &[f64; 9],
    dx: &mut [f64],
) {
    for ch in 0..c {
        let g = &grad[ch * h * w..(ch + 1) * h * w];
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let gv = g[i * w + j];
                for di in 0..3 {
                    let ii = clamp_index(i as isize + di as isize - 1, h);
                    for dj in 0..3 {
                        let jj = clamp_index(j as isize + dj as isize - 1, w);
                        dst[ii * w + jj] += kernel[di * 3 + dj] * gv;
                    }
                }
            }
        }
    }
}

pub(crate) fn pooled_extent(n: usize, window: usize) -> usize {
    n.div_ceil(window)
}

/// Window-mean pooling. Extents that do not divide evenly are padded by
/// replicating the last row/column.
pub(crate) fn avg_pool(x: &[f64], c: usize, h: usize, w: usize, window: usize, out: &mut [f64]) {
    let (ho, wo) = (pooled_extent(h, window), pooled_extent(w, window));
    let norm = 1.0 / (window * window) as f64;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oi in 0..ho {
            for oj in 0..wo {
                let mut acc = 0.0;
                for di in 0..window {
                    let ii = (oi * window + di).min(h - 1);
                    for dj in 0..window {
                        let jj = (oj * window + dj).min(w - 1);
                        acc += plane[ii * w + jj];
                    }
                }
                out[(ch * ho + oi) * wo + oj] = acc * norm;
            }
        }
    }
}

pub(crate) fn avg_pool_backward(
    grad: &[f64],
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    dx: &mut [f64],
) {
    let (ho, wo) = (pooled_extent(h, window), pooled_extent(w, window));
    let norm = 1.0 / (window * window) as f64;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oi in 0..ho {
            for oj in 0..wo {
                let gv = grad[(ch * ho + oi) * wo + oj] * norm;
                for di in 0..window {
                    let ii = (oi * window + di).min(h - 1);
                    for dj in 0..window {
                        let jj = (oj * window + dj).min(w - 1);
                        plane[ii * w + jj] += gv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_all_transpose_combinations() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive_matmul(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, 0.0, &mut c);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        for g in [
            ConvGeom::new(2, 5, 4, 3, 2, 1).unwrap(),
            ConvGeom::new(2, 6, 7, 3, 1, 1).unwrap(),
        ] {
            let x: Vec<f64> = (0..2 * g.h * g.w).map(|i| (i as f64).sin()).collect();
            let y: Vec<f64> = (0..g.patch_len() * g.out_len())
                .map(|i| (i as f64 * 0.3).cos())
                .collect();
            let mut cols = vec![0.0; y.len()];
            im2col(&x, &g, &mut cols);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let mut dx = vec![0.0; x.len()];
            col2im(&y, &g, &mut dx);
            let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    fn naive_im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut cols = vec![0.0; g.patch_len() * g.out_len()];
        for c in 0..g.c_in {
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let row = (c * g.k + ki) * g.k + kj;
                    for oi in 0..g.h_out {
                        for oj in 0..g.w_out {
                            let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if ii >= 0 && jj >= 0 && (ii as usize) < g.h && (jj as usize) < g.w {
                                cols[row * g.out_len() + oi * g.w_out + oj] =
                                    x[(c * g.h + ii as usize) * g.w + jj as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    #[test]
    fn im2col_matches_naive_unfold() {
        for (h, w, k, stride, pad) in [
            (5, 4, 3, 2, 1),
            (8, 8, 3, 1, 1),
            (7, 9, 5, 2, 2),
            (4, 4, 1, 1, 0),
            (6, 5, 3, 3, 1),
            (3, 3, 3, 1, 0),
        ] {
            let g = ConvGeom::new(2, h, w, k, stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
            let mut cols = vec![f64::NAN; g.patch_len() * g.out_len()];
            im2col(&x, &g, &mut cols);
            assert_eq!(cols, naive_im2col(&x, &g), "{h}x{w} k{k} s{stride} p{pad}");
        }
    }

    #[test]
    fn pool_pads_by_edge_replication() {
        // 3x3 plane pooled by 2: the last row/column repeat.
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let mut out = [0.0; 4];
        avg_pool(&x, 1, 3, 3, 2, &mut out);
        assert_eq!(out, [3.0, 4.5, 7.5, 9.0]);
    }
}
