//! Raw numeric kernels over flat row-major buffers.
//!
//! These do no shape validation beyond debug assertions; the tape checks shapes
//! before calling in.

/// Strided view of a matrix operand: element `(i, j)` lives at
/// `offset + i * row_stride + j * col_stride`.
#[derive(Clone, Copy, Debug)]
pub struct MatView {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatView {
    pub fn row_major(ld: usize) -> Self {
        MatView {
            offset: 0,
            row_stride: ld,
            col_stride: 1,
        }
    }

    pub fn transposed(ld: usize) -> Self {
        MatView {
            offset: 0,
            row_stride: 1,
            col_stride: ld,
        }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `C = alpha · A · B + beta · C` with `A: m × k`, `B: k × n`, `C: m × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: MatView,
    b: &[f64],
    bv: MatView,
    beta: f64,
    c: &mut [f64],
    cv: MatView,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(av.last_index(m, k) < a.len().max(1) || k == 0, "gemm: A view out of bounds");
    assert!(bv.last_index(k, n) < b.len().max(1) || k == 0, "gemm: B view out of bounds");
    assert!(cv.last_index(m, n) < c.len(), "gemm: C view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.offset + i * cv.row_stride + j * cv.col_stride;
                c[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: every index reachable through the three views was bounds-checked
    // above, and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

/// Dense `C = op(A) · op(B)` (+ `C` when `accumulate`), row-major storage.
/// `op(A)` is `m × k`; with `trans_a` the buffer holds `k × m`.
#[allow(clippy::too_many_arguments)]
pub fn matmul(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let av = if trans_a {
        MatView::transposed(m)
    } else {
        MatView::row_major(k)
    };
    let bv = if trans_b {
        MatView::transposed(k)
    } else {
        MatView::row_major(n)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    gemm(m, k, n, 1.0, a, av, b, bv, beta, c, MatView::row_major(n));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

/// Valid output columns `[lo, hi)` for kernel column `kx`, with the input
/// column of `lo`.
fn valid_cols(g: &ConvGeometry, ow: usize, kx: usize) -> (usize, usize, usize) {
    let pad = g.padding;
    // smallest ox with ox·stride + kx ≥ pad
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(g.stride) };
    // largest ox with ox·stride + kx − pad < w
    let limit = (g.w + pad).saturating_sub(kx);
    let hi = if limit == 0 { 0 } else { ((limit - 1) / g.stride + 1).min(ow) };
    let lo = lo.min(hi);
    (lo, hi, (lo * g.stride + kx).saturating_sub(pad))
}

/// Unfolds `x: [c_in, h, w]` into `col: [c_in·kh·kw, oh·ow]`, writing every entry.
pub fn im2col(x: &[f64], g: &ConvGeometry, col: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    debug_assert_eq!(col.len(), g.patch_len() * p);
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let (lo, hi, ix0) = valid_cols(g, ow, kx);
                for oy in 0..oh {
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.h {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    if hi == lo {
                        continue;
                    }
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (k, o) in out[lo..hi].iter_mut().enumerate() {
                            *o = src[ix0 + k * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back onto `dx`, accumulating.
pub fn col2im_add(col: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                let (lo, hi, ix0) = valid_cols(g, ow, kx);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * ow + lo..oy * ow + hi];
                    for (k, v) in s.iter().enumerate() {
                        dst[ix0 + k * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Single-image convolution forward. Returns the im2col buffer for reuse in
/// the backward pass.
pub fn conv2d_forward(x: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeometry, out: &mut [f64]) -> Vec<f64> {
    let p = g.out_h() * g.out_w();
    let kl = g.patch_len();
    let mut col = vec![0.0; kl * p];
    im2col(x, g, &mut col);
    for (co, row) in out.chunks_exact_mut(p).enumerate() {
        row.fill(bias[co]);
    }
    matmul(g.c_out, kl, p, weight, false, &col, false, out, true);
    col
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    dy: &[f64],
    col: &[f64],
    weight: &[f64],
    g: &ConvGeometry,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let p = g.out_h() * g.out_w();
    let kl = g.patch_len();
    if let Some(dw) = dw {
        matmul(g.c_out, p, kl, dy, false, col, true, dw, true);
    }
    if let Some(db) = db {
        for (co, row) in dy.chunks_exact(p).enumerate() {
            db[co] += row.iter().sum::<f64>();
        }
    }
    if let Some(dx) = dx {
        let mut dcol = vec![0.0; kl * p];
        matmul(kl, g.c_out, p, weight, true, dy, false, &mut dcol, false);
        col2im_add(&dcol, g, dx);
    }
}

/// Whether [`conv2d_forward_kn2row`] handles this geometry. It multiplies the
/// weights against the raw input and shifts the products into place, which
/// avoids the `kh·kw`-fold input expansion when the output has fewer channels
/// than the input.
pub fn use_kn2row(g: &ConvGeometry) -> bool {
    g.stride == 1 && g.c_out < g.c_in
}

/// Weights rearranged to `[c_out·kh·kw, c_in]`.
pub fn kn2row_weights(weight: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let kk = g.kh * g.kw;
    let mut wt = vec![0.0; g.c_out * kk * g.c_in];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for k in 0..kk {
                wt[(co * kk + k) * g.c_in + ci] = weight[(co * g.c_in + ci) * kk + k];
            }
        }
    }
    wt
}

/// Calls `f(z offset, output offset, len)` for every contiguous run linking
/// `z: [c_out·kh·kw, h·w]` to the output.
fn kn2row_pairs(g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for co in 0..g.c_out {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi, ix0) = valid_cols(g, ow, kx);
                if hi == lo {
                    continue;
                }
                let zrow = (co * g.kh + ky) * g.kw + kx;
                for oy in 0..oh {
                    let iy = (oy + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    f(zrow * g.h * g.w + iy as usize * g.w + ix0, (co * oh + oy) * ow + lo, hi - lo);
                }
            }
        }
    }
}

/// Single-image stride-1 convolution through `z = wt · x`; `wt` comes from
/// [`kn2row_weights`].
pub fn conv2d_forward_kn2row(x: &[f64], wt: &[f64], bias: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    debug_assert_eq!(g.stride, 1);
    let hw = g.h * g.w;
    let ck = g.c_out * g.kh * g.kw;
    let mut z = vec![0.0; ck * hw];
    matmul(ck, g.c_in, hw, wt, false, x, false, &mut z, false);
    let p = g.out_h() * g.out_w();
    for (co, row) in out.chunks_exact_mut(p).enumerate() {
        row.fill(bias[co]);
    }
    kn2row_pairs(g, |zi, oi, len| {
        out[oi..oi + len].iter_mut().zip(&z[zi..zi + len]).for_each(|(o, v)| *o += v);
    });
}

/// Backward of [`conv2d_forward_kn2row`]. `dwt` accumulates in the
/// `[c_out·kh·kw, c_in]` layout.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_kn2row(
    dy: &[f64],
    x: &[f64],
    wt: &[f64],
    g: &ConvGeometry,
    dx: Option<&mut [f64]>,
    dwt: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let hw = g.h * g.w;
    let ck = g.c_out * g.kh * g.kw;
    if let Some(db) = db {
        let p = g.out_h() * g.out_w();
        for (co, row) in dy.chunks_exact(p).enumerate() {
            db[co] += row.iter().sum::<f64>();
        }
    }
    if dx.is_none() && dwt.is_none() {
        return;
    }
    let mut dz = vec![0.0; ck * hw];
    kn2row_pairs(g, |zi, oi, len| {
        dz[zi..zi + len].copy_from_slice(&dy[oi..oi + len]);
    });
    if let Some(dwt) = dwt {
        matmul(ck, hw, g.c_in, &dz, false, x, true, dwt, true);
    }
    if let Some(dx) = dx {
        matmul(g.c_in, ck, hw, wt, true, &dz, false, dx, true);
    }
}

/// Inverse of [`kn2row_weights`], accumulating into `dw: [c_out, c_in, kh, kw]`.
pub fn kn2row_weights_add_back(dwt: &[f64], g: &ConvGeometry, dw: &mut [f64]) {
    let kk = g.kh * g.kw;
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for k in 0..kk {
                dw[(co * g.c_in + ci) * kk + k] += dwt[(co * kk + k) * g.c_in + ci];
            }
        }
    }
}

/// Normalization statistics for one (batch, group) block.
#[derive(Clone, Copy, Debug)]
pub struct NormStats {
    pub mean: f64,
    pub inv_std: f64,
}

/// Two-pass mean/variance normalization of `x` into `xhat`.
pub fn normalize_block(x: &[f64], eps: f64, xhat: &mut [f64]) -> NormStats {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    for (o, v) in xhat.iter_mut().zip(x) {
        *o = (v - mean) * inv_std;
    }
    NormStats { mean, inv_std }
}

/// Backward through `xhat = (x - mean) * inv_std` given `dxhat`.
pub fn normalize_block_backward(xhat: &[f64], dxhat: &[f64], inv_std: f64, dx: &mut [f64]) {
    let n = xhat.len() as f64;
    let sum_d: f64 = dxhat.iter().sum();
    let sum_dx: f64 = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum();
    for ((o, d), x) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *o += inv_std * (d - sum_d / n - x * sum_dx / n);
    }
}

/// Row-wise softmax of `tau · x` with max subtraction.
pub fn softmax_rows(x: &[f64], cols: usize, tau: f64, out: &mut [f64]) {
    for (row, orow) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * tau));
        let mut s = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v * tau - mx).exp();
            s += *o;
        }
        let inv = 1.0 / s;
        orow.iter_mut().for_each(|o| *o *= inv);
    }
}

pub fn softmax_rows_backward(y: &[f64], dy: &[f64], cols: usize, tau: f64, dx: &mut [f64]) {
    for ((yr, dyr), dxr) in y.chunks_exact(cols).zip(dy.chunks_exact(cols)).zip(dx.chunks_exact_mut(cols)) {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &dv) in dxr.iter_mut().zip(yr).zip(dyr) {
            *o += tau * yv * (dv - dot);
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse sigmoid with the argument clamped into `[eps, 1 - eps]`.
#[inline]
pub fn logit(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}

/// Four bilinear taps `(flat pixel index, weight)` for a point in pixel index
/// space. Coordinates outside the map clamp to the border.
pub fn bilinear_taps(h: usize, w: usize, x: f64, y: f64) -> [(usize, f64); 4] {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

/// Fused multi-head scaled dot-product attention.
///
/// `q: nq × d`, `k, v: nk × d`. Writes `out: nq × d` and the per-head
/// attention probabilities `probs: heads × nq × nk`.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
    out: &mut [f64],
    probs: &mut [f64],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = vec![0.0; nq * nk];
    for h in 0..heads {
        let off = h * dh;
        gemm(
            nq,
            dh,
            nk,
            scale,
            q,
            MatView::row_major(d).at(off),
            k,
            MatView::transposed(d).at(off),
            0.0,
            &mut scores,
            MatView::row_major(nk),
        );
        let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        softmax_rows(&scores, nk, 1.0, p);
        gemm(
            nq,
            nk,
            dh,
            1.0,
            p,
            MatView::row_major(nk),
            v,
            MatView::row_major(d).at(off),
            0.0,
            out,
            MatView::row_major(d).at(off),
        );
    }
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
    dq: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
    dv: Option<&mut [f64]>,
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; nq * nk];
    let mut ds = vec![0.0; nq * nk];
    let (mut dq, mut dk, mut dv) = (dq, dk, dv);
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        if let Some(dv) = dv.as_deref_mut() {
            // dV_h += P^T dO_h
            gemm(
                nk,
                nq,
                dh,
                1.0,
                p,
                MatView::transposed(nk),
                dout,
                MatView::row_major(d).at(off),
                1.0,
                dv,
                MatView::row_major(d).at(off),
            );
        }
        if dq.is_none() && dk.is_none() {
            continue;
        }
        // dP = dO_h V_h^T
        gemm(
            nq,
            dh,
            nk,
            1.0,
            dout,
            MatView::row_major(d).at(off),
            v,
            MatView::transposed(d).at(off),
            0.0,
            &mut dp,
            MatView::row_major(nk),
        );
        ds.fill(0.0);
        softmax_rows_backward(p, &dp, nk, 1.0, &mut ds);
        if let Some(dq) = dq.as_deref_mut() {
            gemm(
                nq,
                nk,
                dh,
                scale,
                &ds,
                MatView::row_major(nk),
                k,
                MatView::row_major(d).at(off),
                1.0,
                dq,
                MatView::row_major(d).at(off),
            );
        }
        if let Some(dk) = dk.as_deref_mut() {
            gemm(
                nk,
                nq,
                dh,
                scale,
                &ds,
                MatView::transposed(nk),
                q,
                MatView::row_major(d).at(off),
                1.0,
                dk,
                MatView::row_major(d).at(off),
            );
        }
    }
}
