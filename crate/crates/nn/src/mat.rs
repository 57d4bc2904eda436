//! Row-major dense matrices and the raw kernels shared by the tape and by
//! cache-based inference code.

use std::fmt;

/// A dense row-major `rows x cols` matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat({}x{})", self.rows, self.cols)
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copies the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        out
    }

    pub fn vstack(parts: &[&Mat]) -> Mat {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.len()).sum());
        let mut rows = 0;
        for m in parts {
            assert_eq!(m.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Mat { rows, cols, data }
    }
}

/// Strided view description for [`gemm`].
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl View {
    pub const fn row_major(cols: usize) -> Self {
        View { offset: 0, row_stride: cols, col_stride: 1 }
    }

    pub const fn transposed(cols: usize) -> Self {
        View { offset: 0, row_stride: 1, col_stride: cols }
    }

    pub const fn at(self, offset: usize) -> Self {
        View { offset, ..self }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `C = alpha * A B + beta * C` with `A: m x k`, `B: k x n`, `C: m x n`,
/// each addressed through a strided view into its slice.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
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
    // SAFETY: the three views were bounds-checked above against their slices,
    // and `c` is uniquely borrowed.
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

/// `a (m x k) * b (k x n)`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm(
        a.rows,
        a.cols,
        b.cols,
        1.0,
        &a.data,
        View::row_major(a.cols),
        &b.data,
        View::row_major(b.cols),
        0.0,
        &mut out.data,
        View::row_major(b.cols),
    );
    out
}

/// `x W + bias` for a weight stored `in x out` and a `1 x out` bias.
pub fn linear(x: &Mat, w: &Mat, bias: Option<&Mat>) -> Mat {
    let mut out = matmul(x, w);
    if let Some(b) = bias {
        for r in 0..out.rows {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
    }
    out
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}

/// RMS normalisation applied independently to consecutive `group`-wide
/// segments of every row, scaled by a `group`-long gain.
pub const RMS_EPS: f64 = 1e-6;

pub fn rms_norm(x: &Mat, gain: &[f64], group: usize) -> Mat {
    assert_eq!(x.cols % group, 0);
    assert_eq!(gain.len(), group);
    let mut out = x.clone();
    for seg in out.data.chunks_mut(group) {
        let ms = seg.iter().map(|v| v * v).sum::<f64>() / group as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for (v, g) in seg.iter_mut().zip(gain) {
            *v *= inv * g;
        }
    }
    out
}

/// Rotary embedding table: per-row cosine/sine values for `head_dim / 2`
/// frequencies, using the rotate-half pairing `(i, i + head_dim/2)`.
#[derive(Clone, Debug)]
pub struct RopeTable {
    pub head_dim: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(positions: &[f64], head_dim: usize, base: f64) -> Self {
        assert!(head_dim % 2 == 0, "rotary head dim must be even");
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                let (s, c) = (p * freq).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        RopeTable { head_dim, cos, sin }
    }

    pub fn rows(&self) -> usize {
        self.cos.len() / (self.head_dim / 2)
    }
}

/// Rotates every head of every row; `inverse` applies the transpose rotation.
pub fn apply_rope(x: &mut Mat, table: &RopeTable, inverse: bool) {
    let hd = table.head_dim;
    let half = hd / 2;
    assert_eq!(x.cols % hd, 0);
    assert_eq!(x.rows, table.rows(), "rope table row count mismatch");
    let sign = if inverse { -1.0 } else { 1.0 };
    for r in 0..x.rows {
        let cs = &table.cos[r * half..(r + 1) * half];
        let sn = &table.sin[r * half..(r + 1) * half];
        for head in x.row_mut(r).chunks_mut(hd) {
            for i in 0..half {
                let (a, b) = (head[i], head[i + half]);
                let s = sign * sn[i];
                head[i] = a * cs[i] - b * s;
                head[i + half] = a * s + b * cs[i];
            }
        }
    }
}

/// Multi-head attention geometry. Queries are `n_seq * q_len` rows of
/// `heads * head_dim`; keys/values are `n_seq * k_len` rows of
/// `kv_heads * head_dim`. `mask[i * k_len + j]` says whether query `i` of a
/// sequence may attend key `j` of the same sequence.
#[derive(Clone, Debug)]
pub struct AttnShape {
    pub n_seq: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl AttnShape {
    fn group(&self) -> usize {
        assert!(self.kv_heads > 0 && self.heads % self.kv_heads == 0);
        self.heads / self.kv_heads
    }
}

/// Masked softmax attention. Returns the output and the attention
/// probabilities laid out `[seq][head][q][k]`.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, shape: &AttnShape, mask: &[bool]) -> (Mat, Vec<f64>) {
    let AttnShape { n_seq, q_len, k_len, heads, kv_heads, head_dim } = *shape;
    let qd = heads * head_dim;
    let kd = kv_heads * head_dim;
    assert_eq!((q.rows, q.cols), (n_seq * q_len, qd), "attention: bad query shape");
    assert_eq!((k.rows, k.cols), (n_seq * k_len, kd), "attention: bad key shape");
    assert_eq!((v.rows, v.cols), (n_seq * k_len, kd), "attention: bad value shape");
    assert_eq!(mask.len(), q_len * k_len, "attention: bad mask size");
    let group = shape.group();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = Mat::zeros(q.rows, qd);
    let mut probs = vec![0.0; n_seq * heads * q_len * k_len];
    for s in 0..n_seq {
        for h in 0..heads {
            let g = h / group;
            let p = &mut probs[((s * heads + h) * q_len) * k_len..((s * heads + h + 1) * q_len) * k_len];
            gemm(
                q_len,
                head_dim,
                k_len,
                scale,
                &q.data,
                View::row_major(qd).at(s * q_len * qd + h * head_dim),
                &k.data,
                View::transposed(kd).at(s * k_len * kd + g * head_dim),
                0.0,
                p,
                View::row_major(k_len),
            );
            for (i, row) in p.chunks_mut(k_len).enumerate() {
                let m = &mask[i * k_len..(i + 1) * k_len];
                let mut max = f64::NEG_INFINITY;
                for (x, &ok) in row.iter().zip(m) {
                    if ok && *x > max {
                        max = *x;
                    }
                }
                if max == f64::NEG_INFINITY {
                    row.iter_mut().for_each(|x| *x = 0.0);
                    continue;
                }
                let mut sum = 0.0;
                for (x, &ok) in row.iter_mut().zip(m) {
                    *x = if ok { (*x - max).exp() } else { 0.0 };
                    sum += *x;
                }
                let inv = 1.0 / sum;
                row.iter_mut().for_each(|x| *x *= inv);
            }
            gemm(
                q_len,
                k_len,
                head_dim,
                1.0,
                p,
                View::row_major(k_len),
                &v.data,
                View::row_major(kd).at(s * k_len * kd + g * head_dim),
                0.0,
                &mut out.data,
                View::row_major(qd).at(s * q_len * qd + h * head_dim),
            );
        }
    }
    (out, probs)
}

/// Gradients of [`attention`] with respect to queries, keys and values.
pub fn attention_backward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    shape: &AttnShape,
    probs: &[f64],
    d_out: &Mat,
) -> (Mat, Mat, Mat) {
    let AttnShape { n_seq, q_len, k_len, heads, kv_heads, head_dim } = *shape;
    let qd = heads * head_dim;
    let kd = kv_heads * head_dim;
    let group = shape.group();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut dq = Mat::zeros(q.rows, q.cols);
    let mut dk = Mat::zeros(k.rows, k.cols);
    let mut dv = Mat::zeros(v.rows, v.cols);
    let mut dp = vec![0.0; q_len * k_len];
    for s in 0..n_seq {
        for h in 0..heads {
            let g = h / group;
            let p = &probs[((s * heads + h) * q_len) * k_len..((s * heads + h + 1) * q_len) * k_len];
            let q_off = s * q_len * qd + h * head_dim;
            let kv_off = s * k_len * kd + g * head_dim;
            // dV += P^T dO
            gemm(
                k_len,
                q_len,
                head_dim,
                1.0,
                p,
                View::transposed(k_len),
                &d_out.data,
                View::row_major(qd).at(q_off),
                1.0,
                &mut dv.data,
                View::row_major(kd).at(kv_off),
            );
            // dP = dO V^T
            gemm(
                q_len,
                head_dim,
                k_len,
                1.0,
                &d_out.data,
                View::row_major(qd).at(q_off),
                &v.data,
                View::transposed(kd).at(kv_off),
                0.0,
                &mut dp,
                View::row_major(k_len),
            );
            // dS = P * (dP - rowsum(dP * P)), then fold in the logit scale.
            for (prow, drow) in p.chunks(k_len).zip(dp.chunks_mut(k_len)) {
                let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            gemm(
                q_len,
                k_len,
                head_dim,
                1.0,
                &dp,
                View::row_major(k_len),
                &k.data,
                View::row_major(kd).at(kv_off),
                1.0,
                &mut dq.data,
                View::row_major(qd).at(q_off),
            );
            gemm(
                k_len,
                q_len,
                head_dim,
                1.0,
                &dp,
                View::transposed(k_len),
                &q.data,
                View::row_major(qd).at(q_off),
                1.0,
                &mut dk.data,
                View::row_major(kd).at(kv_off),
            );
        }
    }
    (dq, dk, dv)
}

/// Geometry of a square-kernel 2-D convolution over `channels x height x width`
/// images stored one per row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn in_size(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_size(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    /// Rows of the unfolded patch matrix (`in_channels * kernel^2`).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let k = self.kernel;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let prow = (c * k + ky) * k + kx;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let src = (c * self.height + iy as usize) * self.width + ix as usize;
                            f(prow * ho * wo + oy * wo + ox, src);
                        }
                    }
                }
            }
        }
    }

    /// Unfolds one image into a `patch_len x (out_h * out_w)` matrix.
    pub fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        cols.iter_mut().for_each(|x| *x = 0.0);
        self.for_each_tap(|dst, src| cols[dst] = image[src]);
    }

    /// Folds a patch-matrix gradient back onto the image gradient.
    pub fn col2im(&self, cols: &[f64], image_grad: &mut [f64]) {
        self.for_each_tap(|dst, src| image_grad[src] += cols[dst]);
    }
}

/// Forward convolution: `x` holds one image per row, `w` is
/// `out_channels x patch_len`, `b` is `1 x out_channels`.
pub fn conv2d(x: &Mat, w: &Mat, b: &Mat, geom: &ConvGeom) -> Mat {
    assert_eq!(x.cols, geom.in_size(), "conv2d: input size mismatch");
    assert_eq!((w.rows, w.cols), (geom.out_channels, geom.patch_len()));
    let spatial = geom.out_height() * geom.out_width();
    let mut out = Mat::zeros(x.rows, geom.out_size());
    let mut cols = vec![0.0; geom.patch_len() * spatial];
    for n in 0..x.rows {
        geom.im2col(x.row(n), &mut cols);
        let dst = out.row_mut(n);
        for (c, chunk) in dst.chunks_mut(spatial).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b.data[c]);
        }
        gemm(
            geom.out_channels,
            geom.patch_len(),
            spatial,
            1.0,
            &w.data,
            View::row_major(w.cols),
            &cols,
            View::row_major(spatial),
            1.0,
            dst,
            View::row_major(spatial),
        );
    }
    out
}
