//! Plain loops over row-major buffers. Every reduction runs in a fixed
//! sequential order so results are bit-reproducible.

/// Geometry of a 2-D convolution: input `(n, c, h, w)`, weight
/// `(o, c, kh, kw)`, output `(n, o, oh, ow)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.o, self.c, self.kh, self.kw]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }

    /// Output positions along one axis whose source index for kernel tap
    /// `k` falls inside `[0, limit)`.
    #[inline]
    fn valid(&self, k: usize, out_len: usize, limit: usize) -> std::ops::Range<usize> {
        let lo = if self.pad > k { (self.pad - k).div_ceil(self.stride) } else { 0 };
        if limit + self.pad < k + 1 {
            return 0..0;
        }
        let hi = ((limit - 1 + self.pad - k) / self.stride + 1).min(out_len);
        lo.min(hi)..hi
    }
}

pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Unfolds sample `n` into a `(c·kh·kw, oh·ow)` patch matrix.
fn im2col(x: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let cols = g.oh * g.ow;
    let mut out = vec![0.0; g.c * g.kh * g.kw * cols];
    for c in 0..g.c {
        let xbase = (n * g.c + c) * g.h * g.w;
        for ki in 0..g.kh {
            let rows = g.valid(ki, g.oh, g.h);
            for kj in 0..g.kw {
                let span = g.valid(kj, g.ow, g.w);
                let dst = ((c * g.kh + ki) * g.kw + kj) * cols;
                for oi in rows.clone() {
                    let src = xbase + (oi * g.stride + ki - g.pad) * g.w;
                    for oj in span.clone() {
                        out[dst + oi * g.ow + oj] = x[src + oj * g.stride + kj - g.pad];
                    }
                }
            }
        }
    }
    out
}

/// Adds a patch matrix back into sample `n` of `dx` (adjoint of [`im2col`]).
fn col2im(col: &[f64], dx: &mut [f64], n: usize, g: &ConvGeom) {
    let cols = g.oh * g.ow;
    for c in 0..g.c {
        let xbase = (n * g.c + c) * g.h * g.w;
        for ki in 0..g.kh {
            let rows = g.valid(ki, g.oh, g.h);
            for kj in 0..g.kw {
                let span = g.valid(kj, g.ow, g.w);
                let src = ((c * g.kh + ki) * g.kw + kj) * cols;
                for oi in rows.clone() {
                    let dst = xbase + (oi * g.stride + ki - g.pad) * g.w;
                    for oj in span.clone() {
                        dx[dst + oj * g.stride + kj - g.pad] += col[src + oi * g.ow + oj];
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, cols) = (g.c * g.kh * g.kw, g.oh * g.ow);
    let mut out = Vec::with_capacity(g.n * g.o * cols);
    for n in 0..g.n {
        out.extend(matmul(w, &im2col(x, n, g), g.o, k, cols));
    }
    out
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad(gout: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, cols) = (g.c * g.kh * g.kw, g.oh * g.ow);
    let wt = transpose(w, g.o, k);
    let mut dx = vec![0.0; g.n * g.c * g.h * g.w];
    for n in 0..g.n {
        let go = &gout[n * g.o * cols..(n + 1) * g.o * cols];
        col2im(&matmul(&wt, go, k, g.o, cols), &mut dx, n, g);
    }
    dx
}

/// Adjoint of [`conv2d`] with respect to its weight.
pub fn conv2d_weight_grad(x: &[f64], gout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, cols) = (g.c * g.kh * g.kw, g.oh * g.ow);
    let mut dw = vec![0.0; g.o * k];
    for n in 0..g.n {
        let go = &gout[n * g.o * cols..(n + 1) * g.o * cols];
        let colt = transpose(&im2col(x, n, g), k, cols);
        for (acc, v) in dw.iter_mut().zip(matmul(go, &colt, g.o, cols, k)) {
            *acc += v;
        }
    }
    dw
}

/// Views `x` as `(outer, m, inner)` and sums over the outer and inner axes.
pub fn reduce_outer_inner(x: &[f64], outer: usize, inner: usize) -> Vec<f64> {
    let m = x.len() / (outer * inner);
    let mut out = vec![0.0; m];
    for o in 0..outer {
        for (j, acc) in out.iter_mut().enumerate() {
            let base = (o * m + j) * inner;
            for v in &x[base..base + inner] {
                *acc += v;
            }
        }
    }
    out
}

/// Inverse view of [`reduce_outer_inner`]: repeats `x` (length `m`) into
/// `(outer, m, inner)`.
pub fn broadcast_outer_inner(x: &[f64], outer: usize, inner: usize) -> Vec<f64> {
    let m = x.len();
    let mut out = Vec::with_capacity(outer * m * inner);
    for _ in 0..outer {
        for &v in x {
            out.extend(std::iter::repeat_n(v, inner));
        }
    }
    out
}

pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn narrow(x: &[f64], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<f64> {
    let (outer, dim, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        out.extend_from_slice(&x[base..base + len * inner]);
    }
    out
}

pub fn pad(x: &[f64], shape: &[usize], axis: usize, start: usize, full: usize) -> Vec<f64> {
    let (outer, dim, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; outer * full * inner];
    for o in 0..outer {
        let src = o * dim * inner;
        let dst = (o * full + start) * inner;
        out[dst..dst + dim * inner].copy_from_slice(&x[src..src + dim * inner]);
    }
    out
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    out
}

/// Mean over rows of `logsumexp(row) - row[label]`.
pub fn softmax_cross_entropy(x: &[f64], cols: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in x.chunks(cols).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}
