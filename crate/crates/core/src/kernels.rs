//! Forward and backward kernels over flat row-major slices.
//!
//! Nothing here knows about the tape; shapes are validated by the caller.

/// `out[m×n] += a[m×k] · b`, where `b` is `[k×n]`, or `[n×k]` read transposed
/// when `trans_b` is set.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize, trans_b: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if trans_b {
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &b[j * k..(j + 1) * k];
                *o += dot(a_row, b_row);
            }
        }
    } else {
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += aip * bv;
                }
            }
        }
    }
}

/// `out[k×n] += aᵀ · c` for `a[m×k]`, `c[m×n]`.
pub(crate) fn matmul_tn_acc(a: &[f64], c: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let c_row = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in out_row.iter_mut().zip(c_row) {
                *o += aip * cv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler keep the loop vectorized
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub l_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub l_out: usize,
}

impl ConvGeom {
    /// Output positions `t` for which input index `t·stride + k − padding` is in range.
    #[inline]
    fn valid_range(&self, k: usize) -> (usize, usize) {
        // need t·s + k ≥ p  and  t·s + k − p ≤ l_in − 1
        let lo = if k >= self.padding {
            0
        } else {
            (self.padding - k).div_ceil(self.stride)
        };
        let hi_excl = if self.l_in + self.padding > k {
            let max_t = (self.l_in + self.padding - k - 1) / self.stride;
            (max_t + 1).min(self.l_out)
        } else {
            0
        };
        (lo, hi_excl.max(lo))
    }
}

pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let mut y = vec![0.0; g.batch * g.c_out * g.l_out];
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let y_row = &mut y[(n * g.c_out + co) * g.l_out..(n * g.c_out + co + 1) * g.l_out];
            if let Some(b) = b {
                y_row.fill(b[co]);
            }
            for ci in 0..g.c_in {
                let x_row = &x[(n * g.c_in + ci) * g.l_in..(n * g.c_in + ci + 1) * g.l_in];
                for k in 0..g.kernel {
                    let wv = w[(co * g.c_in + ci) * g.kernel + k];
                    let (lo, hi) = g.valid_range(k);
                    if g.stride == 1 {
                        let off = lo + k - g.padding;
                        for (yv, &xv) in y_row[lo..hi].iter_mut().zip(&x_row[off..off + (hi - lo)]) {
                            *yv += wv * xv;
                        }
                    } else {
                        for t in lo..hi {
                            y_row[t] += wv * x_row[t * g.stride + k - g.padding];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Accumulates gradients for `x`, `w` and `b` given `dy`. Any output slot may be skipped.
pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    if let Some(db) = db {
        for n in 0..g.batch {
            for co in 0..g.c_out {
                let row = &dy[(n * g.c_out + co) * g.l_out..(n * g.c_out + co + 1) * g.l_out];
                db[co] += row.iter().sum::<f64>();
            }
        }
    }
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let dy_row = &dy[(n * g.c_out + co) * g.l_out..(n * g.c_out + co + 1) * g.l_out];
            for ci in 0..g.c_in {
                let base = (n * g.c_in + ci) * g.l_in;
                for k in 0..g.kernel {
                    let widx = (co * g.c_in + ci) * g.kernel + k;
                    let (lo, hi) = g.valid_range(k);
                    if lo >= hi {
                        continue;
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        let mut s = 0.0;
                        for t in lo..hi {
                            s += dy_row[t] * x[base + t * g.stride + k - g.padding];
                        }
                        dw[widx] += s;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let wv = w[widx];
                        for t in lo..hi {
                            dx[base + t * g.stride + k - g.padding] += wv * dy_row[t];
                        }
                    }
                }
            }
        }
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = (x[idx(j)] - max).exp();
                y[idx(j)] = e;
                total += e;
            }
            for j in 0..n {
                y[idx(j)] /= total;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward(y: &[f64], dy: &[f64], dx: &mut [f64], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let s: f64 = (0..n).map(|j| dy[idx(j)] * y[idx(j)]).sum();
            for j in 0..n {
                dx[idx(j)] += y[idx(j)] * (dy[idx(j)] - s);
            }
        }
    }
}

/// Normalization statistics for groups of `count` strided elements.
///
/// `index(group, j)` maps the j-th member of a group to a flat offset.
pub(crate) struct NormStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
}

pub(crate) fn group_stats(x: &[f64], groups: usize, count: usize, index: impl Fn(usize, usize) -> usize) -> NormStats {
    let mut mean = vec![0.0; groups];
    let mut var = vec![0.0; groups];
    for g in 0..groups {
        let m = (0..count).map(|j| x[index(g, j)]).sum::<f64>() / count as f64;
        let v = (0..count).map(|j| (x[index(g, j)] - m).powi(2)).sum::<f64>() / count as f64;
        mean[g] = m;
        var[g] = v;
    }
    NormStats { mean, var }
}

/// Backward of `xhat = (x − μ) · inv_std` with batch statistics, after the
/// affine scale has already been folded into `dxhat`.
pub(crate) fn norm_backward_group(
    xhat: &[f64],
    dxhat: &[f64],
    inv_std: f64,
    count: usize,
    idx: impl Fn(usize) -> usize,
    dx: &mut [f64],
) {
    let m = count as f64;
    let mut sum_d = 0.0;
    let mut sum_dx = 0.0;
    for j in 0..count {
        let i = idx(j);
        sum_d += dxhat[i];
        sum_dx += dxhat[i] * xhat[i];
    }
    for j in 0..count {
        let i = idx(j);
        dx[i] += inv_std / m * (m * dxhat[i] - sum_d - xhat[i] * sum_dx);
    }
}
