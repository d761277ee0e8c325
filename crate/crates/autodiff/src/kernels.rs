//! Raw numeric kernels on row-major slices. No allocation policy, no graph.

/// Batched matrix product `out[s] = op(a[s]) * op(b[s])` for `s < batch`.
///
/// `a` holds `batch` stacked matrices of `a_rows x a_cols` (stored layout,
/// before any transpose), likewise `b`. Returns the stacked `m x n` results.
#[allow(clippy::too_many_arguments)]
pub fn bmm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    batch: usize,
    ta: bool,
    tb: bool,
) -> Vec<f64> {
    let (m, k) = if ta { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let n = if tb { b_rows } else { b_cols };
    let (rsa, csa) = if ta { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    let mut out = vec![0.0; batch * m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let a_stride = a_rows * a_cols;
    let b_stride = b_rows * b_cols;
    for s in 0..batch {
        let a_s = &a[s * a_stride..(s + 1) * a_stride];
        let b_s = &b[s * b_stride..(s + 1) * b_stride];
        let c_s = &mut out[s * m * n..(s + 1) * m * n];
        // SAFETY: the slices cover exactly the strided extents described by
        // (m, k, n) and the row/column strides computed above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a_s.as_ptr(),
                rsa,
                csa,
                b_s.as_ptr(),
                rsb,
                csb,
                0.0,
                c_s.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    out
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Max-subtracted softmax along each row.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

pub fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

/// Geometry of a 1-D convolution window over `batch` sequences stored as
/// `[batch * t_in, channels]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub batch: usize,
    pub t_in: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1dGeom {
    pub fn t_out(&self) -> usize {
        (self.t_in + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Source time index for output step `t` and tap `k`, if inside the input.
    fn source(&self, t: usize, k: usize) -> Option<usize> {
        let pos = t * self.stride + k;
        if pos < self.pad || pos - self.pad >= self.t_in {
            None
        } else {
            Some(pos - self.pad)
        }
    }
}

/// im2col: `[batch * t_in, c]` -> `[batch * t_out, kernel * c]`.
pub fn unfold(x: &[f64], g: Conv1dGeom) -> Vec<f64> {
    let t_out = g.t_out();
    let width = g.kernel * g.channels;
    let mut out = vec![0.0; g.batch * t_out * width];
    for b in 0..g.batch {
        for t in 0..t_out {
            let row = &mut out[(b * t_out + t) * width..(b * t_out + t + 1) * width];
            for k in 0..g.kernel {
                if let Some(src) = g.source(t, k) {
                    let from = (b * g.t_in + src) * g.channels;
                    row[k * g.channels..(k + 1) * g.channels]
                        .copy_from_slice(&x[from..from + g.channels]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`unfold`]: overlap-add back to `[batch * t_in, c]`.
pub fn fold(x: &[f64], g: Conv1dGeom) -> Vec<f64> {
    let t_out = g.t_out();
    let width = g.kernel * g.channels;
    let mut out = vec![0.0; g.batch * g.t_in * g.channels];
    for b in 0..g.batch {
        for t in 0..t_out {
            let row = &x[(b * t_out + t) * width..(b * t_out + t + 1) * width];
            for k in 0..g.kernel {
                if let Some(src) = g.source(t, k) {
                    let to = (b * g.t_in + src) * g.channels;
                    for (o, v) in out[to..to + g.channels]
                        .iter_mut()
                        .zip(&row[k * g.channels..(k + 1) * g.channels])
                    {
                        *o += v;
                    }
                }
            }
        }
    }
    out
}

/// View `x` as `[b, m, n, z]` and return the `[b, n, m, z]` permutation.
pub fn swap_mid(x: &[f64], b: usize, m: usize, n: usize, z: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ib in 0..b {
        for im in 0..m {
            for jn in 0..n {
                let src = ((ib * m + im) * n + jn) * z;
                let dst = ((ib * n + jn) * m + im) * z;
                out[dst..dst + z].copy_from_slice(&x[src..src + z]);
            }
        }
    }
    out
}
