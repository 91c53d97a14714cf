//! Scalar and slice kernels shared by the eager ops, the tape and the
//! inference path.

/// `c = beta * c + op(a) * op(b)` for row-major operands, where `op(x)` is
/// `x` or its transpose. `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
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
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // row-major buffers whose lengths are asserted in debug builds and
    // guaranteed by every caller's shape checks.
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

/// Strided view of a matrix inside a larger row-major buffer.
#[derive(Clone, Copy)]
pub struct MatView<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatView<'a> {
    /// Columns `col0..` of a row-major buffer with `width` columns.
    pub fn cols(data: &'a [f64], width: usize, col0: usize) -> Self {
        Self {
            data,
            offset: col0,
            row_stride: width,
            col_stride: 1,
        }
    }

    /// The transpose of the same region.
    pub fn t(self) -> Self {
        Self {
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c = beta * c + a * b` over strided views; `a` is `m x k`, `b` is
/// `k x n`, and `c` starts at `c_offset` with row stride `c_row_stride`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_view(
    m: usize,
    k: usize,
    n: usize,
    a: MatView<'_>,
    b: MatView<'_>,
    beta: f64,
    c: &mut [f64],
    c_offset: usize,
    c_row_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!(c_offset + (m - 1) * c_row_stride + n - 1 < c.len(), "output view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[c_offset + i * c_row_stride + j] *= beta;
            }
        }
        return;
    }
    // SAFETY: all three regions were bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            c_row_stride as isize,
            1,
        );
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without overflow for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax of `logits + mask` over one row. Entries whose mask is `-inf`
/// receive exactly zero. Returns `true` if every entry was masked, in which
/// case `out` is all zeros.
pub fn softmax_masked_row(logits: &[f64], mask: &[f64], out: &mut [f64]) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (l, m) in logits.iter().zip(mask) {
        if *m != f64::NEG_INFINITY {
            max = max.max(l + m);
        }
    }
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return true;
    }
    let mut total = 0.0;
    for ((o, l), m) in out.iter_mut().zip(logits).zip(mask) {
        *o = if *m == f64::NEG_INFINITY {
            0.0
        } else {
            (l + m - max).exp()
        };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    false
}

/// Plain softmax of one row, stabilized by max subtraction.
pub fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `ln(sum(exp(row)))`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Root-mean-square normalization of one row, scaled by `gain`.
pub fn rms_norm_row(x: &[f64], gain: &[f64], eps: f64, out: &mut [f64]) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    for ((o, v), g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

/// Rotates consecutive pairs of `head[1..]` by position-dependent angles.
/// Dimension 0 is never rotated so it can carry decision scores. An
/// unpaired trailing dimension is left unchanged. `inverse` applies the
/// transpose rotation.
pub fn rope_head(head: &mut [f64], position: usize, base: f64, inverse: bool) {
    let dims = head.len();
    let pairs = (dims.saturating_sub(1)) / 2;
    let rotary = (2 * pairs) as f64;
    for p in 0..pairs {
        let freq = base.powf(-((2 * p) as f64) / rotary);
        let angle = position as f64 * freq;
        let (sin, cos) = angle.sin_cos();
        let sin = if inverse { -sin } else { sin };
        let a = head[1 + 2 * p];
        let b = head[2 + 2 * p];
        head[1 + 2 * p] = a * cos - b * sin;
        head[2 + 2 * p] = a * sin + b * cos;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn log_sigmoid_extremes() {
        assert!((log_sigmoid(-100.0) + 100.0).abs() < 1e-6);
        assert!(log_sigmoid(1e4).abs() < 1e-300);
        assert_eq!(log_sigmoid(-1e4), -1e4);
        assert!(sigmoid(-1e4) >= 0.0 && sigmoid(1e4) == 1.0);
    }

    #[test]
    fn rope_is_orthogonal() {
        let orig = [0.3, 1.0, -2.0, 0.5, 0.25, 7.0];
        let mut h = orig;
        rope_head(&mut h, 17, 10000.0, false);
        assert_eq!(h[0], orig[0]);
        assert_eq!(h[5], orig[5]);
        let n0: f64 = orig.iter().map(|v| v * v).sum();
        let n1: f64 = h.iter().map(|v| v * v).sum();
        assert!((n0 - n1).abs() < 1e-12);
        rope_head(&mut h, 17, 10000.0, true);
        for (a, b) in h.iter().zip(orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
