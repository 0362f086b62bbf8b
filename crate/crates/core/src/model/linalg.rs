//! Dense kernels over row-major `f64` buffers.

/// A strided view into a matrix stored in a flat slice.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    /// Row-major `rows x cols` matrix.
    pub fn rm(data: &'a [f64], cols: usize) -> Self {
        Self { data, off: 0, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn rm_t(data: &'a [f64], cols: usize) -> Self {
        Self { data, off: 0, rs: 1, cs: cols }
    }

    /// Column block `[c0, c0 + width)` of a row-major matrix with `cols` columns.
    pub fn cols(data: &'a [f64], cols: usize, c0: usize) -> Self {
        Self { data, off: c0, rs: cols, cs: 1 }
    }

    /// Transposed column block.
    pub fn cols_t(data: &'a [f64], cols: usize, c0: usize) -> Self {
        Self { data, off: c0, rs: 1, cs: cols }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        self.off + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

#[derive(Clone, Copy)]
pub(crate) struct Out {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Out {
    pub fn rm(cols: usize) -> Self {
        Self { off: 0, rs: cols, cs: 1 }
    }

    pub fn cols(cols: usize, c0: usize) -> Self {
        Self { off: c0, rs: cols, cs: 1 }
    }
}

/// `C = A B + beta C` for an `m x k` by `k x n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View, b: View, beta: f64, c: &mut [f64], co: Out) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.max_index(m, k) < a.data.len().max(1) || k == 0, "gemm: A out of bounds");
    assert!(b.max_index(k, n) < b.data.len().max(1) || k == 0, "gemm: B out of bounds");
    assert!(
        co.off + (m - 1) * co.rs + (n - 1) * co.cs < c.len(),
        "gemm: C out of bounds"
    );
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = co.off + i * co.rs + j * co.cs;
                c[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(co.off),
            co.rs as isize,
            co.cs as isize,
        );
    }
}

/// Row-major `x (m x k) * w (k x n)`.
pub(crate) fn matmul(x: &[f64], w: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, View::rm(x, k), View::rm(w, n), 0.0, &mut out, Out::rm(n));
    out
}

pub(crate) const RMS_EPS: f64 = 1e-6;

/// Row-wise RMS normalization with gain; returns the output and the
/// per-row inverse RMS.
pub(crate) fn rmsnorm(x: &[f64], gain: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let s = 1.0 / (ms + RMS_EPS).sqrt();
        inv[r] = s;
        for j in 0..d {
            y[r * d + j] = row[j] * s * gain[j];
        }
    }
    (y, inv)
}

/// Backward of [`rmsnorm`]: accumulates into `dx` and `dgain`.
pub(crate) fn rmsnorm_backward(x: &[f64], inv: &[f64], gain: &[f64], dy: &[f64], dx: &mut [f64], dgain: &mut [f64]) {
    let d = gain.len();
    for (r, &s) in inv.iter().enumerate() {
        let row = &x[r * d..(r + 1) * d];
        let drow = &dy[r * d..(r + 1) * d];
        if drow.iter().all(|&v| v == 0.0) {
            continue;
        }
        let mut dot = 0.0;
        for j in 0..d {
            dgain[j] += drow[j] * row[j] * s;
            dot += drow[j] * gain[j] * row[j];
        }
        let k = dot * s * s * s / d as f64;
        for j in 0..d {
            dx[r * d + j] += drow[j] * gain[j] * s - row[j] * k;
        }
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Indices of the `k` largest entries, ties broken by lower index.
pub fn top_k(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn argmax(v: &[f64]) -> usize {
    top_k(v, 1)[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    #[test]
    fn gemm_matches_naive_with_transposes_and_blocks() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        assert!(matmul(&a, &b, m, k, n).iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        // A^T stored as k x m
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, View::rm_t(&at, m), View::rm(&b, n), 0.0, &mut c, Out::rm(n));
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        // write into a column block of a wider output and accumulate
        let mut wide = vec![1.0; m * (n + 2)];
        gemm(m, k, n, View::rm(&a, k), View::rm(&b, n), 1.0, &mut wide, Out::cols(n + 2, 2));
        for i in 0..m {
            assert_eq!(wide[i * (n + 2)], 1.0);
            for j in 0..n {
                assert!((wide[i * (n + 2) + 2 + j] - 1.0 - want[i * n + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn top_k_ties_prefer_low_index() {
        assert_eq!(top_k(&[1.0, 3.0, 3.0, 2.0], 3), vec![1, 2, 3]);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn argmax_shift_invariant() {
        let v = [0.3, -1.0, 2.2, 2.1];
        let shifted: Vec<f64> = v.iter().map(|x| x + 17.5).collect();
        assert_eq!(argmax(&v), argmax(&shifted));
    }
}
