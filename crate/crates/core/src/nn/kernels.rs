//! Dense row-major kernels used by the graph operations.
//!
//! Every output element of [`matmul_nt`] is a dot product whose summation
//! order depends only on the row length, so a row computed alone is
//! bit-identical to the same row computed inside a larger matrix. Greedy
//! decoding relies on that to reproduce teacher-forced probabilities.
//!
//! The x86_64 build dispatches at runtime to an AVX2 copy of each kernel.

#[inline(always)]
fn dot_body(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline(always)]
fn axpy_body(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[i, j] = x[i, :] · w[j, :] + bias[j]`
#[inline(always)]
fn matmul_nt_body(
    x: &[f64],
    n: usize,
    k: usize,
    w: &[f64],
    m: usize,
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    for j in 0..m {
        let wj = &w[j * k..(j + 1) * k];
        let bj = bias.map_or(0.0, |b| b[j]);
        for i in 0..n {
            out[i * m + j] = dot_body(&x[i * k..(i + 1) * k], wj) + bj;
        }
    }
}

/// `dx[i, :] += Σ_j dy[i, j] · w[j, :]`
#[inline(always)]
fn matmul_nn_acc_body(dy: &[f64], n: usize, m: usize, w: &[f64], k: usize, dx: &mut [f64]) {
    for i in 0..n {
        let dxi = &mut dx[i * k..(i + 1) * k];
        for j in 0..m {
            let g = dy[i * m + j];
            if g != 0.0 {
                axpy_body(g, &w[j * k..(j + 1) * k], dxi);
            }
        }
    }
}

/// `dw[j, :] += Σ_i dy[i, j] · x[i, :]`
#[inline(always)]
fn matmul_tn_acc_body(dy: &[f64], n: usize, m: usize, x: &[f64], k: usize, dw: &mut [f64]) {
    for j in 0..m {
        let dwj = &mut dw[j * k..(j + 1) * k];
        for i in 0..n {
            let g = dy[i * m + j];
            if g != 0.0 {
                axpy_body(g, &x[i * k..(i + 1) * k], dwj);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn dot(a: &[f64], b: &[f64]) -> f64 {
        super::dot_body(a, b)
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
        super::axpy_body(alpha, x, y)
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn matmul_nt(
        x: &[f64],
        n: usize,
        k: usize,
        w: &[f64],
        m: usize,
        bias: Option<&[f64]>,
        out: &mut [f64],
    ) {
        super::matmul_nt_body(x, n, k, w, m, bias, out)
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn matmul_nn_acc(
        dy: &[f64],
        n: usize,
        m: usize,
        w: &[f64],
        k: usize,
        dx: &mut [f64],
    ) {
        super::matmul_nn_acc_body(dy, n, m, w, k, dx)
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn matmul_tn_acc(
        dy: &[f64],
        n: usize,
        m: usize,
        x: &[f64],
        k: usize,
        dw: &mut [f64],
    ) {
        super::matmul_tn_acc_body(dy, n, m, x, k, dw)
    }
}

#[cfg(target_arch = "x86_64")]
#[inline]
fn has_avx2() -> bool {
    std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports the enabled features.
        return unsafe { avx2::dot(a, b) };
    }
    dot_body(a, b)
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports the enabled features.
        return unsafe { avx2::axpy(alpha, x, y) };
    }
    axpy_body(alpha, x, y)
}

pub fn matmul_nt(
    x: &[f64],
    n: usize,
    k: usize,
    w: &[f64],
    m: usize,
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    debug_assert!(x.len() >= n * k && w.len() >= m * k && out.len() >= n * m);
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports the enabled features.
        return unsafe { avx2::matmul_nt(x, n, k, w, m, bias, out) };
    }
    matmul_nt_body(x, n, k, w, m, bias, out)
}

pub fn matmul_nn_acc(dy: &[f64], n: usize, m: usize, w: &[f64], k: usize, dx: &mut [f64]) {
    debug_assert!(dy.len() >= n * m && w.len() >= m * k && dx.len() >= n * k);
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports the enabled features.
        return unsafe { avx2::matmul_nn_acc(dy, n, m, w, k, dx) };
    }
    matmul_nn_acc_body(dy, n, m, w, k, dx)
}

pub fn matmul_tn_acc(dy: &[f64], n: usize, m: usize, x: &[f64], k: usize, dw: &mut [f64]) {
    debug_assert!(dy.len() >= n * m && x.len() >= n * k && dw.len() >= m * k);
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports the enabled features.
        return unsafe { avx2::matmul_tn_acc(dy, n, m, x, k, dw) };
    }
    matmul_tn_acc_body(dy, n, m, x, k, dw)
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

/// Numerically stable softmax of one row.
pub fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nt(x: &[f64], n: usize, k: usize, w: &[f64], m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = (0..k).map(|t| x[i * k + t] * w[j * k + t]).sum();
            }
        }
        out
    }

    fn seq(len: usize, scale: f64) -> Vec<f64> {
        (0..len)
            .map(|i| ((i * 7 + 3) % 11) as f64 * scale - 0.4)
            .collect()
    }

    #[test]
    fn matmul_nt_matches_naive() {
        let (n, k, m) = (5, 19, 7);
        let x = seq(n * k, 0.1);
        let w = seq(m * k, 0.07);
        let mut out = vec![0.0; n * m];
        matmul_nt(&x, n, k, &w, m, None, &mut out);
        for (a, b) in out.iter().zip(naive_nt(&x, n, k, &w, m)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_row_is_bit_identical_to_batched_row() {
        let (n, k, m) = (6, 33, 9);
        let x = seq(n * k, 0.13);
        let w = seq(m * k, 0.05);
        let b = seq(m, 0.2);
        let mut full = vec![0.0; n * m];
        matmul_nt(&x, n, k, &w, m, Some(&b), &mut full);
        for i in 0..n {
            let mut one = vec![0.0; m];
            matmul_nt(&x[i * k..(i + 1) * k], 1, k, &w, m, Some(&b), &mut one);
            assert_eq!(&full[i * m..(i + 1) * m], &one[..]);
        }
    }

    #[test]
    fn transposed_accumulators_match_naive() {
        let (n, k, m) = (4, 10, 6);
        let dy = seq(n * m, 0.3);
        let w = seq(m * k, 0.1);
        let x = seq(n * k, 0.2);
        let mut dx = vec![1.0; n * k];
        matmul_nn_acc(&dy, n, m, &w, k, &mut dx);
        for i in 0..n {
            for t in 0..k {
                let want: f64 = 1.0 + (0..m).map(|j| dy[i * m + j] * w[j * k + t]).sum::<f64>();
                assert!((dx[i * k + t] - want).abs() < 1e-12);
            }
        }
        let mut dw = vec![0.0; m * k];
        matmul_tn_acc(&dy, n, m, &x, k, &mut dw);
        for j in 0..m {
            for t in 0..k {
                let want: f64 = (0..n).map(|i| dy[i * m + j] * x[i * k + t]).sum();
                assert!((dw[j * k + t] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut out = [0.0; 4];
        softmax_row(&[1000.0, 999.0, -5.0, 0.0], &mut out);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(out.iter().all(|&p| p >= 0.0));
    }
}
