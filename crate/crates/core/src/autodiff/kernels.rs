//! Dense numeric kernels shared by the tape ops.

/// `c += op(a)[m×k] · op(b)[k×n]`, row-major. With `a_t` set, `a` is stored
/// as `k×m`; with `b_t` set, `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every index addressed by the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = op(a) · op(b)`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
) {
    c.iter_mut().for_each(|x| *x = 0.0);
    gemm_acc(m, k, n, a, a_t, b, b_t, c);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Sequential left-to-right sum; the fixed order keeps results bit-stable.
pub fn sum(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |acc, x| acc + x)
}

/// Pairwise (tree) summation of equally long vectors in the given order.
pub fn pairwise_sum(parts: &[&[f64]]) -> Vec<f64> {
    match parts {
        [] => Vec::new(),
        [one] => one.to_vec(),
        _ => {
            let mid = parts.len() / 2;
            let mut left = pairwise_sum(&parts[..mid]);
            let right = pairwise_sum(&parts[mid..]);
            left.iter_mut().zip(&right).for_each(|(l, r)| *l += r);
            left
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_for_all_transpose_modes() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    naive[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        let transpose = |x: &[f64], r: usize, c: usize| {
            let mut t = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    t[j * r + i] = x[i * c + j];
                }
            }
            t
        };
        let (at, bt) = (transpose(&a, m, k), transpose(&b, k, n));
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c);
                for (x, y) in c.iter().zip(&naive) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pairwise_sum_matches_plain_sum() {
        let parts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 1.0]).collect();
        let refs: Vec<&[f64]> = parts.iter().map(Vec::as_slice).collect();
        assert_eq!(pairwise_sum(&refs), vec![10.0, 5.0]);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        let v = sigmoid(-50.0);
        assert!(v > 0.0 && v <= 1e-6);
        let v = sigmoid(-800.0);
        assert!(!v.is_nan() && v <= 1e-6);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
