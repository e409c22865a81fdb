//! Dense row-major kernels with hand-written backward passes.

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    // SAFETY: the asserted lengths cover every row/column stride used.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            0.0,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
    out
}

/// `gb += aᵀ · g` for `a (m×k)`, `g (m×n)`.
pub fn matmul_acc_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, gb: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(g.len(), m * n);
    assert_eq!(gb.len(), k * n);
    // SAFETY: as above; `aᵀ` is read through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0,
            a.as_ptr(), 1, k as isize,
            g.as_ptr(), n as isize, 1,
            1.0,
            gb.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `ga += g · bᵀ` for `g (m×n)`, `b (k×n)`.
pub fn matmul_acc_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, ga: &mut [f64]) {
    assert_eq!(g.len(), m * n);
    assert_eq!(b.len(), k * n);
    assert_eq!(ga.len(), m * k);
    // SAFETY: as above; `bᵀ` is read through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0,
            g.as_ptr(), n as isize, 1,
            b.as_ptr(), 1, n as isize,
            1.0,
            ga.as_mut_ptr(), k as isize, 1,
        );
    }
}

pub fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn acc_bias_grad(g: &[f64], gb: &mut [f64]) {
    for row in g.chunks(gb.len()) {
        for (d, v) in gb.iter_mut().zip(row) {
            *d += v;
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Per-row layer norm; returns the normalised (pre-affine) rows and each
/// row's reciprocal standard deviation for the backward pass.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (out, xhat, rstd)
}

/// Backward of [`layer_norm`]: accumulates gain/bias grads, returns `dx`.
pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let d = gain.len();
    let mut dx = vec![0.0; dy.len()];
    for (r, &rs) in rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut sum_dh = 0.0;
        let mut sum_dh_x = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xr[j];
            dbias[j] += dyr[j];
            let dh = dyr[j] * gain[j];
            sum_dh += dh;
            sum_dh_x += dh * xr[j];
        }
        let inv_d = 1.0 / d as f64;
        for j in 0..d {
            let dh = dyr[j] * gain[j];
            dx[r * d + j] = rs * (dh - inv_d * sum_dh - xr[j] * inv_d * sum_dh_x);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// In-place softmax of a row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Adds `log_beta` to the logits of highlighted entries, then applies the
/// softmax. Entries that are not highlighted are left untouched before the
/// softmax so an empty highlight reproduces the plain softmax exactly.
pub fn highlighted_softmax(row: &mut [f64], highlighted: impl Fn(usize) -> bool, log_beta: f64) {
    for (i, v) in row.iter_mut().enumerate() {
        if highlighted(i) {
            *v += log_beta;
        }
    }
    softmax_in_place(row);
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let c = matmul(&a, &b, m, k, n);
        assert_eq!(c.len(), m * n);
        for (x, y) in c.iter().zip(naive(&a, &b, m, k, n)) {
            assert!((x - y).abs() < 1e-12);
        }
        // aᵀ g with g = c
        let mut gb = vec![0.0; k * n];
        matmul_acc_at(&a, &c, m, k, n, &mut gb);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        for (x, y) in gb.iter().zip(naive(&at, &c, k, m, n)) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut ga = vec![0.0; m * k];
        matmul_acc_bt(&c, &b, m, k, n, &mut ga);
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        for (x, y) in ga.iter().zip(naive(&c, &bt, m, n, k)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
