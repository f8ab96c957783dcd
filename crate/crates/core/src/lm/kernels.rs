//! Dense row-major kernels. Weight matrices are stored `[in, out]` so that a
//! layer computes `y = x W`.

/// `y[r, :] += x[r, :] W` for `rows` rows.
pub(crate) fn matmul_acc(x: &[f64], w: &[f64], y: &mut [f64], rows: usize, n_in: usize, n_out: usize) {
    debug_assert_eq!(x.len(), rows * n_in);
    debug_assert_eq!(w.len(), n_in * n_out);
    debug_assert_eq!(y.len(), rows * n_out);
    for r in 0..rows {
        let xr = &x[r * n_in..(r + 1) * n_in];
        let yr = &mut y[r * n_out..(r + 1) * n_out];
        for (i, &xi) in xr.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wi = &w[i * n_out..(i + 1) * n_out];
            for (yo, &wo) in yr.iter_mut().zip(wi) {
                *yo += xi * wo;
            }
        }
    }
}

/// `dx[r, :] += dy[r, :] W^T`.
pub(crate) fn matmul_bt_acc(dy: &[f64], w: &[f64], dx: &mut [f64], rows: usize, n_in: usize, n_out: usize) {
    for r in 0..rows {
        let dyr = &dy[r * n_out..(r + 1) * n_out];
        let dxr = &mut dx[r * n_in..(r + 1) * n_in];
        for (i, dxi) in dxr.iter_mut().enumerate() {
            *dxi += dot(dyr, &w[i * n_out..(i + 1) * n_out]);
        }
    }
}

/// `dw += x^T dy`.
pub(crate) fn matmul_at_acc(x: &[f64], dy: &[f64], dw: &mut [f64], rows: usize, n_in: usize, n_out: usize) {
    for r in 0..rows {
        let xr = &x[r * n_in..(r + 1) * n_in];
        let dyr = &dy[r * n_out..(r + 1) * n_out];
        for (i, &xi) in xr.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let dwi = &mut dw[i * n_out..(i + 1) * n_out];
            for (d, &g) in dwi.iter_mut().zip(dyr) {
                *d += xi * g;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize the reduction.
    let mut acc = [0.0f64; 4];
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

pub(crate) const LN_EPS: f64 = 1e-5;

/// Normalizes each row of `x`; writes `y = gamma * xhat + beta` and returns
/// `(xhat, rstd)` for the backward pass.
pub(crate) fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], y: &mut [f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = gamma[j] * h + beta[j];
        }
    }
    (xhat, rstd)
}

/// Backward of [`layer_norm`]: accumulates into `dx`, `dgamma`, `dbeta`.
pub(crate) fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    d: usize,
) {
    let rows = rstd.len();
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let hr = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgamma[j] += dyr[j] * hr[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * hr[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            dx[r * d + j] += rstd[r] * (dxhat[j] - mean_dxhat - hr[j] * mean_dxhat_xhat);
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn matmul_variants_agree_with_loops() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let w = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0]; // 3x2
        let mut y = [0.0; 4];
        matmul_acc(&x, &w, &mut y, 2, 3, 2);
        assert_eq!(y, [1.0 - 2.0, 0.5 + 4.0 + 3.0, 4.0 - 5.0, 2.0 + 10.0 + 6.0]);
        let dy = [1.0, 0.0, 0.0, 1.0];
        let mut dx = [0.0; 6];
        matmul_bt_acc(&dy, &w, &mut dx, 2, 3, 2);
        assert_eq!(dx, [1.0, -1.0, 0.0, 0.5, 2.0, 1.0]);
        let mut dw = [0.0; 6];
        matmul_at_acc(&x, &dy, &mut dw, 2, 3, 2);
        assert_eq!(dw, [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn log_softmax_normalizes() {
        let lp = log_softmax(&[1000.0, 999.0, -5.0]);
        assert!(logsumexp(&lp).abs() < 1e-12);
    }
}
