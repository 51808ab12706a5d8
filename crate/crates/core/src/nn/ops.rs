//! Dense vector kernels. Matrices are row-major `[rows × cols]` slices.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn add_assign(y: &mut [f64], x: &[f64]) {
    axpy(1.0, x, y);
}

/// `out = W x`
pub fn matvec(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(w.len(), out.len() * cols);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = dot(row, x);
    }
}

/// `dx += Wᵀ dy`
pub fn matvec_t_acc(w: &[f64], cols: usize, dy: &[f64], dx: &mut [f64]) {
    debug_assert_eq!(dx.len(), cols);
    for (&g, row) in dy.iter().zip(w.chunks_exact(cols)) {
        if g != 0.0 {
            axpy(g, row, dx);
        }
    }
}

/// `dW += dy xᵀ`
pub fn outer_acc(dw: &mut [f64], cols: usize, dy: &[f64], x: &[f64]) {
    debug_assert_eq!(x.len(), cols);
    for (&g, row) in dy.iter().zip(dw.chunks_exact_mut(cols)) {
        if g != 0.0 {
            axpy(g, x, row);
        }
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

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
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
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

/// Backward through `p = softmax(s)`: `ds_i = p_i (dp_i - Σ_j p_j dp_j)`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner = dot(p, dp);
    p.iter().zip(dp).map(|(pi, gi)| pi * (gi - inner)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels() {
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut y = [0.0; 2];
        matvec(&w, 3, &[1.0, 0.0, -1.0], &mut y);
        assert_eq!(y, [-2.0, -2.0]);
        let mut dx = [0.0; 3];
        matvec_t_acc(&w, 3, &[1.0, 1.0], &mut dx);
        assert_eq!(dx, [5.0, 7.0, 9.0]);
        let mut dw = [0.0; 6];
        outer_acc(&mut dw, 3, &[1.0, 2.0], &[1.0, 0.0, 3.0]);
        assert_eq!(dw, [1.0, 0.0, 3.0, 2.0, 0.0, 6.0]);
        assert_eq!(dot(&[1.0; 7], &[2.0; 7]), 14.0);
    }

    #[test]
    fn softmax_normalizes() {
        let p = softmax(&[1.0, 2.0, 3.0, 1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lp = log_softmax(&[0.0; 5]);
        assert!(lp.iter().all(|x| (x + 5f64.ln()).abs() < 1e-12));
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
