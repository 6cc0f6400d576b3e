//! Plain loops shared by the forward and backward rules.

use super::graph::BCE_EPS;

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out[m×q] = a[m×p] · b[p×q]`; `out` must be zeroed.
pub fn matmul(a: &[f64], b: &[f64], m: usize, p: usize, q: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * q..(i + 1) * q];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik != 0.0 {
                axpy(aik, &b[k * q..(k + 1) * q], row);
            }
        }
    }
}

/// `ga[m×p] += g[m×q] · bᵀ` where `b` is `p×q`.
pub fn matmul_bt_acc(g: &[f64], b: &[f64], m: usize, q: usize, p: usize, ga: &mut [f64]) {
    for i in 0..m {
        let gi = &g[i * q..(i + 1) * q];
        let out = &mut ga[i * p..(i + 1) * p];
        for (k, o) in out.iter_mut().enumerate() {
            *o += dot(gi, &b[k * q..(k + 1) * q]);
        }
    }
}

/// `gb[p×q] += aᵀ · g` where `a` is `m×p` and `g` is `m×q`.
pub fn matmul_at_acc(a: &[f64], g: &[f64], m: usize, p: usize, q: usize, gb: &mut [f64]) {
    for i in 0..m {
        let gi = &g[i * q..(i + 1) * q];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik != 0.0 {
                axpy(aik, gi, &mut gb[k * q..(k + 1) * q]);
            }
        }
    }
}

pub fn softmax_into(row: &[f64], tau: f64, out: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut den = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = ((x - mx) / tau).exp();
        den += *o;
    }
    for o in out.iter_mut() {
        *o /= den;
    }
}

#[inline]
fn clamp_p(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

#[inline]
pub fn bce_term(p: f64, t: f64) -> f64 {
    let p = clamp_p(p);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

#[inline]
pub fn bce_grad(p: f64, t: f64) -> f64 {
    let p = clamp_p(p);
    -t / p + (1.0 - t) / (1.0 - p)
}
