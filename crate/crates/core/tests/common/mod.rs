#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use subedit::facts::TokenId;
use subedit::model::{log_softmax, softmax};

pub type M = DMatrix<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> M {
    M::from_fn(rows, cols, |_, _| {
        let u1: f64 = r.random::<f64>().max(1e-300);
        let u2: f64 = r.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    })
}

pub fn gaussian_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    gaussian(r, n, 1).iter().copied().collect()
}

/// Thin SVD by one-sided Jacobi rotations: `a = u · diag(s) · vᵀ`, singular
/// values sorted descending, `u` has `min(m, n)` columns.
pub struct JacobiSvd {
    pub u: M,
    pub s: Vec<f64>,
    pub v: M,
}

pub fn jacobi_svd(a: &M) -> JacobiSvd {
    if a.nrows() < a.ncols() {
        let t = jacobi_svd(&a.transpose());
        return JacobiSvd { u: t.v, s: t.s, v: t.u };
    }
    let (m, n) = (a.nrows(), a.ncols());
    let mut w = a.clone();
    let mut v = M::identity(n, n);
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = w.column(p).norm_squared();
                let beta: f64 = w.column(q).norm_squared();
                let gamma: f64 = w.column(p).dot(&w.column(q));
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (w[(i, p)], w[(i, q)]);
                    w[(i, p)] = c * x - s * y;
                    w[(i, q)] = s * x + c * y;
                }
                for i in 0..n {
                    let (x, y) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = c * x - s * y;
                    v[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let mut u = M::zeros(m, n);
    let mut vs = M::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        s.push(norms[j]);
        vs.set_column(k, &v.column(j));
        if norms[j] > 0.0 {
            u.set_column(k, &(w.column(j) / norms[j]));
        }
    }
    JacobiSvd { u, s, v: vs }
}

/// Minimum-norm least-squares solution of `x · a = b` via the Jacobi SVD.
pub fn lstsq_right(a: &M, b: &M, rcond: f64) -> M {
    let svd = jacobi_svd(a);
    let smax = svd.s.first().copied().unwrap_or(0.0);
    let mut pinv = M::zeros(a.ncols(), a.nrows());
    for (k, &s) in svd.s.iter().enumerate() {
        if s > rcond * smax && s > 0.0 {
            pinv += svd.v.column(k) * svd.u.column(k).transpose() / s;
        }
    }
    b * pinv
}

/// Orthonormal basis of the eigenspace of `k0 k0ᵀ` with eigenvalue at most
/// `threshold · λ_max`. The right factor of the Jacobi SVD of the PSD matrix
/// is a complete eigenbasis even where eigenvalues vanish.
pub fn null_basis(k0: &M, threshold: f64) -> M {
    let svd = jacobi_svd(&(k0 * k0.transpose()));
    let lmax = svd.s[0];
    let keep: Vec<usize> = (0..svd.s.len()).filter(|&k| svd.s[k] <= threshold * lmax).collect();
    let mut b = M::zeros(k0.nrows(), keep.len());
    for (j, &k) in keep.iter().enumerate() {
        b.set_column(j, &svd.v.column(k));
    }
    b
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

/// Negative log-probability of `target` and its gradient in the logits.
pub fn nll(target: TokenId) -> impl Fn(&[f64]) -> (f64, Vec<f64>) {
    move |logits: &[f64]| {
        let lp = log_softmax(logits);
        let mut g = softmax(logits);
        g[target as usize] -= 1.0;
        (-lp[target as usize], g)
    }
}

/// Central differences of `f` at `x`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + h;
            let up = f(&y);
            y[i] = x[i] - h;
            let down = f(&y);
            y[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// One pass/fail line per criterion, written past the test harness capture.
pub fn verdict(id: &str, name: &str, ok: bool, detail: &str) {
    use std::io::Write;
    let line = format!("{} criterion {id} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}
