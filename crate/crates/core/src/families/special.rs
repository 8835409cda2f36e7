//! Special functions and small dense linear algebra.
//!
//! Matrices are row-major `n x n` slices.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, n = 9).
pub fn lgamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection keeps the series in its accurate range
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - lgamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS_COEF[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `ψ(x) = d/dx ln Γ(x)` for `x > 0`.
pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    let series = x2
        * (1.0 / 12.0
            - x2 * (1.0 / 120.0 - x2 * (1.0 / 252.0 - x2 * (1.0 / 240.0 - x2 * (1.0 / 132.0)))));
    acc + x.ln() - 0.5 / x - series
}

/// `ln B(a) = Σ ln Γ(a_i) − ln Γ(Σ a_i)`.
pub fn log_multivariate_beta(a: &[f64]) -> f64 {
    a.iter().map(|&v| lgamma(v)).sum::<f64>() - lgamma(a.iter().sum())
}

/// Lower Cholesky factor `L` with `A = L Lᵀ`.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    if a.len() != n * n {
        return Err(Error::InvalidArgument(format!("cholesky: {} != {n}^2", a.len())));
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite { pivot: i });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solve `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[i * n + k] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Solve `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Solve `A x = b` given the Cholesky factor of `A`.
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    solve_lower_transpose(l, n, &solve_lower(l, n, b))
}

/// `A⁻¹` from the Cholesky factor of `A`.
pub fn cholesky_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = cholesky_solve(l, n, &e);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    // symmetrize away roundoff
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (inv[i * n + j] + inv[j * n + i]);
            inv[i * n + j] = m;
            inv[j * n + i] = m;
        }
    }
    inv
}

/// `ln det A` from the Cholesky factor of `A`.
pub fn cholesky_logdet(l: &[f64], n: usize) -> f64 {
    2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>()
}

/// Inverse of a lower-triangular matrix.
pub fn invert_lower(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = solve_lower(l, n, &e);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    inv
}

pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    crate::tape::matmul_into(a, b, n, n, n, &mut c);
    c
}

pub fn transpose(a: &[f64], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = a[i * n + j];
        }
    }
    t
}

/// Draw `Σ ~ IW(df, Ψ)` by inverting a Bartlett-decomposed Wishart draw
/// `W ~ W(df, Ψ⁻¹)`.
pub fn inverse_wishart_sample<R: Rng + ?Sized>(
    df: f64,
    scale: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(df > n as f64 - 1.0) {
        return Err(Error::InvalidArgument(format!(
            "inverse-Wishart needs df > D - 1 (df = {df}, D = {n})"
        )));
    }
    let l_psi = cholesky(scale, n)?;
    // chol(Ψ⁻¹) = (L_Ψ⁻¹)ᵀ up to an orthogonal factor; use chol of the inverse directly.
    let psi_inv = cholesky_inverse(&l_psi, n);
    let l_s = cholesky(&psi_inv, n)?;
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        let chi = ChiSquared::new(df - i as f64)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        a[i * n + i] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[i * n + j] = StandardNormal.sample(rng);
        }
    }
    // W = (L_S A)(L_S A)ᵀ; Σ = W⁻¹ = (L_S A)⁻ᵀ (L_S A)⁻¹
    let b = matmul(&l_s, &a, n);
    let b_inv = invert_lower(&b, n);
    let sigma = matmul(&transpose(&b_inv, n), &b_inv, n);
    let mut sym = sigma.clone();
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = 0.5 * (sigma[i * n + j] + sigma[j * n + i]);
        }
    }
    Ok(sym)
}
