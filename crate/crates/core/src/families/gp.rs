//! Squared-exponential Gaussian-process prior over binned log intensities.

use std::cell::RefCell;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::families::special::{cholesky, cholesky_inverse, cholesky_solve};

/// GP prior on `D` log-intensity bins of width `delta` starting at `t0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpPrior {
    pub t0: f64,
    pub delta: f64,
    pub length_scale: f64,
    pub variance: f64,
    pub mean: Vec<f64>,
}

pub struct GpFactors {
    pub chol: Vec<f64>,
    pub natural_block: Vec<f64>,
}

impl GpPrior {
    /// 20 bins of 20 ms over `[0.28, 0.68)` s, ℓ = 25 ms, σ² = 1, and a
    /// mean of log 10 spikes/s modulated at 6.25 Hz.
    pub fn standard() -> Self {
        let (t0, delta, d) = (0.28, 0.02, 20);
        let mean = (0..d)
            .map(|k| {
                let t = t0 + (k as f64 + 0.5) * delta;
                10f64.ln() + 0.5 * (2.0 * std::f64::consts::PI * 6.25 * t).sin()
            })
            .collect();
        Self {
            t0,
            delta,
            length_scale: 0.025,
            variance: 1.0,
            mean,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Bin centres.
    pub fn times(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|k| self.t0 + (k as f64 + 0.5) * self.delta)
            .collect()
    }

    pub fn jitter(&self) -> f64 {
        1e-6 * self.variance
    }

    /// `K_ij = σ² exp(−(t_i − t_j)² / 2ℓ²) + jitter δ_ij`.
    pub fn kernel_at(&self, times: &[f64]) -> Vec<f64> {
        let d = times.len();
        let mut k = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let dt = times[i] - times[j];
                k[i * d + j] = self.variance * (-dt * dt / (2.0 * self.length_scale.powi(2))).exp();
            }
            k[i * d + i] += self.jitter();
        }
        k
    }

    pub fn kernel(&self) -> Vec<f64> {
        self.kernel_at(&self.times())
    }

    pub fn cholesky(&self) -> Result<Vec<f64>> {
        cholesky(&self.kernel(), self.dim())
    }

    /// `[K⁻¹μ; −½K⁻¹ packed]`, the prior's natural-parameter block.
    pub fn natural_block(&self) -> Result<Vec<f64>> {
        let d = self.dim();
        let l = self.cholesky()?;
        let mut out = cholesky_solve(&l, d, &self.mean);
        let prec = cholesky_inverse(&l, d);
        out.extend(pack_quadratic(&prec, d, -0.5));
        Ok(out)
    }

    /// Cholesky factor and natural block, memoized per thread for the most
    /// recently used prior (η draws would otherwise refactor `K` every time).
    pub fn factors(&self) -> Result<Rc<GpFactors>> {
        thread_local! {
            static LAST: RefCell<Option<(GpPrior, Rc<GpFactors>)>> = const { RefCell::new(None) };
        }
        if let Some(f) = LAST.with_borrow(|c| c.as_ref().filter(|(p, _)| p == self).map(|(_, f)| f.clone())) {
            return Ok(f);
        }
        let f = Rc::new(GpFactors {
            chol: self.cholesky()?,
            natural_block: self.natural_block()?,
        });
        LAST.set(Some((self.clone(), f.clone())));
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.is_empty() || !(self.delta > 0.0) || !(self.length_scale > 0.0) || !(self.variance > 0.0) {
            return Err(Error::InvalidArgument(
                "GP prior needs at least one bin and positive delta, length scale and variance".into(),
            ));
        }
        self.cholesky().map(|_| ())
    }
}

/// Upper-triangular half-vectorization of `c·A` for symmetric `A`, with
/// off-diagonal entries doubled so that `ηᵀ uppervec(zzᵀ) = c zᵀAz`.
pub fn pack_quadratic(a: &[f64], d: usize, c: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            let f = if i == j { 1.0 } else { 2.0 };
            out.push(c * f * a[i * d + j]);
        }
    }
    out
}

/// Inverse of [`pack_quadratic`]: the symmetric matrix `A`.
pub fn unpack_quadratic(p: &[f64], d: usize, c: f64) -> Vec<f64> {
    let mut a = vec![0.0; d * d];
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            let f = if i == j { 1.0 } else { 2.0 };
            a[i * d + j] = p[k] / (c * f);
            a[j * d + i] = a[i * d + j];
            k += 1;
        }
    }
    a
}

/// `(i, j)` pairs with `i ≤ j`, in packing order.
pub fn upper_pairs(d: usize) -> (Vec<usize>, Vec<usize>) {
    let mut is = Vec::with_capacity(d * (d + 1) / 2);
    let mut js = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            is.push(i);
            js.push(j);
        }
    }
    (is, js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        let gp = GpPrior::standard();
        let k = gp.kernel_at(&[0.3, 0.325]);
        assert!((k[0] - (1.0 + 1e-6)).abs() < 1e-15);
        assert!((k[1] - (-0.5f64).exp()).abs() < 1e-15);
        assert!(gp.cholesky().is_ok());
        assert_eq!(gp.dim(), 20);
        assert!((gp.times()[0] - 0.29).abs() < 1e-15);
    }

    #[test]
    fn pack_round_trip() {
        let a = vec![2.0, 0.5, 0.5, 3.0];
        let p = pack_quadratic(&a, 2, -0.5);
        assert_eq!(p, vec![-1.0, -0.5, -1.5]);
        assert_eq!(unpack_quadratic(&p, 2, -0.5), a);
    }
}
