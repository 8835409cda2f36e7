//! Maps from the flow's latent space onto a family's support.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportKind {
    Identity,
    /// `z = e^y` onto the positive orthant.
    Exponential,
    /// Additive-logistic map of `R^(D−1)` onto the open `D`-simplex.
    Simplex,
}

/// Support transform with its latent (input) and support (output) sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportTransform {
    pub kind: SupportKind,
    pub support_dim: usize,
}

/// Support-space samples on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SupportOutput {
    /// `[n, D]` points in the support.
    pub z: Var,
    /// `[n, D]` elementwise `log z` for positive supports.
    pub log_z: Option<Var>,
    /// `[n]` `log|det ∂z/∂y|` of the transform (zero for the identity).
    pub log_det: Option<Var>,
}

impl SupportTransform {
    pub fn new(kind: SupportKind, support_dim: usize) -> Self {
        Self { kind, support_dim }
    }

    pub fn latent_dim(&self) -> usize {
        match self.kind {
            SupportKind::Simplex => self.support_dim - 1,
            _ => self.support_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, y: Var) -> Result<SupportOutput> {
        match self.kind {
            SupportKind::Identity => Ok(SupportOutput {
                z: y,
                log_z: None,
                log_det: None,
            }),
            SupportKind::Exponential => {
                let z = tape.exp(y)?;
                let ld = tape.sum_rows(y)?;
                Ok(SupportOutput {
                    z,
                    log_z: Some(y),
                    log_det: Some(ld),
                })
            }
            SupportKind::Simplex => {
                // log z_i = y_i − lse, log z_D = −lse, lse = log(1 + Σ e^{y_j})
                let (n, k) = tape.value(y).dims2();
                let lse = tape.log1p_sum_exp(y)?;
                let neg = tape.neg(lse)?;
                let ones = tape.constant(Tensor::matrix(n, k, vec![1.0; n * k])?)?;
                let spread = tape.mul_col(ones, neg)?;
                let head = tape.add(y, spread)?;
                let last = tape.reshape(neg, vec![n, 1])?;
                let log_z = tape.hcat(head, last)?;
                let z = tape.exp(log_z)?;
                let ld = tape.sum_rows(log_z)?;
                Ok(SupportOutput {
                    z,
                    log_z: Some(log_z),
                    log_det: Some(ld),
                })
            }
        }
    }

    /// Forward map of a single latent point: `(z, log_det)`.
    pub fn forward_point(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut tape = Tape::new();
        let yv = tape.constant(Tensor::matrix(1, y.len(), y.to_vec())?)?;
        let out = self.forward(&mut tape, yv)?;
        let ld = out.log_det.map_or(0.0, |v| tape.value(v).item());
        Ok((tape.value(out.z).data().to_vec(), ld))
    }

    /// Inverse map of a support point: `(y, log_det at y)`.
    pub fn inverse_point(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        if z.len() != self.support_dim {
            return Err(Error::InvalidArgument(format!(
                "support point has {} coordinates, expected {}",
                z.len(),
                self.support_dim
            )));
        }
        match self.kind {
            SupportKind::Identity => Ok((z.to_vec(), 0.0)),
            SupportKind::Exponential => {
                if z.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::Domain("point outside the positive orthant".into()));
                }
                let y: Vec<f64> = z.iter().map(|v| v.ln()).collect();
                let ld = y.iter().sum();
                Ok((y, ld))
            }
            SupportKind::Simplex => {
                let total: f64 = z.iter().sum();
                if z.iter().any(|&v| !(v > 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Domain("point outside the open simplex".into()));
                }
                let last = z[self.support_dim - 1].ln();
                let y = z[..self.support_dim - 1].iter().map(|v| v.ln() - last).collect();
                let ld = z.iter().map(|v| v.ln()).sum();
                Ok((y, ld))
            }
        }
    }
}
