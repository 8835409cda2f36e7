//! Target exponential families `p(z; η) ∝ exp(ηᵀt(z))`, their η priors and
//! natural-parameter packing for posterior families.

pub mod gp;
pub mod special;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flows::{NetOutput, SupportKind, SupportTransform};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
pub use gp::{pack_quadratic, unpack_quadratic, upper_pairs, GpFactors, GpPrior};
use special::{cholesky, cholesky_inverse, cholesky_logdet, cholesky_solve, log_multivariate_beta};

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    /// `η = α − 1`, `t = log z` on the simplex.
    Dirichlet { dim: usize },
    /// `η = [Σ⁻¹μ; −½Σ⁻¹ packed]`, `t = [z; uppervec(zzᵀ)]`.
    Mvn { dim: usize },
    /// Posterior of a Dirichlet prior under iid `Dir(βz)` observations:
    /// `η = [α − 1; Σ log xᵢ; −N]`, `t = [log z; βz; log B(βz)]`.
    HierDirichletPosterior { dim: usize, beta: f64 },
    /// Posterior of binned log intensities under a GP prior and Poisson
    /// counts: `η = [K⁻¹μ; −½K⁻¹ packed; Σ counts; −N]`,
    /// `t = [z; uppervec(zzᵀ); z; Δ Σ e^z]`.
    LgpPosterior {
        #[serde(default = "GpPrior::standard")]
        gp: GpPrior,
    },
}

impl FamilySpec {
    pub fn name(&self) -> &'static str {
        match self {
            FamilySpec::Dirichlet { .. } => "dirichlet",
            FamilySpec::Mvn { .. } => "mvn",
            FamilySpec::HierDirichletPosterior { .. } => "hier_dirichlet_posterior",
            FamilySpec::LgpPosterior { .. } => "lgp_posterior",
        }
    }

    /// Support dimension `D`.
    pub fn dim(&self) -> usize {
        match self {
            FamilySpec::Dirichlet { dim }
            | FamilySpec::Mvn { dim }
            | FamilySpec::HierDirichletPosterior { dim, .. } => *dim,
            FamilySpec::LgpPosterior { gp } => gp.dim(),
        }
    }

    pub fn eta_dim(&self) -> usize {
        let d = self.dim();
        match self {
            FamilySpec::Dirichlet { .. } => d,
            FamilySpec::Mvn { .. } => d + d * (d + 1) / 2,
            FamilySpec::HierDirichletPosterior { .. } => 2 * d + 1,
            FamilySpec::LgpPosterior { .. } => d + d * (d + 1) / 2 + d + 1,
        }
    }

    pub fn support(&self) -> SupportTransform {
        let kind = match self {
            FamilySpec::Dirichlet { .. } | FamilySpec::HierDirichletPosterior { .. } => {
                SupportKind::Simplex
            }
            FamilySpec::Mvn { .. } | FamilySpec::LgpPosterior { .. } => SupportKind::Identity,
        };
        SupportTransform::new(kind, self.dim())
    }

    pub fn tractable(&self) -> bool {
        matches!(self, FamilySpec::Dirichlet { .. } | FamilySpec::Mvn { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let min = if self.support().kind == SupportKind::Simplex { 2 } else { 1 };
        if self.dim() < min {
            return Err(Error::InvalidArgument(format!(
                "{} needs dimension at least {min}",
                self.name()
            )));
        }
        match self {
            FamilySpec::HierDirichletPosterior { beta, .. } if !(*beta > 0.0) => {
                Err(Error::InvalidArgument("beta must be positive".into()))
            }
            FamilySpec::LgpPosterior { gp } => gp.validate(),
            _ => Ok(()),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("family serializes");
        hex::encode(Sha256::digest(&json))
    }

    fn check_eta(&self, eta: &[f64]) -> Result<()> {
        if eta.len() != self.eta_dim() {
            return Err(Error::InvalidArgument(format!(
                "{} expects |η| = {}, got {}",
                self.name(),
                self.eta_dim(),
                eta.len()
            )));
        }
        Ok(())
    }

    fn check_point(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::InvalidArgument(format!(
                "point has {} coordinates, expected {}",
                z.len(),
                self.dim()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite point".into()));
        }
        if self.support().kind == SupportKind::Simplex {
            let s: f64 = z.iter().sum();
            if z.iter().any(|&v| !(v > 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::Domain("point not in the open simplex".into()));
            }
        }
        Ok(())
    }

    /// `t(z)`, packed to match η.
    pub fn suff_stats(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_point(z)?;
        let d = self.dim();
        let quad = |out: &mut Vec<f64>| {
            for i in 0..d {
                for j in i..d {
                    out.push(z[i] * z[j]);
                }
            }
        };
        let mut t = Vec::with_capacity(self.eta_dim());
        match self {
            FamilySpec::Dirichlet { .. } => t.extend(z.iter().map(|v| v.ln())),
            FamilySpec::Mvn { .. } => {
                t.extend_from_slice(z);
                quad(&mut t);
            }
            FamilySpec::HierDirichletPosterior { beta, .. } => {
                t.extend(z.iter().map(|v| v.ln()));
                let bz: Vec<f64> = z.iter().map(|v| beta * v).collect();
                t.extend_from_slice(&bz);
                t.push(log_multivariate_beta(&bz));
            }
            FamilySpec::LgpPosterior { gp } => {
                t.extend_from_slice(z);
                quad(&mut t);
                t.extend_from_slice(z);
                t.push(gp.delta * z.iter().map(|v| v.exp()).sum::<f64>());
            }
        }
        Ok(t)
    }

    /// `ηᵀt(z)`.
    pub fn unnormalized_log_target(&self, eta: &[f64], z: &[f64]) -> Result<f64> {
        self.check_eta(eta)?;
        let t = self.suff_stats(z)?;
        Ok(eta.iter().zip(&t).map(|(a, b)| a * b).sum())
    }

    /// `t(z)` on a tape for network samples, `[n, |η|]`.
    pub fn suff_stats_on_tape(&self, tape: &mut Tape, out: &NetOutput) -> Result<Var> {
        let d = self.dim();
        let z = out.z;
        let log_z = || {
            out.log_z
                .ok_or_else(|| Error::Domain("positive support required for log z".into()))
        };
        let quad = |tape: &mut Tape| -> Result<Var> {
            let (is, js) = upper_pairs(d);
            let zi = tape.gather_cols(z, is)?;
            let zj = tape.gather_cols(z, js)?;
            tape.mul(zi, zj)
        };
        match self {
            FamilySpec::Dirichlet { .. } => log_z(),
            FamilySpec::Mvn { .. } => {
                let q = quad(tape)?;
                tape.hcat(z, q)
            }
            FamilySpec::HierDirichletPosterior { beta, .. } => {
                let lz = log_z()?;
                let bz = tape.scale(z, *beta)?;
                let n = tape.value(z).rows();
                let lg = tape.lgamma(bz)?;
                let lg = tape.sum_rows(lg)?;
                let total = tape.sum_rows(bz)?;
                let lg_total = tape.lgamma(total)?;
                let lb = tape.sub(lg, lg_total)?;
                let lb = tape.reshape(lb, vec![n, 1])?;
                let t = tape.hcat(lz, bz)?;
                tape.hcat(t, lb)
            }
            FamilySpec::LgpPosterior { gp } => {
                let n = tape.value(z).rows();
                let q = quad(tape)?;
                let e = tape.exp(z)?;
                let e = tape.sum_rows(e)?;
                let e = tape.scale(e, gp.delta)?;
                let e = tape.reshape(e, vec![n, 1])?;
                let t = tape.hcat(z, q)?;
                let t = tape.hcat(t, z)?;
                tape.hcat(t, e)
            }
        }
    }

    /// Per-sample `η_gᵀ t(z_r)` for grouped samples: `eta` is `[g, |η|]`,
    /// the samples `[g * m, D]`, row `r` paired with `η_{r / m}`.
    pub fn target_on_tape(&self, tape: &mut Tape, eta: Var, out: &NetOutput) -> Result<Var> {
        let t = self.suff_stats_on_tape(tape, out)?;
        let g = tape.value(eta).rows();
        let rows = tape.value(t).rows();
        if g == 0 || rows % g != 0 || tape.value(eta).cols() != self.eta_dim() {
            return Err(crate::error::shape_err(
                "target",
                format!("eta {:?}, samples {rows}", tape.shape(eta)),
            ));
        }
        tape.grouped_row_dot(t, eta)
    }

    /// `log A(η)` for tractable families.
    pub fn log_partition(&self, eta: &[f64]) -> Result<f64> {
        self.check_eta(eta)?;
        match self {
            FamilySpec::Dirichlet { .. } => {
                let alpha = dirichlet_alpha(eta)?;
                Ok(log_multivariate_beta(&alpha))
            }
            FamilySpec::Mvn { dim } => {
                let d = *dim;
                let (mu, prec, l) = mvn_precision(eta, d)?;
                let pm: Vec<f64> = (0..d)
                    .map(|i| (0..d).map(|j| prec[i * d + j] * mu[j]).sum())
                    .collect();
                let quad: f64 = mu.iter().zip(&pm).map(|(a, b)| a * b).sum();
                Ok(0.5 * quad - 0.5 * cholesky_logdet(&l, d) + 0.5 * d as f64 * LOG_2PI)
            }
            _ => Err(Error::Intractable(self.name().into())),
        }
    }

    /// Normalized `log p(z; η)`. On the simplex the density is with respect
    /// to Lebesgue measure on the first `D − 1` coordinates.
    pub fn exact_log_density(&self, eta: &[f64], z: &[f64]) -> Result<f64> {
        if !self.tractable() {
            return Err(Error::Intractable(self.name().into()));
        }
        let a = self.log_partition(eta)?;
        Ok(self.unnormalized_log_target(eta, z)? - a)
    }

    /// `n` exact draws from a tractable member, `[n, D]`.
    pub fn exact_sample<R: Rng + ?Sized>(&self, eta: &[f64], n: usize, rng: &mut R) -> Result<Tensor> {
        self.check_eta(eta)?;
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        match self {
            FamilySpec::Dirichlet { .. } => {
                let alpha = dirichlet_alpha(eta)?;
                for _ in 0..n {
                    data.extend(log_dirichlet_sample(&alpha, rng)?.into_iter().map(f64::exp));
                }
            }
            FamilySpec::Mvn { .. } => {
                let (mu, sigma) = mvn_moments(eta, d)?;
                let l = cholesky(&sigma, d)?;
                for _ in 0..n {
                    let e: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    for i in 0..d {
                        data.push(mu[i] + (0..=i).map(|j| l[i * d + j] * e[j]).sum::<f64>());
                    }
                }
            }
            _ => return Err(Error::Intractable(self.name().into())),
        }
        Tensor::matrix(n, d, data)
    }

    /// Length of the prior block of a posterior family's η.
    pub fn prior_block_len(&self) -> Option<usize> {
        let d = self.dim();
        match self {
            FamilySpec::HierDirichletPosterior { .. } => Some(d),
            FamilySpec::LgpPosterior { .. } => Some(d + d * (d + 1) / 2),
            _ => None,
        }
    }

    /// Stack `[prior block; Σᵢ t(xᵢ); −N]`.
    pub fn posterior_natural_params(&self, prior_block: &[f64], sum_t: &[f64], n: usize) -> Result<Vec<f64>> {
        let Some(p) = self.prior_block_len() else {
            return Err(Error::InvalidArgument(format!("{} is not a posterior family", self.name())));
        };
        if prior_block.len() != p || sum_t.len() != self.dim() {
            return Err(Error::InvalidArgument(format!(
                "posterior blocks have lengths ({}, {}), expected ({p}, {})",
                prior_block.len(),
                sum_t.len(),
                self.dim()
            )));
        }
        let mut eta = Vec::with_capacity(self.eta_dim());
        eta.extend_from_slice(prior_block);
        eta.extend_from_slice(sum_t);
        eta.push(-(n as f64));
        Ok(eta)
    }
}

fn dirichlet_alpha(eta: &[f64]) -> Result<Vec<f64>> {
    let alpha: Vec<f64> = eta.iter().map(|v| v + 1.0).collect();
    if alpha.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::Domain("Dirichlet concentration must be positive".into()));
    }
    Ok(alpha)
}

/// `(μ, Σ⁻¹, chol(Σ⁻¹))` from packed MVN natural parameters.
fn mvn_precision(eta: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let prec = unpack_quadratic(&eta[d..], d, -0.5);
    let l = cholesky(&prec, d)?;
    let mu = cholesky_solve(&l, d, &eta[..d]);
    Ok((mu, prec, l))
}

/// Packed natural parameters of `N(μ, Σ)`.
pub fn mvn_natural(mu: &[f64], sigma: &[f64]) -> Result<Vec<f64>> {
    let d = mu.len();
    let l = cholesky(sigma, d)?;
    let mut eta = cholesky_solve(&l, d, mu);
    eta.extend(pack_quadratic(&cholesky_inverse(&l, d), d, -0.5));
    Ok(eta)
}

/// Mean and covariance from packed MVN natural parameters.
pub fn mvn_moments(eta: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if eta.len() != d + d * (d + 1) / 2 {
        return Err(Error::InvalidArgument("MVN natural parameter length".into()));
    }
    let (mu, _, l) = mvn_precision(eta, d)?;
    Ok((mu, cholesky_inverse(&l, d)))
}

/// `log G` for `G ~ Gamma(shape, 1)`, accurate for very small shapes.
pub fn log_gamma_sample<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> Result<f64> {
    if shape >= 1.0 {
        let g = Gamma::new(shape, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(g.sample(rng).ln())
    } else if shape > 0.0 {
        // G(a) = G(a + 1) U^{1/a}
        let g = Gamma::new(shape + 1.0, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        Ok(g.sample(rng).ln() + u.ln() / shape)
    } else {
        Err(Error::InvalidArgument(format!("gamma shape {shape} must be positive")))
    }
}

/// `log x` for `x ~ Dir(alpha)`.
pub fn log_dirichlet_sample<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let lg = alpha
        .iter()
        .map(|&a| log_gamma_sample(a, rng))
        .collect::<Result<Vec<_>>>()?;
    let mx = lg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + lg.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    Ok(lg.iter().map(|v| v - lse).collect())
}

/// Distribution of natural parameters the EFN is trained over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum EtaPrior {
    /// `α_i ~ U[alpha_min, alpha_max]`.
    Dirichlet { alpha_min: f64, alpha_max: f64 },
    /// `μ_i ~ N(0, mean_std²)`, `Σ ~ IW(df, scale·I)`.
    Mvn { mean_std: f64, df: f64, scale: f64 },
    /// `α_i ~ U[alpha_min, alpha_max]`, `z ~ Dir(α)`, `N ~ U{n_min..=n_max}`,
    /// `xᵢ ~ Dir(βz)`.
    HierDirichletPosterior {
        alpha_min: f64,
        alpha_max: f64,
        n_min: usize,
        n_max: usize,
    },
    /// Synthetic datasets from the family's GP prior: `z ~ N(μ, K)`,
    /// `n_trials` rows of counts `~ Poisson(Δ e^z)`.
    LgpPosterior { n_trials: usize },
    /// Uniform over a fixed set of natural parameters, e.g. those of a
    /// dataset corpus.
    Empirical { etas: Vec<Vec<f64>> },
}

impl EtaPrior {
    pub fn default_for(family: &FamilySpec) -> Self {
        match family {
            FamilySpec::Dirichlet { .. } => EtaPrior::Dirichlet {
                alpha_min: 0.5,
                alpha_max: 5.0,
            },
            FamilySpec::Mvn { dim } => {
                let df = *dim as f64 + 2.0;
                EtaPrior::Mvn {
                    mean_std: 0.1,
                    df,
                    scale: df * *dim as f64,
                }
            }
            FamilySpec::HierDirichletPosterior { .. } => EtaPrior::HierDirichletPosterior {
                alpha_min: 0.5,
                alpha_max: 5.0,
                n_min: 1,
                n_max: 20,
            },
            FamilySpec::LgpPosterior { .. } => EtaPrior::LgpPosterior { n_trials: 20 },
        }
    }

    pub fn validate(&self, family: &FamilySpec) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        match (self, family) {
            (EtaPrior::Dirichlet { alpha_min, alpha_max }, FamilySpec::Dirichlet { .. })
            | (
                EtaPrior::HierDirichletPosterior { alpha_min, alpha_max, .. },
                FamilySpec::HierDirichletPosterior { .. },
            ) => {
                if !(*alpha_min > 0.0 && alpha_max >= alpha_min) {
                    return bad("alpha range must satisfy 0 < alpha_min <= alpha_max");
                }
                if let EtaPrior::HierDirichletPosterior { n_min, n_max, .. } = self {
                    if n_max < n_min {
                        return bad("n_max must be at least n_min");
                    }
                }
                Ok(())
            }
            (EtaPrior::Mvn { mean_std, df, scale }, FamilySpec::Mvn { dim }) => {
                if !(*mean_std >= 0.0 && *scale > 0.0) {
                    return bad("mvn prior needs mean_std >= 0 and scale > 0");
                }
                if !(*df > *dim as f64 - 1.0) {
                    return bad("inverse-Wishart df must exceed D - 1");
                }
                Ok(())
            }
            (EtaPrior::LgpPosterior { .. }, FamilySpec::LgpPosterior { .. }) => Ok(()),
            (EtaPrior::Empirical { etas }, _) => {
                if etas.is_empty() {
                    return bad("empirical prior needs at least one η");
                }
                if etas.iter().any(|e| e.len() != family.eta_dim()) {
                    return bad("empirical η length does not match the family");
                }
                Ok(())
            }
            _ => bad("eta prior does not match the family"),
        }
    }

    /// One draw of η.
    pub fn sample<R: Rng + ?Sized>(&self, family: &FamilySpec, rng: &mut R) -> Result<Vec<f64>> {
        let d = family.dim();
        match (self, family) {
            (EtaPrior::Dirichlet { alpha_min, alpha_max }, FamilySpec::Dirichlet { .. }) => {
                let u = uniform(*alpha_min, *alpha_max)?;
                Ok((0..d).map(|_| u.sample(rng) - 1.0).collect())
            }
            (EtaPrior::Mvn { mean_std, df, scale }, FamilySpec::Mvn { .. }) => {
                let normal = Normal::new(0.0, *mean_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                let mu: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
                let mut psi = vec![0.0; d * d];
                for i in 0..d {
                    psi[i * d + i] = *scale;
                }
                let mut last = None;
                for _ in 0..10 {
                    let sigma = special::inverse_wishart_sample(*df, &psi, d, rng)?;
                    match mvn_natural(&mu, &sigma) {
                        Ok(eta) => return Ok(eta),
                        Err(e) => last = Some(e),
                    }
                }
                Err(last.expect("at least one attempt"))
            }
            (
                EtaPrior::HierDirichletPosterior {
                    alpha_min,
                    alpha_max,
                    n_min,
                    n_max,
                },
                FamilySpec::HierDirichletPosterior { beta, .. },
            ) => {
                let u = uniform(*alpha_min, *alpha_max)?;
                let alpha: Vec<f64> = (0..d).map(|_| u.sample(rng)).collect();
                let z: Vec<f64> = log_dirichlet_sample(&alpha, rng)?.into_iter().map(f64::exp).collect();
                let n = rng.random_range(*n_min..=*n_max);
                let bz: Vec<f64> = z.iter().map(|v| (beta * v).max(f64::MIN_POSITIVE)).collect();
                let mut sum_log = vec![0.0; d];
                for _ in 0..n {
                    for (s, v) in sum_log.iter_mut().zip(log_dirichlet_sample(&bz, rng)?) {
                        *s += v;
                    }
                }
                let prior: Vec<f64> = alpha.iter().map(|a| a - 1.0).collect();
                family.posterior_natural_params(&prior, &sum_log, n)
            }
            (EtaPrior::LgpPosterior { n_trials }, FamilySpec::LgpPosterior { gp }) => {
                let (ds, _) = crate::data::simulate_dataset(gp, *n_trials, rng)?;
                crate::data::lgp_natural_params(family, &ds)
            }
            (EtaPrior::Empirical { etas }, _) => etas
                .get(rng.random_range(0..etas.len().max(1)))
                .cloned()
                .ok_or_else(|| Error::InvalidArgument("empirical prior is empty".into())),
            _ => Err(Error::InvalidArgument("eta prior does not match the family".into())),
        }
    }
}

fn uniform(lo: f64, hi: f64) -> Result<Uniform<f64>> {
    Uniform::new_inclusive(lo, hi).map_err(|e| Error::InvalidArgument(e.to_string()))
}
