//! Evaluation statistics: r² against the unnormalized target, Monte-Carlo
//! KL and ELBO, kernel two-sample tests and the EFN-versus-NF decision
//! boundary.

mod decision;
mod mmd;

pub use decision::{
    decision_boundary, default_targets, first_crossing, median_filter, write_decision_csv, DecisionRow, NStar,
};
pub use mmd::{mmd_test, MmdResult};

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::families::FamilySpec;
use crate::flows::DensityNetwork;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::training::objective::sample_terms;

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

/// OLS fit `log_q ≈ a + b·target`; returns `(r², a)`.
pub fn r2_log_density(log_q: &[f64], targets: &[f64]) -> Result<(f64, f64)> {
    let n = log_q.len();
    if n < 10 || targets.len() != n {
        return Err(Error::InvalidArgument(format!(
            "r² needs at least 10 paired values (got {n} and {})",
            targets.len()
        )));
    }
    let nf = n as f64;
    let mx = targets.iter().sum::<f64>() / nf;
    let my = log_q.iter().sum::<f64>() / nf;
    let sxx: f64 = targets.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = log_q.iter().map(|y| (y - my) * (y - my)).sum();
    let sxy: f64 = targets.iter().zip(log_q).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx / nf < 1e-12 {
        let r2 = if syy / nf < 1e-10 { 1.0 } else { 0.0 };
        return Ok((r2, my - mx));
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok((r2.min(1.0), a))
}

/// Per-sample `(log q(z), ηᵀt(z))` under a single θ.
pub fn sample_values(
    family: &FamilySpec,
    net: &DensityNetwork,
    theta: &[f64],
    eta: &[f64],
    w: Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let th = tape.constant(Tensor::matrix(1, theta.len(), theta.to_vec())?)?;
    let et = tape.constant(Tensor::matrix(1, eta.len(), eta.to_vec())?)?;
    let wv = tape.constant(w)?;
    let out = net.forward(&mut tape, th, wv)?;
    let target = family.target_on_tape(&mut tape, et, &out)?;
    let n = tape.value(out.z).rows();
    let z = tape.value(out.z).clone().reshape(vec![n, net.support_dim()])?;
    Ok((z, tape.value(out.log_q).data().to_vec(), tape.value(target).data().to_vec()))
}

/// ELBO from base draws, computed as the negated objective (same
/// summation order) plus its standard error.
pub fn elbo_from_draws(
    family: &FamilySpec,
    net: &DensityNetwork,
    theta: &[f64],
    eta: &[f64],
    w: Tensor,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let th = tape.constant(Tensor::matrix(1, theta.len(), theta.to_vec())?)?;
    let et = tape.constant(Tensor::matrix(1, eta.len(), eta.to_vec())?)?;
    let wv = tape.constant(w)?;
    let (lq, t) = sample_terms(&mut tape, family, net, th, et, wv)?;
    let diff = tape.sub(lq, t)?;
    let loss = tape.mean(diff)?;
    let (_, se) = mean_se(tape.value(diff).data());
    Ok((-tape.value(loss).item(), se))
}

/// `E_q[ηᵀt(z) − log q(z)]` from `n` draws of `rng`.
pub fn elbo<R: Rng + ?Sized>(
    family: &FamilySpec,
    net: &DensityNetwork,
    theta: &[f64],
    eta: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(Error::InvalidArgument("elbo needs at least 2 samples".into()));
    }
    let w = net.base_sample(n, rng);
    elbo_from_draws(family, net, theta, eta, w)
}

/// `E_q[log q(z) − log p(z; η)]` from `n` draws of `rng`, with its
/// standard error.
pub fn kl_mc<R: Rng + ?Sized>(
    family: &FamilySpec,
    net: &DensityNetwork,
    theta: &[f64],
    eta: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if !family.tractable() {
        return Err(Error::Intractable(family.name().into()));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("kl needs at least 2 samples".into()));
    }
    let w = net.base_sample(n, rng);
    let (_, lq, t) = sample_values(family, net, theta, eta, w)?;
    let log_a = family.log_partition(eta)?;
    let d: Vec<f64> = lq.iter().zip(&t).map(|(q, t)| q - (t - log_a)).collect();
    Ok(mean_se(&d))
}

/// Per-η statistics; columns of the metrics CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EtaMetrics {
    pub r2: Option<f64>,
    pub intercept: Option<f64>,
    pub kl: Option<f64>,
    pub kl_se: Option<f64>,
    pub elbo: f64,
    pub elbo_se: f64,
    pub mmd_p: Option<f64>,
}

/// ELBO for every family; r², intercept and KL for tractable ones.
pub fn eta_metrics(
    family: &FamilySpec,
    net: &DensityNetwork,
    theta: &[f64],
    eta: &[f64],
    w: Tensor,
) -> Result<EtaMetrics> {
    let (_, lq, t) = sample_values(family, net, theta, eta, w)?;
    let diff: Vec<f64> = t.iter().zip(&lq).map(|(t, q)| t - q).collect();
    let (elbo, elbo_se) = mean_se(&diff);
    let mut m = EtaMetrics {
        elbo,
        elbo_se,
        ..Default::default()
    };
    if family.tractable() {
        let (r2, a) = r2_log_density(&lq, &t)?;
        let log_a = family.log_partition(eta)?;
        let kl: Vec<f64> = diff.iter().map(|d| log_a - d).collect();
        let (kl, kl_se) = mean_se(&kl);
        m.r2 = Some(r2);
        m.intercept = Some(a);
        m.kl = Some(kl);
        m.kl_se = Some(kl_se);
    }
    Ok(m)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `eta_id,r2,intercept,kl,kl_se,elbo,elbo_se,mmd_p`; missing values empty.
pub fn write_metrics_csv(path: &Path, rows: &[EtaMetrics]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "eta_id,r2,intercept,kl,kl_se,elbo,elbo_se,mmd_p")?;
    for (i, m) in rows.iter().enumerate() {
        writeln!(
            f,
            "{i},{},{},{},{},{},{},{}",
            opt(m.r2),
            opt(m.intercept),
            opt(m.kl),
            opt(m.kl_se),
            m.elbo,
            m.elbo_se,
            opt(m.mmd_p)
        )?;
    }
    f.flush()?;
    Ok(())
}
