use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::median;
use crate::training::TrainLogRecord;

/// Break-even dataset count at one ELBO target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NStar {
    Finite(u64),
    /// The EFN never reached the target.
    Undefined,
}

impl std::fmt::Display for NStar {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NStar::Finite(n) => write!(f, "{n}"),
            NStar::Undefined => write!(f, "undefined"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionRow {
    pub target: f64,
    pub t_efn_s: Option<f64>,
    pub t_nf_mean_s: Option<f64>,
    /// Fraction of NF runs that reached the target.
    pub nf_reach_frac: f64,
    pub n_star: NStar,
}

/// Centred running median over up to `width` points; the window shrinks
/// symmetrically near the ends.
pub fn median_filter(xs: &[f64], width: usize) -> Vec<f64> {
    let n = xs.len();
    (0..n)
        .map(|i| {
            let h = (width / 2).min(i).min(n - 1 - i);
            median(&xs[i - h..=i + h])
        })
        .collect()
}

/// First `wall_s` at which the 5-point-median-smoothed `elbo_mean` reaches
/// `target`.
pub fn first_crossing(log: &[TrainLogRecord], target: f64) -> Option<f64> {
    let elbo: Vec<f64> = log.iter().map(|r| r.elbo_mean).collect();
    let smooth = median_filter(&elbo, 5);
    smooth.iter().position(|&e| e >= target).map(|i| log[i].wall_s)
}

/// `n` targets evenly spaced above the EFN's first smoothed ELBO, up to its
/// best smoothed ELBO.
pub fn default_targets(efn: &[TrainLogRecord], n: usize) -> Vec<f64> {
    let elbo: Vec<f64> = efn.iter().map(|r| r.elbo_mean).collect();
    let smooth = median_filter(&elbo, 5);
    let Some(&lo) = smooth.first() else {
        return Vec::new();
    };
    let hi = smooth.iter().copied().fold(lo, f64::max);
    (1..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

/// For each target: EFN time to reach it, mean time over NF runs that
/// reach it (censored runs excluded), and `n* = ⌈T_efn / t_nf⌉`; `n* = 1`
/// when the EFN reaches a target no NF run reaches.
pub fn decision_boundary(
    efn: &[TrainLogRecord],
    nf: &[Vec<TrainLogRecord>],
    targets: &[f64],
) -> Result<Vec<DecisionRow>> {
    if efn.is_empty() || nf.is_empty() || nf.iter().any(|l| l.is_empty()) {
        return Err(Error::InvalidArgument("decision boundary needs non-empty EFN and NF logs".into()));
    }
    Ok(targets
        .iter()
        .map(|&target| {
            let t_efn = first_crossing(efn, target);
            let reached: Vec<f64> = nf.iter().filter_map(|l| first_crossing(l, target)).collect();
            let frac = reached.len() as f64 / nf.len() as f64;
            let t_nf = (!reached.is_empty()).then(|| reached.iter().sum::<f64>() / reached.len() as f64);
            let n_star = match (t_efn, t_nf) {
                (None, _) => NStar::Undefined,
                (Some(_), None) => NStar::Finite(1),
                (Some(te), Some(tn)) => {
                    let ratio = if tn > 0.0 { te / tn } else { f64::INFINITY };
                    // tolerate round-off in exact ratios such as 100 / 10
                    let n = (ratio * (1.0 - 1e-12)).ceil();
                    NStar::Finite(if n.is_finite() { (n as u64).max(1) } else { u64::MAX })
                }
            };
            DecisionRow {
                target,
                t_efn_s: t_efn,
                t_nf_mean_s: t_nf,
                nf_reach_frac: frac,
                n_star,
            }
        })
        .collect())
}

/// `target,T_efn_s,t_nf_mean_s,nf_reach_frac,n_star`.
pub fn write_decision_csv(path: &Path, rows: &[DecisionRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "target,T_efn_s,t_nf_mean_s,nf_reach_frac,n_star")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.target,
            opt(r.t_efn_s),
            opt(r.t_nf_mean_s),
            r.nf_reach_frac,
            r.n_star
        )?;
    }
    f.flush()?;
    Ok(())
}
