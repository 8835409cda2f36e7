//! Synthetic log-Gaussian Cox-process spike counts and dataset files.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::families::{FamilySpec, GpPrior};

/// Binned spike counts, one row per trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeDataset {
    pub counts: Vec<Vec<u64>>,
    pub bin_edges: Vec<f64>,
    pub delta: f64,
    #[serde(default)]
    pub meta: DatasetMeta,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub gp: Option<GpPrior>,
}

/// One latent draw: log intensities and expected counts per bin.
#[derive(Clone, Debug, PartialEq)]
pub struct CoxProcessDraw {
    pub z: Vec<f64>,
    pub intensity: Vec<f64>,
}

impl SpikeDataset {
    pub fn bins(&self) -> usize {
        self.bin_edges.len().saturating_sub(1)
    }

    pub fn n_trials(&self) -> usize {
        self.counts.len()
    }

    /// Per-bin counts summed over trials.
    pub fn summed_counts(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.bins()];
        for row in &self.counts {
            for (a, &c) in s.iter_mut().zip(row) {
                *a += c as f64;
            }
        }
        s
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let d = self.bins();
        if d == 0 {
            return Err("bin_edges needs at least two entries".into());
        }
        if !(self.delta > 0.0) {
            return Err("delta must be positive".into());
        }
        for (k, w) in self.bin_edges.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(format!("bin_edges[{}] not increasing", k + 1));
            }
            if ((w[1] - w[0]) - self.delta).abs() > 1e-9 {
                return Err(format!("bin_edges[{}] width differs from delta", k + 1));
            }
        }
        for (i, row) in self.counts.iter().enumerate() {
            if row.len() != d {
                return Err(format!("counts[{i}] has {} bins, header has {d}", row.len()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let malformed = |msg: String| Error::Malformed {
            path: path.to_path_buf(),
            msg,
        };
        // parse counts as signed first so negative entries get a precise message
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| malformed(format!("line {}: {e}", e.line())))?;
        if let Some(rows) = raw.get("counts").and_then(|c| c.as_array()) {
            for (i, row) in rows.iter().enumerate() {
                for (j, v) in row.as_array().into_iter().flatten().enumerate() {
                    if v.as_i64().is_some_and(|x| x < 0) || v.as_f64().is_some_and(|x| x < 0.0) {
                        return Err(malformed(format!("counts[{i}][{j}] is negative")));
                    }
                }
            }
        }
        let ds: SpikeDataset = serde_json::from_value(raw).map_err(|e| malformed(e.to_string()))?;
        ds.validate().map_err(malformed)?;
        Ok(ds)
    }
}

/// `K_ij = σ² exp(−(t_i − t_j)² / 2ℓ²) + jitter δ_ij`.
pub fn gp_kernel(spec: &GpPrior, times: &[f64]) -> Vec<f64> {
    spec.kernel_at(times)
}

/// Draw `z ~ N(μ, K)` once and `n_trials` rows of counts `~ Poisson(Δ e^z)`.
pub fn simulate_dataset<R: Rng + ?Sized>(
    spec: &GpPrior,
    n_trials: usize,
    rng: &mut R,
) -> Result<(SpikeDataset, CoxProcessDraw)> {
    if n_trials == 0 {
        return Err(Error::InvalidArgument("n_trials must be at least 1".into()));
    }
    let d = spec.dim();
    let factors = spec.factors()?;
    let l = &factors.chol;
    let e: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let z: Vec<f64> = (0..d)
        .map(|i| spec.mean[i] + (0..=i).map(|j| l[i * d + j] * e[j]).sum::<f64>())
        .collect();
    let draw = draw_from_latent(spec.delta, z);
    let counts = sample_counts(&draw.intensity, n_trials, rng)?;
    let ds = SpikeDataset {
        counts,
        bin_edges: (0..=d).map(|k| spec.t0 + k as f64 * spec.delta).collect(),
        delta: spec.delta,
        meta: DatasetMeta {
            seed: None,
            gp: Some(spec.clone()),
        },
    };
    Ok((ds, draw))
}

pub fn draw_from_latent(delta: f64, z: Vec<f64>) -> CoxProcessDraw {
    let intensity = z.iter().map(|v| delta * v.exp()).collect();
    CoxProcessDraw { z, intensity }
}

/// Independent Poisson counts per trial and bin.
pub fn sample_counts<R: Rng + ?Sized>(intensity: &[f64], n_trials: usize, rng: &mut R) -> Result<Vec<Vec<u64>>> {
    let dists = intensity
        .iter()
        .map(|&lam| Poisson::new(lam).map_err(|e| Error::Domain(format!("Poisson rate {lam}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..n_trials)
        .map(|_| dists.iter().map(|p| p.sample(rng) as u64).collect())
        .collect())
}

/// `n` datasets, dataset `i` generated from its own stream seeded by
/// `(seed, i)` and tagged with that seed.
pub fn simulate_corpus(spec: &GpPrior, n: usize, n_trials: usize, seed: u64) -> Result<Vec<SpikeDataset>> {
    (0..n)
        .map(|i| {
            let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (mut ds, _) = simulate_dataset(spec, n_trials, &mut rng)?;
            ds.meta.seed = Some(s);
            Ok(ds)
        })
        .collect()
}

/// Counts of spikes in half-open bins `[t0 + kΔ, t0 + (k+1)Δ)` covering
/// `[t0, t1)`; spikes outside the window are dropped.
pub fn bin_spikes(spike_times: &[Vec<f64>], t0: f64, t1: f64, delta: f64) -> Result<Vec<Vec<u64>>> {
    let ratio = (t1 - t0) / delta;
    let d = ratio.round() as usize;
    if !(delta > 0.0) || d == 0 || (ratio - d as f64).abs() > 1e-9 {
        return Err(Error::InvalidArgument("delta must divide the window length".into()));
    }
    let edges: Vec<f64> = (0..=d).map(|k| t0 + k as f64 * delta).collect();
    Ok(spike_times
        .iter()
        .map(|trial| {
            let mut row = vec![0u64; d];
            for &t in trial {
                if t >= t0 && t < t1 {
                    let k = edges.partition_point(|&e| e <= t) - 1;
                    row[k.min(d - 1)] += 1;
                }
            }
            row
        })
        .collect())
}

/// `η = [K⁻¹μ; −½K⁻¹; Σ counts; −N]` for a dataset under an LGP family.
pub fn lgp_natural_params(family: &FamilySpec, ds: &SpikeDataset) -> Result<Vec<f64>> {
    let FamilySpec::LgpPosterior { gp } = family else {
        return Err(Error::InvalidArgument("dataset η needs an lgp_posterior family".into()));
    };
    if ds.bins() != gp.dim() || (ds.delta - gp.delta).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} bins of width {}, family expects {} of width {}",
            ds.bins(),
            ds.delta,
            gp.dim(),
            gp.delta
        )));
    }
    family.posterior_natural_params(&gp.factors()?.natural_block, &ds.summed_counts(), ds.n_trials())
}
