//! Declarative run configuration, read from TOML with unknown keys
//! rejected. [`RunConfig::resolve`] fills every default so the persisted
//! copy reproduces the run exactly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{lgp_natural_params, SpikeDataset};
use crate::error::{Error, Result};
use crate::families::{EtaPrior, FamilySpec};
use crate::flows::{default_layer_count, DensityNetwork, LayerKind};
use crate::param_net::default_depth;
use crate::training::{stream, trainer::tags, Mode, Problem, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub family: FamilySpec,
    /// Defaults to the family's standard η prior.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<EtaPrior>,
    /// Train over the η of a directory of dataset files instead of `prior`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusConfig>,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub param_net: ParamNetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub paths: PathsConfig,
    /// The single η trained in nf mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetConfig>,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub lookup: LookupConfig,
    #[serde(default)]
    pub compare: CompareConfig,
    #[serde(default)]
    pub decide: DecideConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Directory of `*.json` dataset files.
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Lead with one affine layer.
    pub affine_first: bool,
    pub kind: LayerKind,
    /// Layers of `kind` after the affine one; defaults to `D` for `D ≥ 20`,
    /// else 20.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            affine_first: true,
            kind: LayerKind::Planar,
            count: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamNetConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    pub scaler: bool,
}

impl Default for ParamNetConfig {
    fn default() -> Self {
        Self { depth: None, scaler: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub r2: bool,
    pub kl: bool,
    pub mmd: bool,
    /// Monte-Carlo draws per η for the final metrics.
    pub mc_samples: usize,
    pub mmd_samples: usize,
    pub mmd_permutations: usize,
    /// Held-out datasets replacing the prior-drawn held-out η set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_out_dir: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            r2: true,
            kl: true,
            mmd: false,
            mc_samples: 10_000,
            mmd_samples: 100,
            mmd_permutations: 500,
            held_out_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub run_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("run"),
            log_dir: None,
            checkpoint_dir: None,
        }
    }
}

impl PathsConfig {
    pub fn log_dir(&self) -> PathBuf {
        self.log_dir.clone().unwrap_or_else(|| self.run_dir.clone())
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint_dir.clone().unwrap_or_else(|| self.run_dir.clone())
    }

    pub fn log_path(&self) -> PathBuf {
        self.log_dir().join("train_log.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint_dir().join("checkpoint.efn")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<Vec<f64>>,
    /// Dataset file whose posterior η is the target.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_datasets: usize,
    pub n_trials: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n_datasets: 50,
            n_trials: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LookupConfig {
    /// Defaults to the run's checkpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// JSON file holding one η as an array.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_file: Option<PathBuf>,
    pub n_samples: usize,
}

impl Default for LookupConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            dataset: None,
            eta_file: None,
            n_samples: 1000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of nf-mode run configs, one per η.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nf_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecideConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub efn_log: Option<PathBuf>,
    pub nf_logs: Vec<PathBuf>,
    /// Explicit ELBO targets; otherwise `n_targets` evenly spaced ones.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<f64>>,
    pub n_targets: usize,
}

impl Default for DecideConfig {
    fn default() -> Self {
        Self {
            efn_log: None,
            nf_logs: Vec::new(),
            targets: None,
            n_targets: 5,
        }
    }
}

/// Every `*.json` file in `dir`, sorted by name.
pub fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Natural parameters of every dataset in `dir`.
pub fn corpus_etas(family: &FamilySpec, dir: &Path) -> Result<Vec<Vec<f64>>> {
    let files = dataset_files(dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no dataset files in {}", dir.display())));
    }
    files
        .iter()
        .map(|f| lgp_natural_params(family, &SpikeDataset::load(f)?))
        .collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Materialize every default and check consistency. Idempotent.
    pub fn resolve(mut self) -> Result<Self> {
        self.family.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.train.seed != 0 && self.train.seed != self.seed {
            if self.seed != 0 {
                return Err(Error::Config(format!(
                    "seed = {} conflicts with train.seed = {}",
                    self.seed, self.train.seed
                )));
            }
            self.seed = self.train.seed;
        }
        self.train.seed = self.seed;
        let prior = self.prior.take().unwrap_or_else(|| EtaPrior::default_for(&self.family));
        if matches!(prior, EtaPrior::Empirical { .. }) {
            return Err(Error::Config("use a [corpus] block for an empirical prior".into()));
        }
        prior.validate(&self.family).map_err(|e| Error::Config(e.to_string()))?;
        self.prior = Some(prior);
        if self.corpus.is_some() && !matches!(self.family, FamilySpec::LgpPosterior { .. }) {
            return Err(Error::Config("[corpus] requires the lgp_posterior family".into()));
        }
        let d = self.family.dim();
        self.flow.count.get_or_insert(default_layer_count(d));
        if !self.flow.affine_first && self.flow.count == Some(0) {
            return Err(Error::Config("flow has no layers".into()));
        }
        self.param_net.depth.get_or_insert(default_depth(d));
        if self.train.mode == Mode::Nf && self.train.k != 1 {
            log::warn!("nf mode trains a single η; k = {} coerced to 1", self.train.k);
            self.train.k = 1;
        }
        self.train.validate()?;
        if self.train.mode == Mode::Nf {
            let eta = self.target_eta()?;
            self.target = Some(TargetConfig {
                eta: Some(eta),
                dataset: self.target.as_ref().and_then(|t| t.dataset.clone()),
            });
        }
        if self.eval.mc_samples < 10 {
            return Err(Error::Config("eval.mc_samples must be at least 10".into()));
        }
        Ok(self)
    }

    fn target_eta(&self) -> Result<Vec<f64>> {
        let eta = match &self.target {
            Some(TargetConfig { eta: Some(eta), .. }) => eta.clone(),
            Some(TargetConfig { dataset: Some(path), .. }) => {
                lgp_natural_params(&self.family, &SpikeDataset::load(path)?)?
            }
            _ => {
                let mut rng = stream(self.seed, 0, tags::HELD_OUT, 0);
                self.prior
                    .as_ref()
                    .expect("prior resolved")
                    .sample(&self.family, &mut rng)?
            }
        };
        if eta.len() != self.family.eta_dim() {
            return Err(Error::Config(format!(
                "target η has {} entries, family expects {}",
                eta.len(),
                self.family.eta_dim()
            )));
        }
        Ok(eta)
    }

    pub fn density_network(&self) -> DensityNetwork {
        let count = self.flow.count.unwrap_or_else(|| default_layer_count(self.family.dim()));
        let mut kinds = Vec::with_capacity(count + 1);
        if self.flow.affine_first {
            kinds.push(LayerKind::Affine);
        }
        kinds.extend(std::iter::repeat_n(self.flow.kind, count));
        DensityNetwork::new(&kinds, self.family.support())
    }

    /// The training problem of a resolved config.
    pub fn problem(&self) -> Result<Problem> {
        let net = self.density_network();
        match self.train.mode {
            Mode::Nf => Problem::nf(self.family.clone(), net, self.target_eta()?),
            Mode::Efn => {
                let prior = match &self.corpus {
                    Some(c) => EtaPrior::Empirical {
                        etas: corpus_etas(&self.family, &c.dir)?,
                    },
                    None => self.prior.clone().unwrap_or_else(|| EtaPrior::default_for(&self.family)),
                };
                Problem::efn(
                    self.family.clone(),
                    prior,
                    net,
                    self.param_net.depth,
                    self.param_net.scaler,
                    self.seed,
                )
            }
        }
    }
}
