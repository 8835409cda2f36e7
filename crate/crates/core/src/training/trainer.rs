use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, EtaMetrics};
use crate::families::{EtaPrior, FamilySpec};
use crate::flows::DensityNetwork;
use crate::param_net::{build_spec, default_depth, InputScaler, ParamNetSpec};
use crate::tensor::Tensor;
use crate::training::adam::AdamState;
use crate::training::objective::{self, Params};

/// Tags separating the random streams used by training.
pub mod tags {
    pub const ETA: u64 = 1;
    pub const W: u64 = 2;
    pub const INIT: u64 = 3;
    pub const HELD_OUT: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const SCALER: u64 = 6;
    pub const MMD: u64 = 7;
}

/// Independent stream for `(seed, iteration, tag, index)`.
pub fn stream(seed: u64, iteration: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&iteration.to_le_bytes());
    key[16..24].copy_from_slice(&tag.to_le_bytes());
    key[24..].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Efn,
    Nf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// η draws per iteration.
    pub k: usize,
    /// z draws per η.
    pub m: usize,
    pub lr: f64,
    /// Multiply the learning rate by `decay_factor` every `decay_every`
    /// iterations; 0 disables the schedule.
    pub decay_every: u64,
    pub decay_factor: f64,
    pub max_iters: u64,
    pub min_iters: u64,
    pub plateau_eps: f64,
    /// Number of logged evaluations per plateau window.
    pub plateau_window: usize,
    pub seed: u64,
    pub eval_every: u64,
    pub held_out_etas: usize,
    /// Monte-Carlo samples per held-out η at each evaluation.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Efn,
            k: 100,
            m: 1000,
            lr: 1e-3,
            decay_every: 0,
            decay_factor: 1.0,
            max_iters: 100_000,
            min_iters: 50_000,
            plateau_eps: 1e-3,
            plateau_window: 1000,
            seed: 0,
            eval_every: 100,
            held_out_etas: 100,
            eval_samples: 1000,
        }
    }
}

impl TrainConfig {
    /// Learning rate used for the step taken at iteration `it`.
    pub fn lr_at(&self, it: u64) -> f64 {
        match it.checked_div(self.decay_every) {
            Some(n) => self.lr * self.decay_factor.powi(n.min(i32::MAX as u64) as i32),
            None => self.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.m < 2 {
            return bad("m must be at least 2");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must be in (0, 1]");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if self.plateau_window == 0 {
            return bad("plateau_window must be at least 1");
        }
        if self.eval_samples < 10 {
            return bad("eval_samples must be at least 10");
        }
        if self.mode == Mode::Efn && self.held_out_etas == 0 {
            return bad("held_out_etas must be at least 1");
        }
        Ok(())
    }
}

/// What is trained: φ of a parameter network over the η prior, or θ for a
/// single fixed η.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Model {
    Efn { param_net: ParamNetSpec },
    Nf { eta: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub family: FamilySpec,
    pub prior: EtaPrior,
    pub net: DensityNetwork,
    pub model: Model,
}

impl Problem {
    /// EFN problem. The input scaler, when requested, is fitted to 10⁴
    /// draws of p(η) from a stream fixed by `seed`.
    pub fn efn(
        family: FamilySpec,
        prior: EtaPrior,
        net: DensityNetwork,
        depth: Option<usize>,
        scaler: bool,
        seed: u64,
    ) -> Result<Self> {
        family.validate()?;
        prior.validate(&family)?;
        let depth = depth.unwrap_or_else(|| default_depth(family.dim()));
        let mut spec = build_spec(family.eta_dim(), net.param_len(), depth)?;
        if scaler {
            let mut rng = stream(seed, 0, tags::SCALER, 0);
            let draws = (0..10_000)
                .map(|_| prior.sample(&family, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            spec.scaler = Some(InputScaler::fit(&draws)?);
        }
        Ok(Self {
            family,
            prior,
            net,
            model: Model::Efn { param_net: spec },
        })
    }

    pub fn nf(family: FamilySpec, net: DensityNetwork, eta: Vec<f64>) -> Result<Self> {
        family.validate()?;
        if eta.len() != family.eta_dim() {
            return Err(Error::InvalidArgument(format!(
                "η has {} entries, family expects {}",
                eta.len(),
                family.eta_dim()
            )));
        }
        let prior = EtaPrior::default_for(&family);
        Ok(Self {
            family,
            prior,
            net,
            model: Model::Nf { eta },
        })
    }

    pub fn mode(&self) -> Mode {
        match self.model {
            Model::Efn { .. } => Mode::Efn,
            Model::Nf { .. } => Mode::Nf,
        }
    }

    pub fn param_len(&self) -> usize {
        match &self.model {
            Model::Efn { param_net } => param_net.param_len(),
            Model::Nf { .. } => self.net.param_len(),
        }
    }

    pub fn params<'a>(&'a self, values: &'a [f64]) -> Params<'a> {
        match &self.model {
            Model::Efn { param_net } => Params::Efn {
                spec: param_net,
                phi: values,
            },
            Model::Nf { .. } => Params::Nf { theta: values },
        }
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, 0, tags::INIT, 0);
        match &self.model {
            Model::Efn { param_net } => param_net.init(&mut rng),
            Model::Nf { .. } => self.net.init_theta(&mut rng),
        }
    }

    /// θ rows for `etas`.
    pub fn thetas(&self, values: &[f64], etas: &[Vec<f64>]) -> Result<Tensor> {
        match &self.model {
            Model::Efn { param_net } => param_net.forward(values, etas),
            Model::Nf { .. } => {
                let rows = vec![values.to_vec(); etas.len()];
                Tensor::from_rows(&rows)
            }
        }
    }
}

/// One line of the JSONL training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainLogRecord {
    pub iter: u64,
    pub wall_s: f64,
    pub loss: f64,
    pub elbo_mean: f64,
    pub elbo_median: f64,
    pub r2_median: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Plateau,
    MaxIters,
}

/// Optimization state. Random draws at iteration `i` come from streams
/// keyed by `(seed, i)`, so a restored trainer continues exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub problem: Problem,
    pub config: TrainConfig,
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub iteration: u64,
    /// Seconds spent in optimization steps (evaluation excluded).
    pub wall_s: f64,
    pub held_out: Vec<Vec<f64>>,
    pub last_loss: f64,
    pub elbo_history: Vec<f64>,
}

impl Trainer {
    pub fn new(problem: Problem, mut config: TrainConfig) -> Result<Self> {
        if problem.mode() == Mode::Nf && config.k != 1 {
            log::warn!("nf mode trains a single η; k = {} coerced to 1", config.k);
            config.k = 1;
        }
        config.mode = problem.mode();
        config.validate()?;
        if !(1e-5..=1e-3).contains(&config.lr) {
            log::warn!("lr = {} is outside the default range [1e-5, 1e-3]", config.lr);
        }
        let held_out = match &problem.model {
            Model::Efn { .. } => {
                let mut rng = stream(config.seed, 0, tags::HELD_OUT, 0);
                (0..config.held_out_etas)
                    .map(|_| problem.prior.sample(&problem.family, &mut rng))
                    .collect::<Result<Vec<_>>>()?
            }
            Model::Nf { eta } => vec![eta.clone()],
        };
        let params = problem.init_params(config.seed);
        Ok(Self {
            adam: AdamState::new(params.len()),
            params,
            problem,
            config,
            iteration: 0,
            wall_s: 0.0,
            held_out,
            last_loss: f64::NAN,
            elbo_history: Vec::new(),
        })
    }

    /// Replace the held-out η set used for logging.
    pub fn with_held_out(mut self, etas: Vec<Vec<f64>>) -> Result<Self> {
        if etas.is_empty() || etas.iter().any(|e| e.len() != self.problem.family.eta_dim()) {
            return Err(Error::InvalidArgument("held-out η set is empty or mis-sized".into()));
        }
        self.held_out = etas;
        Ok(self)
    }

    /// η batch and base draws for iteration `it`.
    pub fn batch(&self, it: u64) -> Result<(Vec<Vec<f64>>, Tensor)> {
        let seed = self.config.seed;
        let etas = match &self.problem.model {
            Model::Efn { .. } => {
                let mut rng = stream(seed, it, tags::ETA, 0);
                (0..self.config.k)
                    .map(|_| self.problem.prior.sample(&self.problem.family, &mut rng))
                    .collect::<Result<Vec<_>>>()?
            }
            Model::Nf { eta } => vec![eta.clone()],
        };
        let (m, d) = (self.config.m, self.problem.net.latent_dim());
        let mut data = Vec::with_capacity(etas.len() * m * d);
        for k in 0..etas.len() {
            let mut rng = stream(seed, it, tags::W, k as u64);
            data.extend(self.problem.net.base_sample(m, &mut rng).into_data());
        }
        let w = Tensor::matrix(etas.len() * m, d, data)?;
        Ok((etas, w))
    }

    /// One Adam step. On numeric failure the state is left untouched.
    pub fn step(&mut self) -> Result<f64> {
        let start = Instant::now();
        let it = self.iteration;
        let (etas, w) = self.batch(it)?;
        let params = self.problem.params(&self.params);
        let result = objective::loss_and_grad(&self.problem.family, &self.problem.net, params, &etas, w.clone());
        let eval = match result {
            Ok(e) if e.loss.is_finite() => e,
            Ok(_) | Err(Error::NonFinite { .. })
            | Err(Error::NonFiniteSample { .. })
            | Err(Error::Domain(_)) => {
                let eta_index = objective::locate_failure(&self.problem.family, &self.problem.net, params, &etas, &w);
                return Err(Error::NumericFailure {
                    iteration: it,
                    eta_index,
                });
            }
            Err(e) => return Err(e),
        };
        self.adam.step(&mut self.params, &eval.grad, self.config.lr_at(it));
        self.iteration += 1;
        self.last_loss = eval.loss;
        self.wall_s += start.elapsed().as_secs_f64();
        Ok(eval.loss)
    }

    /// Metrics on the held-out η set with fixed evaluation streams.
    pub fn evaluate(&self) -> Result<Vec<EtaMetrics>> {
        let thetas = self.problem.thetas(&self.params, &self.held_out)?;
        self.held_out
            .iter()
            .enumerate()
            .map(|(j, eta)| {
                let mut rng = stream(self.config.seed, 0, tags::EVAL, j as u64);
                let w = self.problem.net.base_sample(self.config.eval_samples, &mut rng);
                eval::eta_metrics(&self.problem.family, &self.problem.net, thetas.row(j), eta, w)
            })
            .collect()
    }

    pub fn record(&self) -> Result<TrainLogRecord> {
        let metrics = self.evaluate()?;
        let elbos: Vec<f64> = metrics.iter().map(|m| m.elbo).collect();
        let r2s: Vec<f64> = metrics.iter().filter_map(|m| m.r2).collect();
        Ok(TrainLogRecord {
            iter: self.iteration,
            wall_s: self.wall_s,
            loss: self.last_loss,
            elbo_mean: elbos.iter().sum::<f64>() / elbos.len() as f64,
            elbo_median: eval::median(&elbos),
            r2_median: (!r2s.is_empty()).then(|| eval::median(&r2s)),
        })
    }

    fn plateaued(&self) -> bool {
        let w = self.config.plateau_window;
        let h = &self.elbo_history;
        if self.iteration < self.config.min_iters || h.len() < 2 * w {
            return false;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let last = mean(&h[h.len() - w..]);
        let prev = mean(&h[h.len() - 2 * w..h.len() - w]);
        last - prev < self.config.plateau_eps
    }

    /// Optimize until the held-out ELBO plateaus or `max_iters` is reached,
    /// passing each log record to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&TrainLogRecord) -> Result<()>) -> Result<StopReason> {
        while self.iteration < self.config.max_iters {
            self.step()?;
            if self.iteration % self.config.eval_every == 0 || self.iteration == self.config.max_iters {
                let rec = self.record()?;
                sink(&rec)?;
                self.elbo_history.push(rec.elbo_mean);
                if self.plateaued() {
                    return Ok(StopReason::Plateau);
                }
            }
        }
        Ok(StopReason::MaxIters)
    }
}
