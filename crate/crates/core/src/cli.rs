//! The `efn` subcommands as library functions, so they can be driven from
//! tests as well as from the binary.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{corpus_etas, dataset_files, RunConfig};
use crate::data::{lgp_natural_params, simulate_corpus, SpikeDataset};
use crate::error::{Error, Result};
use crate::eval::{self, decision_boundary, default_targets, mmd_test, write_decision_csv, DecisionRow, EtaMetrics};
use crate::families::FamilySpec;
use crate::training::trainer::tags;
use crate::training::{stream, Checkpoint, Mode, StopReason, TrainLogRecord, Trainer};

/// Options shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct CommonArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Process exit status for an error: 2 for usage, config and input
/// problems, 3 for numeric failure during training, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NumericFailure { .. } => 3,
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::Malformed { .. }
        | Error::Checkpoint(_)
        | Error::Intractable(_) => 2,
        _ => 1,
    }
}

/// Load, apply command-line overrides and materialize defaults.
pub fn load_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.paths.run_dir = out.clone();
    }
    cfg.resolve()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

/// Write the fully-defaulted config next to the run's outputs.
pub fn write_effective_config(cfg: &RunConfig) -> Result<PathBuf> {
    create_dir(&cfg.paths.run_dir)?;
    let path = cfg.paths.run_dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?)?;
    Ok(path)
}

/// Paths produced by a training run.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub metrics: PathBuf,
    pub stop: StopReason,
    pub records: Vec<TrainLogRecord>,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    write_effective_config(cfg)?;
    create_dir(&cfg.paths.log_dir())?;
    create_dir(&cfg.paths.checkpoint_dir())?;
    let mut trainer = Trainer::new(cfg.problem()?, cfg.train.clone())?;
    if let (Some(dir), Mode::Efn) = (&cfg.eval.held_out_dir, cfg.train.mode) {
        trainer = trainer.with_held_out(corpus_etas(&cfg.family, dir)?)?;
    }
    let log_path = cfg.paths.log_path();
    let ckpt_path = cfg.paths.checkpoint_path();
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    let mut records = Vec::new();
    let result = trainer.run(|r| {
        serde_json::to_writer(&mut log, r)?;
        log.write_all(b"\n")?;
        log.flush()?;
        records.push(r.clone());
        Ok(())
    });
    let stop = match result {
        Ok(stop) => stop,
        Err(e @ Error::NumericFailure { .. }) => {
            // the trainer still holds the last good state
            Checkpoint::from_trainer(&trainer).save(&ckpt_path)?;
            log::error!("{e}; last good state saved to {}", ckpt_path.display());
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    Checkpoint::from_trainer(&trainer).save(&ckpt_path)?;
    let metrics = final_metrics(cfg, &trainer)?;
    let metrics_path = cfg.paths.run_dir.join("metrics.csv");
    eval::write_metrics_csv(&metrics_path, &metrics)?;
    Ok(TrainOutput {
        checkpoint: ckpt_path,
        log: log_path,
        metrics: metrics_path,
        stop,
        records,
    })
}

/// Metrics for `eta` under `theta`, honouring the eval toggles. `index`
/// selects the fixed evaluation stream.
pub fn metrics_at(cfg: &RunConfig, trainer: &Trainer, theta: &[f64], eta: &[f64], index: u64) -> Result<EtaMetrics> {
    let (family, net) = (&trainer.problem.family, &trainer.problem.net);
    let mut rng = stream(cfg.seed, 0, tags::EVAL, index);
    let w = net.base_sample(cfg.eval.mc_samples, &mut rng);
    let mut m = eval::eta_metrics(family, net, theta, eta, w)?;
    if !cfg.eval.r2 {
        m.r2 = None;
        m.intercept = None;
    }
    if !cfg.eval.kl {
        m.kl = None;
        m.kl_se = None;
    }
    if cfg.eval.mmd && family.tractable() {
        let mut rng = stream(cfg.seed, 0, tags::MMD, index);
        let (q, _) = net.sample(theta, cfg.eval.mmd_samples, &mut rng)?;
        let p = family.exact_sample(eta, cfg.eval.mmd_samples, &mut rng)?;
        m.mmd_p = Some(mmd_test(&q, &p, cfg.eval.mmd_permutations, &mut rng)?.p_value);
    }
    Ok(m)
}

fn final_metrics(cfg: &RunConfig, trainer: &Trainer) -> Result<Vec<EtaMetrics>> {
    let thetas = trainer.problem.thetas(&trainer.params, &trainer.held_out)?;
    trainer
        .held_out
        .iter()
        .enumerate()
        .map(|(j, eta)| metrics_at(cfg, trainer, thetas.row(j), eta, j as u64))
        .collect()
}

fn load_eta_file(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        msg: format!("expected a JSON array of numbers: {e}"),
    })
}

/// Posterior samples for one η from a trained EFN, with no optimization.
/// Writes `lookup_samples.csv` (`z0..z{D-1},log_q`) and returns its path.
pub fn cmd_lookup(cfg: &RunConfig) -> Result<PathBuf> {
    let ck_path = cfg.lookup.checkpoint.clone().unwrap_or_else(|| cfg.paths.checkpoint_path());
    let ck = Checkpoint::load_for(&ck_path, &cfg.family)?;
    if ck.problem.mode() != Mode::Efn {
        return Err(Error::Config("lookup needs an efn checkpoint".into()));
    }
    let family = &ck.problem.family;
    let eta = match (&cfg.lookup.dataset, &cfg.lookup.eta_file) {
        (Some(ds), None) => lgp_natural_params(family, &SpikeDataset::load(ds)?)?,
        (None, Some(f)) => load_eta_file(f)?,
        _ => return Err(Error::Config("lookup needs exactly one of dataset or eta_file".into())),
    };
    if eta.len() != family.eta_dim() {
        return Err(Error::InvalidArgument(format!(
            "η has {} entries, checkpoint family expects {}",
            eta.len(),
            family.eta_dim()
        )));
    }
    let start = Instant::now();
    let theta = ck.problem.thetas(&ck.params, std::slice::from_ref(&eta))?;
    let mut rng = stream(cfg.seed, 0, tags::EVAL, 0);
    let (z, log_q) = ck.problem.net.sample(theta.row(0), cfg.lookup.n_samples, &mut rng)?;
    log::info!("lookup of {} samples took {:?}", cfg.lookup.n_samples, start.elapsed());
    create_dir(&cfg.paths.run_dir)?;
    let path = cfg.paths.run_dir.join("lookup_samples.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    let d = z.cols();
    let header: Vec<String> = (0..d).map(|i| format!("z{i}")).chain(["log_q".to_string()]).collect();
    writeln!(f, "{}", header.join(","))?;
    for (i, lq) in log_q.iter().enumerate() {
        let row: Vec<String> = z.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(f, "{},{lq}", row.join(","))?;
    }
    f.flush()?;
    Ok(path)
}

/// One row of the EFN-versus-NF comparison.
#[derive(Clone, Debug)]
pub struct CompareRow {
    pub eta_id: usize,
    pub method: &'static str,
    pub metrics: EtaMetrics,
}

/// Train (or reload) the NF run of every config in `compare.nf_dir` and
/// evaluate it and the EFN at that run's η. Writes `compare.csv` and
/// `compare_summary.csv`.
pub fn cmd_compare(cfg: &RunConfig) -> Result<Vec<CompareRow>> {
    let nf_dir = cfg
        .compare
        .nf_dir
        .as_ref()
        .ok_or_else(|| Error::Config("compare.nf_dir is required".into()))?;
    let mut configs: Vec<PathBuf> = std::fs::read_dir(nf_dir)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", nf_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    configs.sort();
    if configs.is_empty() {
        return Err(Error::Config(format!("no NF configs in {}", nf_dir.display())));
    }
    let ck_path = cfg.compare.checkpoint.clone().unwrap_or_else(|| cfg.paths.checkpoint_path());
    let efn = Checkpoint::load_for(&ck_path, &cfg.family)?.into_trainer();
    let mut rows = Vec::new();
    for (j, path) in configs.iter().enumerate() {
        let nf_cfg = RunConfig::load(path)?.resolve()?;
        if nf_cfg.family != cfg.family {
            return Err(Error::Config(format!("{} uses a different family", path.display())));
        }
        if nf_cfg.train.mode != Mode::Nf {
            return Err(Error::Config(format!("{} is not an nf-mode config", path.display())));
        }
        let nf_ck = nf_cfg.paths.checkpoint_path();
        let nf = match Checkpoint::load_for(&nf_ck, &cfg.family) {
            Ok(ck) if ck.config == nf_cfg.train => ck.into_trainer(),
            _ => {
                cmd_train(&nf_cfg)?;
                Checkpoint::load_for(&nf_ck, &cfg.family)?.into_trainer()
            }
        };
        let eta = nf.held_out[0].clone();
        let theta = efn.problem.thetas(&efn.params, std::slice::from_ref(&eta))?;
        rows.push(CompareRow {
            eta_id: j,
            method: "efn",
            metrics: metrics_at(cfg, &efn, theta.row(0), &eta, j as u64)?,
        });
        rows.push(CompareRow {
            eta_id: j,
            method: "nf",
            metrics: metrics_at(cfg, &nf, &nf.params, &eta, j as u64)?,
        });
    }
    create_dir(&cfg.paths.run_dir)?;
    write_compare_csv(&cfg.paths.run_dir.join("compare.csv"), &rows)?;
    write_compare_summary(&cfg.paths.run_dir.join("compare_summary.csv"), &rows)?;
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_compare_csv(path: &Path, rows: &[CompareRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "eta_id,method,r2,intercept,kl,kl_se,elbo,elbo_se,mmd_p")?;
    for r in rows {
        let m = &r.metrics;
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.eta_id,
            r.method,
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

fn write_compare_summary(path: &Path, rows: &[CompareRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "method,n,r2_median,kl_median,elbo_median")?;
    for method in ["efn", "nf"] {
        let ms: Vec<&EtaMetrics> = rows.iter().filter(|r| r.method == method).map(|r| &r.metrics).collect();
        let med = |v: Vec<f64>| if v.is_empty() { None } else { Some(eval::median(&v)) };
        writeln!(
            f,
            "{method},{},{},{},{}",
            ms.len(),
            opt(med(ms.iter().filter_map(|m| m.r2).collect())),
            opt(med(ms.iter().filter_map(|m| m.kl).collect())),
            eval::median(&ms.iter().map(|m| m.elbo).collect::<Vec<_>>())
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Parse a JSONL training log; a bad line is reported with its number.
pub fn read_train_log(path: &Path) -> Result<Vec<TrainLogRecord>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Decision boundary from the configured logs; writes `decision.csv`.
pub fn cmd_decide(cfg: &RunConfig) -> Result<Vec<DecisionRow>> {
    let efn_path = cfg
        .decide
        .efn_log
        .as_ref()
        .ok_or_else(|| Error::Config("decide.efn_log is required".into()))?;
    if cfg.decide.nf_logs.is_empty() {
        return Err(Error::Config("decide.nf_logs is empty".into()));
    }
    let efn = read_train_log(efn_path)?;
    let nf = cfg
        .decide
        .nf_logs
        .iter()
        .map(|p| read_train_log(p))
        .collect::<Result<Vec<_>>>()?;
    let targets = match &cfg.decide.targets {
        Some(t) => t.clone(),
        None => default_targets(&efn, cfg.decide.n_targets),
    };
    let rows = decision_boundary(&efn, &nf, &targets)?;
    create_dir(&cfg.paths.run_dir)?;
    write_decision_csv(&cfg.paths.run_dir.join("decision.csv"), &rows)?;
    Ok(rows)
}

/// Synthetic datasets from the configured GP prior, written as
/// `datasets/dataset_NNN.json` under the run directory.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let FamilySpec::LgpPosterior { gp } = &cfg.family else {
        return Err(Error::Config("simulate needs the lgp_posterior family".into()));
    };
    let dir = cfg.paths.run_dir.join("datasets");
    create_dir(&dir)?;
    write_effective_config(cfg)?;
    let corpus = simulate_corpus(gp, cfg.simulate.n_datasets, cfg.simulate.n_trials, cfg.seed)?;
    corpus
        .iter()
        .enumerate()
        .map(|(i, ds)| {
            let path = dir.join(format!("dataset_{i:03}.json"));
            ds.save(&path)?;
            Ok(path)
        })
        .collect()
}

/// Files in `dir` that parse as datasets, for callers that want to check
/// a simulated corpus.
pub fn load_corpus(dir: &Path) -> Result<Vec<SpikeDataset>> {
    dataset_files(dir)?.iter().map(|p| SpikeDataset::load(p)).collect()
}
