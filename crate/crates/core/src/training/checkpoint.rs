//! Versioned checkpoint files: `EFNCKPT1`, the SHA-256 of the body in hex,
//! a newline, then the JSON body.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::families::FamilySpec;
use crate::training::adam::AdamState;
use crate::training::trainer::{Problem, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"EFNCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config_hash: String,
    pub family_hash: String,
    pub problem: Problem,
    pub config: TrainConfig,
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub iteration: u64,
    pub last_loss: Option<f64>,
    pub held_out: Vec<Vec<f64>>,
    pub elbo_history: Vec<f64>,
}

fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of everything that defines a run.
pub fn config_hash(problem: &Problem, config: &TrainConfig) -> String {
    let json = serde_json::to_vec(&(problem, config)).expect("config serializes");
    digest_hex(&json)
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            config_hash: config_hash(&t.problem, &t.config),
            family_hash: t.problem.family.hash(),
            problem: t.problem.clone(),
            config: t.config.clone(),
            params: t.params.clone(),
            adam: t.adam.clone(),
            iteration: t.iteration,
            last_loss: t.last_loss.is_finite().then_some(t.last_loss),
            held_out: t.held_out.clone(),
            elbo_history: t.elbo_history.clone(),
        }
    }

    /// Wall-clock time is not stored (it would break byte-identical
    /// checkpoints of identical runs), so a restored trainer counts from zero.
    pub fn into_trainer(self) -> Trainer {
        Trainer {
            problem: self.problem,
            config: self.config,
            params: self.params,
            adam: self.adam,
            iteration: self.iteration,
            wall_s: 0.0,
            held_out: self.held_out,
            last_loss: self.last_loss.unwrap_or(f64::NAN),
            elbo_history: self.elbo_history,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let body = serde_json::to_vec(self)?;
        let mut out = Vec::with_capacity(body.len() + 73);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(digest_hex(&body).as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let reject = |m: &str| Err(Error::Checkpoint(m.to_string()));
        if bytes.len() < 8 || !bytes.starts_with(b"EFNCKPT") {
            return reject("not a checkpoint file (bad magic)");
        }
        if &bytes[..8] != MAGIC {
            return reject("unsupported checkpoint version");
        }
        if bytes.len() < 73 || bytes[72] != b'\n' {
            return reject("truncated header");
        }
        let body = &bytes[73..];
        if digest_hex(body).as_bytes() != &bytes[8..72] {
            return reject("content hash mismatch (corrupt or truncated file)");
        }
        let ck: Checkpoint =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("invalid body: {e}")))?;
        if ck.family_hash != ck.problem.family.hash() {
            return reject("family hash does not match the stored family");
        }
        if ck.params.len() != ck.problem.param_len() {
            return reject("parameter vector length does not match the model");
        }
        Ok(ck)
    }

    /// Write to a sibling temporary file, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let name = path
            .file_name()
            .ok_or_else(|| Error::InvalidArgument("checkpoint path has no file name".into()))?;
        let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Load and require the stored family to match `family`.
    pub fn load_for(path: &Path, family: &FamilySpec) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.family_hash != family.hash() {
            return Err(Error::Checkpoint(format!(
                "family hash {} does not match expected {}",
                ck.family_hash,
                family.hash()
            )));
        }
        Ok(ck)
    }
}
