use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::families::special::{solve_lower, transpose};
use crate::flows::layers::{FlowLayer, LayerKind};
use crate::flows::support::{SupportKind, SupportTransform};
use crate::tape::{Tape, Var};
use crate::tensor::{Layout, Tensor};

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

/// Default number of flow layers for a `d`-dimensional family.
pub fn default_layer_count(d: usize) -> usize {
    if d >= 20 {
        d
    } else {
        20
    }
}

/// Standard-normal base, a stack of layers and a support transform.
/// θ is held outside the network so the same structure serves both the
/// NF (θ optimized directly) and EFN (θ = f_φ(η)) modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityNetwork {
    layers: Vec<FlowLayer>,
    support: SupportTransform,
    param_len: usize,
}

/// Samples pushed through the network on a tape.
#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    /// `[n, D]` support-space samples.
    pub z: Var,
    /// `log z` when the support is positive.
    pub log_z: Option<Var>,
    /// `[n]` exact log density of each sample.
    pub log_q: Var,
}

impl DensityNetwork {
    pub fn new(kinds: &[LayerKind], support: SupportTransform) -> Self {
        let dim = support.latent_dim();
        let mut offset = 0;
        let layers = kinds
            .iter()
            .map(|&kind| {
                let l = FlowLayer { kind, dim, offset };
                offset += l.param_len();
                l
            })
            .collect();
        Self {
            layers,
            support,
            param_len: offset,
        }
    }

    /// An affine layer followed by `n` layers of `kind`.
    pub fn affine_then(kind: LayerKind, n: usize, support: SupportTransform) -> Self {
        let mut kinds = vec![LayerKind::Affine];
        kinds.extend(std::iter::repeat_n(kind, n));
        Self::new(&kinds, support)
    }

    pub fn latent_dim(&self) -> usize {
        self.support.latent_dim()
    }

    pub fn support_dim(&self) -> usize {
        self.support.support_dim
    }

    pub fn support(&self) -> &SupportTransform {
        &self.support
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    /// |θ|.
    pub fn param_len(&self) -> usize {
        self.param_len
    }

    pub fn layout(&self) -> Layout {
        let mut layout = Layout::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.describe(i, &mut layout);
        }
        layout
    }

    pub fn init_theta<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut theta = vec![0.0; self.param_len];
        for l in &self.layers {
            l.init_raw(rng, &mut theta[l.offset..l.offset + l.param_len()]);
        }
        theta
    }

    /// Draw `n` base points into an `[n, d]` tensor.
    pub fn base_sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let d = self.latent_dim();
        let data = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::matrix(n, d, data).expect("shape matches")
    }

    /// Push grouped base draws `w` (`[g * m, d]`) through the network with
    /// per-group parameters `theta` (`[g, P]`).
    /// `log_q = log q0(w) − Σ log|J| − log|J_support|`.
    pub fn forward(&self, tape: &mut Tape, theta: Var, w: Var) -> Result<NetOutput> {
        let d = self.latent_dim();
        let sq = tape.square(w)?;
        let sq = tape.sum_rows(sq)?;
        let log_q0 = tape.scale(sq, -0.5)?;
        let mut log_q = tape.shift(log_q0, -0.5 * d as f64 * LOG_2PI)?;
        let mut y = w;
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, ld) = layer.forward(tape, theta, y).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteSample { layer: i },
                other => other,
            })?;
            y = next;
            log_q = tape.sub(log_q, ld)?;
        }
        let out = self.support.forward(tape, y).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteSample {
                layer: self.layers.len(),
            },
            other => other,
        })?;
        if let Some(ld) = out.log_det {
            log_q = tape.sub(log_q, ld)?;
        }
        Ok(NetOutput {
            z: out.z,
            log_z: out.log_z,
            log_q,
        })
    }

    /// `n` samples and their exact log densities under parameters `theta`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        theta: &[f64],
        n: usize,
        rng: &mut R,
    ) -> Result<(Tensor, Vec<f64>)> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        self.check_theta(theta)?;
        let w = self.base_sample(n, rng);
        self.push_forward(theta, w)
    }

    /// Deterministic counterpart of [`sample`](Self::sample) for given base draws.
    pub fn push_forward(&self, theta: &[f64], w: Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let th = tape.constant(Tensor::matrix(1, theta.len(), theta.to_vec())?)?;
        let wv = tape.constant(w)?;
        let out = self.forward(&mut tape, th, wv)?;
        let z = tape.value(out.z).clone();
        let n = z.rows();
        let z = z.reshape(vec![n, self.support_dim()])?;
        Ok((z, tape.value(out.log_q).data().to_vec()))
    }

    /// Exact log density at arbitrary support points. Only affine layers
    /// have a closed-form inverse.
    pub fn log_density(&self, theta: &[f64], z: &Tensor) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        if let Some((i, l)) = self
            .layers
            .iter()
            .enumerate()
            .find(|(_, l)| l.kind != LayerKind::Affine)
        {
            return Err(Error::InverseUnavailable {
                layer: i,
                kind: l.kind.name(),
            });
        }
        let d = self.latent_dim();
        let (n, cols) = z.dims2();
        if cols != self.support_dim() {
            return Err(crate::error::shape_err(
                "log_density",
                format!("expected {} columns, got {cols}", self.support_dim()),
            ));
        }
        let factors: Vec<_> = self
            .layers
            .iter()
            .map(|l| l.affine_factors(theta).expect("affine layer"))
            .collect();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (mut y, mut lq) = self.support.inverse_point(z.row(i))?;
            lq = -lq;
            for (l, b) in factors.iter().rev() {
                let centred: Vec<f64> = y.iter().zip(b).map(|(a, c)| a - c).collect();
                y = solve_lower(l, d, &centred);
                lq -= (0..d).map(|k| l[k * d + k].ln()).sum::<f64>();
            }
            let q0 = -0.5 * y.iter().map(|v| v * v).sum::<f64>() - 0.5 * d as f64 * LOG_2PI;
            out.push(q0 + lq);
        }
        Ok(out)
    }

    /// Mean and covariance of the latent Gaussian of an affine-only network.
    pub fn affine_gaussian(&self, theta: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let d = self.latent_dim();
        let mut mean = vec![0.0; d];
        let mut a = identity(d);
        for l in &self.layers {
            let (lm, b) = l.affine_factors(theta)?;
            mean = matvec(&lm, &mean, d).iter().zip(&b).map(|(x, y)| x + y).collect();
            a = crate::families::special::matmul(&lm, &a, d);
        }
        let cov = crate::families::special::matmul(&a, &transpose(&a, d), d);
        Some((mean, cov))
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_len {
            return Err(Error::InvalidArgument(format!(
                "theta has {} entries, network needs {}",
                theta.len(),
                self.param_len
            )));
        }
        Ok(())
    }
}

impl SupportTransform {
    pub fn identity(d: usize) -> Self {
        Self::new(SupportKind::Identity, d)
    }
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

fn matvec(a: &[f64], x: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| (0..d).map(|j| a[i * d + j] * x[j]).sum())
        .collect()
}
