//! The parameter network `θ = f_φ(η)`: a tanh MLP with a linear output.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Layout, Tensor};

/// Per-coordinate standardization `(η − mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaler {
    /// Mean and standard deviation of `draws`; constant coordinates keep
    /// scale 1.
    pub fn fit(draws: &[Vec<f64>]) -> Result<Self> {
        let n = draws.len();
        if n < 2 {
            return Err(Error::InvalidArgument("scaler needs at least two draws".into()));
        }
        let d = draws[0].len();
        let mut mean = vec![0.0; d];
        for row in draws {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in draws {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .iter()
            .map(|s| {
                let sd = (s / (n - 1) as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, eta: &[f64]) -> Vec<f64> {
        eta.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamNetSpec {
    /// Layer sizes from `|η|` to `|θ|` inclusive.
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub scaler: Option<InputScaler>,
}

/// `max(4, round(√D))`.
pub fn default_depth(d: usize) -> usize {
    ((d as f64).sqrt().round() as usize).max(4)
}

/// Sizes interpolated linearly (rounded) from `eta_dim` to `theta_len`
/// over `depth` layers.
pub fn build_spec(eta_dim: usize, theta_len: usize, depth: usize) -> Result<ParamNetSpec> {
    if theta_len == 0 {
        return Err(Error::InvalidArgument("density network has no parameters".into()));
    }
    if eta_dim == 0 || depth < 2 {
        return Err(Error::InvalidArgument("parameter network needs |η| ≥ 1 and depth ≥ 2".into()));
    }
    let (a, b) = (eta_dim as f64, theta_len as f64);
    let layer_sizes = (0..depth)
        .map(|k| (a + (b - a) * k as f64 / (depth - 1) as f64).round() as usize)
        .collect();
    Ok(ParamNetSpec {
        layer_sizes,
        scaler: None,
    })
}

impl ParamNetSpec {
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("non-empty")
    }

    /// `W{k}` (`[in, out]`) then `b{k}` (`[out]`) per layer.
    pub fn layout(&self) -> Layout {
        let mut l = Layout::new();
        for (k, w) in self.layer_sizes.windows(2).enumerate() {
            l.push(format!("W{k}"), vec![w[0], w[1]]);
            l.push(format!("b{k}"), vec![w[1]]);
        }
        l
    }

    pub fn param_len(&self) -> usize {
        self.layout().total_len()
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let layout = self.layout();
        let mut phi = vec![0.0; layout.total_len()];
        for seg in layout.segments() {
            if seg.shape.len() == 2 {
                let (fi, fo) = (seg.shape[0] as f64, seg.shape[1] as f64);
                let a = (6.0 / (fi + fo)).sqrt();
                let u = Uniform::new_inclusive(-a, a).expect("valid range");
                for v in &mut phi[seg.range()] {
                    *v = u.sample(rng);
                }
            }
        }
        phi
    }

    /// Scaled inputs as a `[k, |η|]` tensor.
    pub fn prepare_inputs(&self, etas: &[Vec<f64>]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = etas
            .iter()
            .map(|e| {
                if e.len() != self.input_dim() {
                    return Err(Error::InvalidArgument(format!(
                        "η has {} entries, parameter network expects {}",
                        e.len(),
                        self.input_dim()
                    )));
                }
                Ok(match &self.scaler {
                    Some(s) => s.apply(e),
                    None => e.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Tensor::from_rows(&rows)
    }

    /// `[k, |η|]` prepared inputs to `[k, |θ|]` outputs.
    pub fn forward_on_tape(&self, tape: &mut Tape, phi: Var, inputs: Var) -> Result<Var> {
        let layout = self.layout();
        let n_layers = self.layer_sizes.len() - 1;
        let mut h = inputs;
        for k in 0..n_layers {
            let ws = layout.segment(2 * k);
            let bs = layout.segment(2 * k + 1);
            let w = tape.slice(phi, ws.offset, ws.shape.clone())?;
            let b = tape.slice(phi, bs.offset, bs.shape.clone())?;
            let hw = tape.matmul(h, w)?;
            h = tape.add_row(hw, b)?;
            if k + 1 < n_layers {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// θ for each η.
    pub fn forward(&self, phi: &[f64], etas: &[Vec<f64>]) -> Result<Tensor> {
        if phi.len() != self.param_len() {
            return Err(Error::InvalidArgument("φ length does not match the spec".into()));
        }
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(phi.to_vec()))?;
        let x = tape.constant(self.prepare_inputs(etas)?)?;
        let out = self.forward_on_tape(&mut tape, p, x)?;
        Ok(tape.value(out).clone())
    }
}
