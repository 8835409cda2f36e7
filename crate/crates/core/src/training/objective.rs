//! The stochastic objective `E[log q(z) − ηᵀt(z)]` over η and z batches.

use rand::Rng;

use crate::error::{Error, Result};
use crate::families::FamilySpec;
use crate::flows::DensityNetwork;
use crate::param_net::ParamNetSpec;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-sample `(log q(z), ηᵀt(z))` for grouped θ rows (`[g, P]`), η rows
/// (`[g, |η|]`) and base draws (`[g * m, d]`).
pub fn sample_terms(
    tape: &mut Tape,
    family: &FamilySpec,
    net: &DensityNetwork,
    theta: Var,
    etas: Var,
    w: Var,
) -> Result<(Var, Var)> {
    let out = net.forward(tape, theta, w)?;
    let target = family.target_on_tape(tape, etas, &out)?;
    Ok((out.log_q, target))
}

/// Mean of `log q − ηᵀt` over all rows.
pub fn loss_on_tape(
    tape: &mut Tape,
    family: &FamilySpec,
    net: &DensityNetwork,
    theta: Var,
    etas: Var,
    w: Var,
) -> Result<Var> {
    let (log_q, target) = sample_terms(tape, family, net, theta, etas, w)?;
    let diff = tape.sub(log_q, target)?;
    tape.mean(diff)
}

/// What is being optimized: φ of a parameter network, or θ directly.
#[derive(Clone, Copy, Debug)]
pub enum Params<'a> {
    Efn { spec: &'a ParamNetSpec, phi: &'a [f64] },
    Nf { theta: &'a [f64] },
}

impl Params<'_> {
    fn values(&self) -> &[f64] {
        match self {
            Params::Efn { phi, .. } => phi,
            Params::Nf { theta } => theta,
        }
    }

    /// Record θ rows for `etas` with the optimized vector as the leaf.
    fn record_theta(&self, tape: &mut Tape, etas: &[Vec<f64>], leaf: Var) -> Result<Var> {
        match self {
            Params::Efn { spec, .. } => {
                let x = tape.constant(spec.prepare_inputs(etas)?)?;
                spec.forward_on_tape(tape, leaf, x)
            }
            Params::Nf { theta } => {
                let row = tape.reshape(leaf, vec![1, theta.len()])?;
                tape.repeat_rows(row, etas.len())
            }
        }
    }
}

/// Loss value and gradient with respect to the optimized vector.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Evaluate the objective for `etas` with base draws `w` (`[k * m, d]`,
/// block `k` paired with `etas[k]`).
pub fn loss_and_grad(
    family: &FamilySpec,
    net: &DensityNetwork,
    params: Params<'_>,
    etas: &[Vec<f64>],
    w: Tensor,
) -> Result<LossEval> {
    let mut tape = Tape::new();
    let leaf = tape.param(Tensor::vector(params.values().to_vec()))?;
    let theta = params.record_theta(&mut tape, etas, leaf)?;
    let eta_t = tape.constant(Tensor::from_rows(etas)?)?;
    let wv = tape.constant(w)?;
    let loss = loss_on_tape(&mut tape, family, net, theta, eta_t, wv)?;
    let grads = tape.backward(loss)?;
    let grad = grads.wrt(leaf).into_data();
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            node: leaf.id(),
            op: "gradient",
        });
    }
    Ok(LossEval {
        loss: tape.value(loss).item(),
        grad,
    })
}

/// Loss only, without recording parameters as leaves.
pub fn loss_value(
    family: &FamilySpec,
    net: &DensityNetwork,
    params: Params<'_>,
    etas: &[Vec<f64>],
    w: Tensor,
) -> Result<f64> {
    let mut tape = Tape::new();
    let leaf = tape.constant(Tensor::vector(params.values().to_vec()))?;
    let theta = params.record_theta(&mut tape, etas, leaf)?;
    let eta_t = tape.constant(Tensor::from_rows(etas)?)?;
    let wv = tape.constant(w)?;
    let loss = loss_on_tape(&mut tape, family, net, theta, eta_t, wv)?;
    Ok(tape.value(loss).item())
}

/// The objective with `m` base draws per η taken in order from `rng`.
pub fn efn_loss<R: Rng + ?Sized>(
    family: &FamilySpec,
    net: &DensityNetwork,
    params: Params<'_>,
    etas: &[Vec<f64>],
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    let w = net.base_sample(etas.len() * m, rng);
    loss_value(family, net, params, etas, w)
}

/// Index of the first η whose loss term is not finite.
pub fn locate_failure(
    family: &FamilySpec,
    net: &DensityNetwork,
    params: Params<'_>,
    etas: &[Vec<f64>],
    w: &Tensor,
) -> Option<usize> {
    let m = w.rows() / etas.len().max(1);
    let d = w.cols();
    (0..etas.len()).find(|&k| {
        let block = w.data()[k * m * d..(k + 1) * m * d].to_vec();
        let wk = Tensor::matrix(m, d, block).expect("block shape");
        !matches!(loss_and_grad(family, net, params, &etas[k..k + 1], wk), Ok(e) if e.loss.is_finite())
    })
}
