//! Bijective layers with analytic log-determinants.
//!
//! Layers act on grouped batches: `z` is `[g * m, d]` holding `g` groups of
//! `m` samples and `theta` is `[g, P]` with one parameter row per group. The
//! single-distribution case is `g = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Layout, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// `z ↦ L z + b`, `L` lower triangular with positive diagonal.
    Affine,
    /// `z ↦ z + û tanh(wᵀz + b)`.
    Planar,
    /// `z ↦ z + β̂ (z − z₀) / (α + ‖z − z₀‖)`.
    Radial,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Affine => "affine",
            LayerKind::Planar => "planar",
            LayerKind::Radial => "radial",
        }
    }

    pub fn param_len(self, d: usize) -> usize {
        match self {
            LayerKind::Affine => d * (d - 1) / 2 + 2 * d,
            LayerKind::Planar => 2 * d + 1,
            LayerKind::Radial => d + 2,
        }
    }
}

/// One layer of a density network: its kind and where its raw parameters
/// start inside θ.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowLayer {
    pub kind: LayerKind,
    pub dim: usize,
    pub offset: usize,
}

/// Row-major positions of the strictly-lower entries of a `d x d` matrix.
pub(crate) fn strict_lower_positions(d: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(d * (d - 1) / 2);
    for i in 0..d {
        for j in 0..i {
            out.push(i * d + j);
        }
    }
    out
}

fn diag_positions(d: usize) -> Vec<usize> {
    (0..d).map(|i| i * d + i).collect()
}

/// `[g] -> [g * m]`, each entry repeated `m` times.
pub(crate) fn repeat_vec(tape: &mut Tape, v: Var, m: usize) -> Result<Var> {
    let g = tape.value(v).len();
    let col = tape.reshape(v, vec![g, 1])?;
    let rep = tape.repeat_rows(col, m)?;
    tape.reshape(rep, vec![g * m])
}

impl FlowLayer {
    pub fn param_len(&self) -> usize {
        self.kind.param_len(self.dim)
    }

    /// Append this layer's named segments to `layout`.
    pub fn describe(&self, index: usize, layout: &mut Layout) {
        let d = self.dim;
        let name = |s: &str| format!("{index}.{}.{s}", self.kind.name());
        match self.kind {
            LayerKind::Affine => {
                layout.push(name("lower"), vec![d * (d - 1) / 2]);
                layout.push(name("log_diag"), vec![d]);
                layout.push(name("shift"), vec![d]);
            }
            LayerKind::Planar => {
                layout.push(name("u"), vec![d]);
                layout.push(name("w"), vec![d]);
                layout.push(name("b"), vec![1]);
            }
            LayerKind::Radial => {
                layout.push(name("z0"), vec![d]);
                layout.push(name("alpha"), vec![1]);
                layout.push(name("beta"), vec![1]);
            }
        }
    }

    /// Raw parameters at which the layer is the identity map (affine), or a
    /// small random perturbation of it (planar, radial) so gradients do not
    /// start at a saddle.
    pub fn init_raw<R: rand::Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        use rand_distr::{Distribution, Normal};
        let d = self.dim;
        let small = Normal::new(0.0, 0.1).expect("valid normal");
        match self.kind {
            LayerKind::Affine => out.iter_mut().for_each(|v| *v = 0.0),
            LayerKind::Planar => {
                for v in &mut out[..2 * d] {
                    *v = small.sample(rng);
                }
                out[2 * d] = 0.0;
            }
            LayerKind::Radial => {
                for v in &mut out[..d] {
                    *v = small.sample(rng);
                }
                out[d] = 0.0;
                // softplus(raw) = 1 = α, so β̂ starts at zero
                out[d + 1] = (std::f64::consts::E - 1.0).ln();
            }
        }
    }

    /// Push grouped samples through the layer. Returns the transformed
    /// batch and per-sample `log|det J|`, shape `[g * m]`.
    pub fn forward(&self, tape: &mut Tape, theta: Var, z: Var) -> Result<(Var, Var)> {
        let g = tape.value(theta).rows();
        let rows = tape.value(z).rows();
        if g == 0 || rows % g != 0 || tape.value(z).cols() != self.dim {
            return Err(crate::error::shape_err(
                "flow layer",
                format!("theta {:?}, z {:?}", tape.shape(theta), tape.shape(z)),
            ));
        }
        let m = rows / g;
        match self.kind {
            LayerKind::Affine => self.affine(tape, theta, z, m),
            LayerKind::Planar => self.planar(tape, theta, z),
            LayerKind::Radial => self.radial(tape, theta, z, m),
        }
    }

    fn affine(&self, tape: &mut Tape, theta: Var, z: Var, m: usize) -> Result<(Var, Var)> {
        let d = self.dim;
        let n_lower = d * (d - 1) / 2;
        let lower = tape.slice_cols(theta, self.offset, n_lower)?;
        let log_diag = tape.slice_cols(theta, self.offset + n_lower, d)?;
        let shift = tape.slice_cols(theta, self.offset + n_lower + d, d)?;
        let diag = tape.exp(log_diag)?;
        let off = tape.scatter_cols(lower, strict_lower_positions(d), d * d)?;
        let on = tape.scatter_cols(diag, diag_positions(d), d * d)?;
        let l = tape.add(off, on)?;
        let lz = tape.grouped_matmul(z, l, d)?;
        let out = tape.grouped_add(lz, shift)?;
        let ld = tape.logabsdet_tri(l, d)?;
        let ld = repeat_vec(tape, ld, m)?;
        Ok((out, ld))
    }

    fn planar(&self, tape: &mut Tape, theta: Var, z: Var) -> Result<(Var, Var)> {
        let d = self.dim;
        let u = tape.slice_cols(theta, self.offset, d)?;
        let w = tape.slice_cols(theta, self.offset + d, d)?;
        let b = tape.slice_cols(theta, self.offset + 2 * d, 1)?;
        let u_hat = planar_u_hat(tape, u, w)?;

        let pre = tape.grouped_row_dot(z, w)?;
        let g = tape.value(b).rows();
        let b = tape.reshape(b, vec![g])?;
        let pre = tape.grouped_add(pre, b)?;
        let h = tape.tanh(pre)?;
        let out = tape.grouped_outer_add(z, u_hat, h)?;

        // det = 1 + (1 − h²) wᵀû, positive by construction of û
        let wu_hat = tape.mul(w, u_hat)?;
        let wu_hat = tape.sum_rows(wu_hat)?;
        let ld = tape.planar_log_det(h, wu_hat)?;
        Ok((out, ld))
    }

    fn radial(&self, tape: &mut Tape, theta: Var, z: Var, m: usize) -> Result<(Var, Var)> {
        let d = self.dim;
        let z0 = tape.slice_cols(theta, self.offset, d)?;
        let a_raw = tape.slice_cols(theta, self.offset + d, 1)?;
        let b_raw = tape.slice_cols(theta, self.offset + d + 1, 1)?;
        let g = tape.value(theta).rows();
        let a_raw = tape.reshape(a_raw, vec![g])?;
        let b_raw = tape.reshape(b_raw, vec![g])?;
        let alpha = tape.exp(a_raw)?;
        let sp = tape.softplus(b_raw)?;
        let beta = tape.sub(sp, alpha)?;

        let z0_rep = tape.repeat_rows(z0, m)?;
        let diff = tape.sub(z, z0_rep)?;
        let sq = tape.square(diff)?;
        let r2 = tape.sum_rows(sq)?;
        let r = tape.sqrt(r2)?;
        let alpha_r = repeat_vec(tape, alpha, m)?;
        let beta_r = repeat_vec(tape, beta, m)?;
        let denom = tape.add(alpha_r, r)?;
        let h = tape.recip(denom)?;
        let bh = tape.mul(beta_r, h)?;
        let step = tape.mul_col(diff, bh)?;
        let out = tape.add(z, step)?;

        // log det = (d − 1) log(1 + βh) + log(1 + βh − β r h²)
        let one_bh = tape.shift(bh, 1.0)?;
        let brh2 = tape.mul(bh, h)?;
        let brh2 = tape.mul(brh2, r)?;
        let second = tape.sub(one_bh, brh2)?;
        for v in [one_bh, second] {
            if let Some(bad) = tape.value(v).data().iter().position(|&x| !(x > 0.0)) {
                return Err(Error::Domain(format!(
                    "radial Jacobian factor not positive at sample {bad}"
                )));
            }
        }
        let l1 = tape.log(one_bh)?;
        let l1 = tape.scale(l1, (d - 1) as f64)?;
        let l2 = tape.log(second)?;
        let ld = tape.add(l1, l2)?;
        Ok((out, ld))
    }

    /// Evaluate the layer at a single point with plain parameters.
    pub fn forward_point(&self, theta: &[f64], z: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut tape = Tape::new();
        let th = tape.constant(Tensor::matrix(1, theta.len(), theta.to_vec())?)?;
        let zv = tape.constant(Tensor::matrix(1, z.len(), z.to_vec())?)?;
        let (out, ld) = self.forward(&mut tape, th, zv)?;
        Ok((tape.value(out).data().to_vec(), tape.value(ld).item()))
    }

    /// Effective lower-triangular factor and shift of an affine layer.
    pub fn affine_factors(&self, theta: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        if self.kind != LayerKind::Affine {
            return None;
        }
        let d = self.dim;
        let n_lower = d * (d - 1) / 2;
        let raw = &theta[self.offset..self.offset + self.param_len()];
        let mut l = vec![0.0; d * d];
        for (k, &pos) in strict_lower_positions(d).iter().enumerate() {
            l[pos] = raw[k];
        }
        for i in 0..d {
            l[i * d + i] = raw[n_lower + i].exp();
        }
        Some((l, raw[n_lower + d..].to_vec()))
    }
}

/// `û = u + (m(wᵀu) − wᵀu) w / ‖w‖²` with `m(a) = −1 + softplus(a)`, so that
/// `wᵀû > −1`. Rows with `w = 0` keep `û = u`.
fn planar_u_hat(tape: &mut Tape, u: Var, w: Var) -> Result<Var> {
    let wu = tape.mul(w, u)?;
    let wu = tape.sum_rows(wu)?;
    let mwu = tape.softplus(wu)?;
    let mwu = tape.shift(mwu, -1.0)?;
    let gap = tape.sub(mwu, wu)?;
    let w2 = tape.square(w)?;
    let norm2 = tape.sum_rows(w2)?;
    let guard: Vec<f64> = tape
        .value(norm2)
        .data()
        .iter()
        .map(|&v| if v == 0.0 { 1.0 } else { 0.0 })
        .collect();
    let norm2 = if guard.iter().any(|&v| v != 0.0) {
        let gv = tape.constant(Tensor::vector(guard))?;
        tape.add(norm2, gv)?
    } else {
        norm2
    };
    let coef = tape.div(gap, norm2)?;
    let corr = tape.mul_col(w, coef)?;
    tape.add(u, corr)
}
