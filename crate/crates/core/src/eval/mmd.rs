use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::median;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MmdResult {
    pub mmd2_unbiased: f64,
    pub p_value: f64,
    pub n_permutations: usize,
    pub bandwidth: f64,
}

/// Unbiased MMD² between the first `nx` and remaining pooled indices.
fn mmd2(k: &[f64], n: usize, idx: &[usize], nx: usize) -> f64 {
    let ny = idx.len() - nx;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for a in 0..idx.len() {
        let row = &k[idx[a] * n..(idx[a] + 1) * n];
        for b in (a + 1)..idx.len() {
            let v = row[idx[b]];
            match (a < nx, b < nx) {
                (true, true) => sxx += v,
                (false, false) => syy += v,
                _ => sxy += v,
            }
        }
    }
    let (nxf, nyf) = (nx as f64, ny as f64);
    2.0 * sxx / (nxf * (nxf - 1.0)) + 2.0 * syy / (nyf * (nyf - 1.0)) - 2.0 * sxy / (nxf * nyf)
}

/// Gaussian-kernel two-sample test with the median-distance bandwidth and
/// permutation p-value `(1 + #{perm ≥ observed}) / (1 + n_permutations)`.
pub fn mmd_test<R: Rng + ?Sized>(x: &Tensor, y: &Tensor, n_permutations: usize, rng: &mut R) -> Result<MmdResult> {
    let (nx, d) = x.dims2();
    let (ny, d2) = y.dims2();
    if d != d2 {
        return Err(Error::InvalidArgument("samples differ in dimension".into()));
    }
    if nx < 20 || ny < 20 {
        return Err(Error::InvalidArgument("MMD test needs at least 20 samples per side".into()));
    }
    let n = nx + ny;
    let point = |i: usize| if i < nx { x.row(i) } else { y.row(i - nx) };
    let mut d2m = vec![0.0; n * n];
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = point(i).iter().zip(point(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d2m[i * n + j] = s;
            d2m[j * n + i] = s;
            dists.push(s.sqrt());
        }
    }
    let bandwidth = median(&dists);
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidArgument("median pairwise distance is zero".into()));
    }
    let k: Vec<f64> = d2m.iter().map(|s| (-s / (2.0 * bandwidth * bandwidth)).exp()).collect();
    let mut idx: Vec<usize> = (0..n).collect();
    let observed = mmd2(&k, n, &idx, nx);
    let mut exceed = 0usize;
    for _ in 0..n_permutations {
        idx.shuffle(rng);
        if mmd2(&k, n, &idx, nx) >= observed {
            exceed += 1;
        }
    }
    Ok(MmdResult {
        mmd2_unbiased: observed,
        p_value: (1 + exceed) as f64 / (1 + n_permutations) as f64,
        n_permutations,
        bandwidth,
    })
}
