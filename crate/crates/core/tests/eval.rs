use efn::eval::{decision_boundary, kl_mc, mmd_test, r2_log_density, write_decision_csv, NStar};
use efn::families::{mvn_natural, FamilySpec};
use efn::flows::{DensityNetwork, LayerKind};
use efn::tensor::Tensor;
use efn::training::{stream, TrainLogRecord};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::{digamma, ln_gamma};

fn normals<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[test]
fn r2_with_matched_noise_is_one_half() {
    let mut total = 0.0;
    for rep in 0..50 {
        let mut rng = stream(rep, 0, 50, 0);
        let targets = normals(1000, &mut rng);
        let noise = normals(1000, &mut rng);
        let log_q: Vec<f64> = targets.iter().zip(&noise).map(|(t, e)| t + e).collect();
        total += r2_log_density(&log_q, &targets).unwrap().0;
    }
    let mean = total / 50.0;
    assert!((mean - 0.5).abs() <= 0.1, "mean r² {mean}");
    assert!(r2_log_density(&[1.0; 9], &[1.0; 9]).is_err());
}

fn affine_net(d: usize) -> DensityNetwork {
    DensityNetwork::new(&[LayerKind::Affine], FamilySpec::Mvn { dim: d }.support())
}

#[test]
fn kl_of_exact_gaussian_is_zero() {
    // θ: lower (1), log_diag (2), shift (2) → N(shift, LLᵀ)
    let theta = vec![0.4, 0.3, -0.2, 1.0, -0.5];
    let net = affine_net(2);
    let (mu, sigma) = net.affine_gaussian(&theta).unwrap();
    let eta = mvn_natural(&mu, &sigma).unwrap();
    let family = FamilySpec::Mvn { dim: 2 };
    let (kl, se) = kl_mc(&family, &net, &theta, &eta, 5000, &mut stream(0, 0, 51, 0)).unwrap();
    assert!(kl.abs() <= 3.0 * se + 1e-9, "kl {kl} ± {se}");
}

#[test]
fn kl_between_unit_gaussians_one_apart() {
    let net = affine_net(1);
    let family = FamilySpec::Mvn { dim: 1 };
    let eta = mvn_natural(&[1.0], &[1.0]).unwrap();
    let (kl, se) = kl_mc(&family, &net, &[0.0, 0.0], &eta, 20_000, &mut stream(0, 0, 52, 0)).unwrap();
    assert!((kl - 0.5).abs() <= 3.0 * se, "kl {kl} ± {se}");

    let lgp = FamilySpec::LgpPosterior {
        gp: efn::families::GpPrior::standard(),
    };
    assert!(kl_mc(&lgp, &affine_net(20), &[0.0; 230], &vec![0.0; lgp.eta_dim()], 10, &mut stream(0, 0, 52, 1)).is_err());
}

/// Monte-Carlo KL from the family's exact sampler and density against the
/// closed form `log B(β) − log B(α) + Σ (αᵢ − βᵢ)(ψ(αᵢ) − ψ(α₀))`.
#[test]
fn dirichlet_kl_matches_closed_form() {
    let family = FamilySpec::Dirichlet { dim: 2 };
    let (a, b) = ([2.0, 2.0], [3.0, 3.0]);
    let eta_a: Vec<f64> = a.iter().map(|v| v - 1.0).collect();
    let eta_b: Vec<f64> = b.iter().map(|v| v - 1.0).collect();
    let n = 50_000;
    let z = family.exact_sample(&eta_a, n, &mut stream(0, 0, 53, 0)).unwrap();
    let d: Vec<f64> = (0..n)
        .map(|i| {
            family.exact_log_density(&eta_a, z.row(i)).unwrap() - family.exact_log_density(&eta_b, z.row(i)).unwrap()
        })
        .collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let se = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt();
    let log_b = |x: &[f64]| x.iter().map(|&v| ln_gamma(v)).sum::<f64>() - ln_gamma(x.iter().sum());
    let a0: f64 = a.iter().sum();
    let closed = log_b(&b) - log_b(&a) + a.iter().zip(&b).map(|(ai, bi)| (ai - bi) * (digamma(*ai) - digamma(a0))).sum::<f64>();
    assert!((mean - closed).abs() <= 3.0 * se, "mc {mean} ± {se}, closed form {closed}");
}

fn gaussian_sample(n: usize, d: usize, shift: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(n, d, normals(n * d, rng).into_iter().map(|v| v + shift).collect()).unwrap()
}

#[test]
fn mmd_null_p_values_are_uniform() {
    let mut ps: Vec<f64> = (0..100)
        .map(|rep| {
            let mut rng = stream(rep, 0, 54, 0);
            let x = gaussian_sample(100, 2, 0.0, &mut rng);
            let y = gaussian_sample(100, 2, 0.0, &mut rng);
            mmd_test(&x, &y, 200, &mut rng).unwrap().p_value
        })
        .collect();
    ps.sort_by(f64::total_cmp);
    let n = ps.len() as f64;
    let ks = ps
        .iter()
        .enumerate()
        .map(|(i, &p)| (p - i as f64 / n).abs().max(((i + 1) as f64 / n - p).abs()))
        .fold(0.0, f64::max);
    assert!(ks <= 0.15, "KS distance {ks}");
}

#[test]
fn mmd_detects_shifted_gaussian() {
    let mut rng = stream(0, 0, 55, 0);
    let x = gaussian_sample(100, 2, 0.0, &mut rng);
    let y = gaussian_sample(100, 2, 3.0, &mut rng);
    let r = mmd_test(&x, &y, 500, &mut rng).unwrap();
    assert!(r.p_value < 0.01, "p {}", r.p_value);
    assert!(r.mmd2_unbiased > 0.0);

    let r0 = mmd_test(&x, &y, 0, &mut rng).unwrap();
    assert_eq!(r0.p_value, 1.0);

    let same = Tensor::matrix(30, 2, vec![1.0; 60]).unwrap();
    assert!(mmd_test(&same, &same, 10, &mut rng).is_err());
}

fn log(points: &[(f64, f64)]) -> Vec<TrainLogRecord> {
    points
        .iter()
        .enumerate()
        .map(|(i, &(wall_s, elbo))| TrainLogRecord {
            iter: (i as u64 + 1) * 100,
            wall_s,
            loss: -elbo,
            elbo_mean: elbo,
            elbo_median: elbo,
            r2_median: None,
        })
        .collect()
}

/// Hand-computed crossings (all logs monotone, so smoothing is inert):
///
/// | target | EFN crossing | NF crossings | mean | n*            |
/// |--------|--------------|--------------|------|---------------|
/// | 3      | 30 s         | 2 s, 4 s     | 3    | 10            |
/// | 7.5    | 80 s         | 4 s, 10 s    | 7    | ⌈11.43⌉ = 12  |
/// | 10     | 100 s        | none         |  -   | 1             |
/// | 11     | never        | none         |  -   | undefined     |
#[test]
fn decision_boundary_on_fixture_logs() {
    let efn = log(&(1..=10).map(|i| (10.0 * i as f64, i as f64)).collect::<Vec<_>>());
    let nf1 = log(&[(1.0, 2.0), (2.0, 4.0), (3.0, 6.0), (4.0, 8.0), (5.0, 9.0), (6.0, 9.0)]);
    let nf2 = log(&[(2.0, 1.0), (4.0, 3.0), (6.0, 5.0), (8.0, 7.0), (10.0, 8.0), (12.0, 8.5)]);
    let rows = decision_boundary(&efn, &[nf1, nf2], &[3.0, 7.5, 10.0, 11.0]).unwrap();

    assert_eq!(rows[0].t_efn_s, Some(30.0));
    assert_eq!(rows[0].t_nf_mean_s, Some(3.0));
    assert_eq!(rows[0].n_star, NStar::Finite(10));
    assert_eq!(rows[0].nf_reach_frac, 1.0);

    assert_eq!(rows[1].t_efn_s, Some(80.0));
    assert_eq!(rows[1].t_nf_mean_s, Some(7.0));
    assert_eq!(rows[1].n_star, NStar::Finite(12));

    // NF never gets there: always advantageous to use the EFN
    assert_eq!(rows[2].t_efn_s, Some(100.0));
    assert_eq!(rows[2].t_nf_mean_s, None);
    assert_eq!(rows[2].nf_reach_frac, 0.0);
    assert_eq!(rows[2].n_star, NStar::Finite(1));

    assert_eq!(rows[3].n_star, NStar::Undefined);

    for r in &rows {
        if let NStar::Finite(n) = r.n_star {
            assert!(n >= 1);
            assert!(r.t_efn_s.is_some());
        }
        assert!((0.0..=1.0).contains(&r.nf_reach_frac));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("decision.csv");
    write_decision_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "target,T_efn_s,t_nf_mean_s,nf_reach_frac,n_star");
    assert_eq!(lines[1], "3,30,3,1,10");
    assert_eq!(lines[3], "10,100,,0,1");
    assert_eq!(lines[4], "11,,,0,undefined");
}

#[test]
fn lone_spike_does_not_count_as_a_crossing() {
    let efn = log(&[(10.0, 1.0), (20.0, 2.0), (30.0, 3.0), (40.0, 4.0), (50.0, 5.0)]);
    let spiky = log(&[(1.0, 1.0), (2.0, 1.0), (3.0, 9.0), (4.0, 1.0), (5.0, 1.0), (6.0, 1.0)]);
    let rows = decision_boundary(&efn, &[spiky], &[4.0]).unwrap();
    assert_eq!(rows[0].t_nf_mean_s, None);
    assert_eq!(rows[0].n_star, NStar::Finite(1));
    assert!(decision_boundary(&efn, &[], &[4.0]).is_err());
}
