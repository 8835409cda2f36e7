//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line before asserting. The machine budget assumes one core, so every test
//! holds a global lock and wall-clock limits are measured without contention.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use efn::cli::{self, CommonArgs};
use efn::data::{lgp_natural_params, simulate_corpus};
use efn::eval::{self, decision_boundary, default_targets, median, mmd_test, NStar};
use efn::families::special::{cholesky, cholesky_inverse, cholesky_logdet};
use efn::families::{mvn_moments, EtaPrior, FamilySpec, GpPrior};
use efn::flows::{DensityNetwork, FlowLayer, LayerKind, SupportKind, SupportTransform};
use efn::param_net::build_spec;
use efn::program::{finite_diff_check, Bound};
use efn::tape::{Tape, Var};
use efn::tensor::{ParamVector, Tensor};
use efn::training::objective::{loss_on_tape, loss_value};
use efn::training::{efn_loss, stream, Checkpoint, Mode, Model, Params, Problem, TrainConfig, TrainLogRecord, Trainer};
use efn::Result;
use rand::Rng;
use rand_distr::StandardNormal;

static HEAVY: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written straight to the stderr handle so the line survives the test
/// harness's output capture.
fn report(n: &str, pass: bool, details: String) {
    let line = format!("criterion {n}: {} ({details})\n", if pass { "PASS" } else { "FAIL" });
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    assert!(pass, "criterion {n} failed: {details}");
}

fn normals(n: usize, sd: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Median loss over the last tenth of a run below that of the first tenth.
fn loss_decreased(losses: &[f64]) -> bool {
    let n = (losses.len() / 10).max(1);
    median(&losses[losses.len() - n..]) < median(&losses[..n])
}

// ---- 1: gradient oracle ----

fn tensor(rng: &mut impl Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Worst relative error of reverse-mode gradients against central
/// differences, over every entry of every input.
fn fd_check(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.param(x.clone()).unwrap()).collect();
        let r = f(&mut t, &vs).unwrap();
        (t, vs, r)
    };
    let (tape, vars, root) = eval(inputs);
    let grads = tape.backward(root).unwrap();
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for (k, input) in inputs.iter().enumerate() {
        let ad = grads.wrt(vars[k]);
        for i in 0..input.len() {
            let mut up = inputs.to_vec();
            up[k].data_mut()[i] += h;
            let mut down = inputs.to_vec();
            down[k].data_mut()[i] -= h;
            let (tu, _, ru) = eval(&up);
            let (td, _, rd) = eval(&down);
            let fd = (tu.value(ru).item() - td.value(rd).item()) / (2.0 * h);
            worst = worst.max((ad.data()[i] - fd).abs() / (fd.abs() + 1e-8));
        }
    }
    worst
}

fn sum_sq(t: &mut Tape, v: Var) -> Result<Var> {
    let s = t.square(v)?;
    t.sum(s)
}

type Maker = Box<dyn Fn(&mut rand_chacha::ChaCha8Rng) -> Vec<Tensor>>;
type Body = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn shapes(list: &[(Vec<usize>, f64, f64)]) -> Maker {
    let list = list.to_vec();
    Box::new(move |r| list.iter().map(|(s, lo, hi)| tensor(r, s.clone(), *lo, *hi)).collect())
}

fn primitive_cases() -> Vec<(&'static str, Maker, Body)> {
    let m34 = || shapes(&[(vec![3, 4], -1.0, 1.0), (vec![3, 4], -1.0, 1.0)]);
    let pos = |n: usize, lo: f64| shapes(&[(vec![n], lo, 3.0)]);
    vec![
        ("add", m34(), Box::new(|t, v| { let y = t.add(v[0], v[1])?; sum_sq(t, y) })),
        ("sub", m34(), Box::new(|t, v| { let y = t.sub(v[0], v[1])?; sum_sq(t, y) })),
        ("mul", m34(), Box::new(|t, v| { let y = t.mul(v[0], v[1])?; sum_sq(t, y) })),
        ("div", shapes(&[(vec![3, 4], -1.0, 1.0), (vec![3, 4], 0.5, 2.0)]),
            Box::new(|t, v| { let y = t.div(v[0], v[1])?; sum_sq(t, y) })),
        ("neg", m34(), Box::new(|t, v| { let y = t.neg(v[0])?; let y = t.mul(y, v[1])?; t.sum(y) })),
        ("scale", m34(), Box::new(|t, v| { let y = t.scale(v[0], -2.5)?; sum_sq(t, y) })),
        ("shift", m34(), Box::new(|t, v| { let y = t.shift(v[0], 0.7)?; sum_sq(t, y) })),
        ("scalar_broadcast", shapes(&[(vec![3, 4], -1.0, 1.0), (vec![], 0.5, 1.0)]),
            Box::new(|t, v| { let y = t.mul(v[0], v[1])?; let y = t.add(y, v[1])?; sum_sq(t, y) })),
        ("add_row", shapes(&[(vec![3, 4], -1.0, 1.0), (vec![4], -1.0, 1.0)]),
            Box::new(|t, v| { let y = t.add_row(v[0], v[1])?; sum_sq(t, y) })),
        ("mul_col", shapes(&[(vec![3, 4], -1.0, 1.0), (vec![3], -1.0, 1.0)]),
            Box::new(|t, v| { let y = t.mul_col(v[0], v[1])?; sum_sq(t, y) })),
        ("matmul", shapes(&[(vec![3, 4], -1.0, 1.0), (vec![4, 2], -1.0, 1.0)]),
            Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; sum_sq(t, y) })),
        ("matvec", shapes(&[(vec![3, 4], -1.0, 1.0), (vec![4], -1.0, 1.0)]),
            Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; sum_sq(t, y) })),
        ("transpose", shapes(&[(vec![3, 4], -1.0, 1.0), (vec![4, 3], -1.0, 1.0)]),
            Box::new(|t, v| { let y = t.transpose(v[0])?; let y = t.mul(y, v[1])?; sum_sq(t, y) })),
        ("reshape", shapes(&[(vec![3, 4], -1.0, 1.0), (vec![2, 6], -1.0, 1.0)]),
            Box::new(|t, v| { let y = t.reshape(v[0], vec![2, 6])?; let y = t.mul(y, v[1])?; sum_sq(t, y) })),
        ("tanh", m34(), Box::new(|t, v| { let y = t.tanh(v[0])?; let y = t.mul(y, v[1])?; t.sum(y) })),
        ("exp", m34(), Box::new(|t, v| { let y = t.exp(v[0])?; let y = t.mul(y, v[1])?; t.sum(y) })),
        ("log", pos(5, 0.2), Box::new(|t, v| { let y = t.log(v[0])?; sum_sq(t, y) })),
        ("softplus", m34(), Box::new(|t, v| { let y = t.softplus(v[0])?; let y = t.mul(y, v[1])?; t.sum(y) })),
        ("square", m34(), Box::new(|t, v| { let y = t.square(v[0])?; let y = t.mul(y, v[1])?; t.sum(y) })),
        ("sqrt", pos(5, 0.2), Box::new(|t, v| { let y = t.sqrt(v[0])?; sum_sq(t, y) })),
        ("recip", pos(5, 0.5), Box::new(|t, v| { let y = t.recip(v[0])?; t.sum(y) })),
        ("abs", shapes(&[(vec![5], 0.1, 1.0), (vec![5], -1.0, -0.1)]),
            Box::new(|t, v| { let a = t.abs(v[0])?; let b = t.abs(v[1])?; let y = t.mul(a, b)?; t.sum(y) })),
        ("lgamma", shapes(&[(vec![5], 0.3, 6.0)]), Box::new(|t, v| { let y = t.lgamma(v[0])?; sum_sq(t, y) })),
        ("mean", m34(), Box::new(|t, v| { let y = t.mul(v[0], v[1])?; let y = t.mean(y)?; t.square(y) })),
        ("sum_rows", m34(), Box::new(|t, v| { let y = t.mul(v[0], v[1])?; let y = t.sum_rows(y)?; sum_sq(t, y) })),
        ("dot", shapes(&[(vec![5], -1.0, 1.0), (vec![5], -1.0, 1.0)]),
            Box::new(|t, v| { let y = t.dot(v[0], v[1])?; t.square(y) })),
        ("slice", m34(), Box::new(|t, v| { let y = t.slice(v[0], 2, vec![2, 3])?; sum_sq(t, y) })),
        ("slice_cols", m34(), Box::new(|t, v| { let y = t.slice_cols(v[0], 1, 2)?; let y = t.tanh(y)?; sum_sq(t, y) })),
        ("repeat_rows", shapes(&[(vec![2, 3], -1.0, 1.0), (vec![6, 3], -1.0, 1.0)]),
            Box::new(|t, v| { let y = t.repeat_rows(v[0], 3)?; let y = t.mul(y, v[1])?; sum_sq(t, y) })),
        ("hcat", shapes(&[(vec![3, 2], -1.0, 1.0), (vec![3, 1], -1.0, 1.0)]),
            Box::new(|t, v| { let y = t.hcat(v[0], v[1])?; let y = t.tanh(y)?; let y = t.sum_rows(y)?; sum_sq(t, y) })),
        ("gather_cols", shapes(&[(vec![3, 3], 0.5, 1.5)]),
            Box::new(|t, v| { let y = t.gather_cols(v[0], vec![2, 0, 2, 1])?; let y = t.square(y)?; let y = t.mul(y, y)?; t.sum(y) })),
        ("scatter_cols", shapes(&[(vec![3, 2], 0.5, 1.5), (vec![3, 4], 0.5, 1.5)]),
            Box::new(|t, v| { let y = t.scatter_cols(v[0], vec![3, 1], 4)?; let y = t.mul(y, v[1])?; sum_sq(t, y) })),
        ("grouped_matmul", shapes(&[(vec![6, 3], -1.0, 1.0), (vec![2, 6], -1.0, 1.0)]),
            Box::new(|t, v| { let y = t.grouped_matmul(v[0], v[1], 2)?; let y = t.tanh(y)?; sum_sq(t, y) })),
        ("grouped_add", shapes(&[(vec![6, 2], -1.0, 1.0), (vec![2, 2], -1.0, 1.0)]),
            Box::new(|t, v| { let y = t.grouped_add(v[0], v[1])?; let y = t.tanh(y)?; sum_sq(t, y) })),
        ("grouped_mul", shapes(&[(vec![6], -1.0, 1.0), (vec![2], -1.0, 1.0)]),
            Box::new(|t, v| { let y = t.grouped_mul(v[0], v[1])?; let y = t.tanh(y)?; sum_sq(t, y) })),
        ("grouped_row_dot", shapes(&[(vec![6, 3], -1.0, 1.0), (vec![2, 3], -1.0, 1.0)]),
            Box::new(|t, v| { let y = t.grouped_row_dot(v[0], v[1])?; let y = t.tanh(y)?; sum_sq(t, y) })),
        ("grouped_outer_add", shapes(&[(vec![6, 3], -1.0, 1.0), (vec![2, 3], -1.0, 1.0), (vec![6], -1.0, 1.0)]),
            Box::new(|t, v| { let y = t.grouped_outer_add(v[0], v[1], v[2])?; let y = t.tanh(y)?; sum_sq(t, y) })),
        ("planar_log_det", shapes(&[(vec![6], -0.9, 0.9), (vec![2], 0.1, 2.0)]),
            Box::new(|t, v| { let y = t.planar_log_det(v[0], v[1])?; sum_sq(t, y) })),
        ("logabsdet_tri", shapes(&[(vec![2, 9], 0.5, 2.0)]),
            Box::new(|t, v| { let y = t.logabsdet_tri(v[0], 3)?; sum_sq(t, y) })),
        ("log1p_sum_exp", shapes(&[(vec![3, 4], -2.0, 2.0)]),
            Box::new(|t, v| { let y = t.log1p_sum_exp(v[0])?; sum_sq(t, y) })),
    ]
}

/// Central differences of the full objective with respect to every
/// parameter-network weight of a tiny EFN.
fn tiny_efn_error(family: FamilySpec, kinds: &[LayerKind], seed: u64) -> f64 {
    let net = DensityNetwork::new(kinds, family.support());
    let spec = build_spec(family.eta_dim(), net.param_len(), 3).unwrap();
    let mut rng = stream(seed, 0, 90, 0);
    let phi = normals(spec.param_len(), 0.3, &mut rng);
    let prior = EtaPrior::default_for(&family);
    let etas: Vec<Vec<f64>> = (0..2).map(|_| prior.sample(&family, &mut rng).unwrap()).collect();
    let w = net.base_sample(2 * 3, &mut rng);
    let inputs = spec.prepare_inputs(&etas).unwrap();
    let eta_t = Tensor::from_rows(&etas).unwrap();
    let program = |tape: &mut Tape, p: &Bound<'_>| -> Result<Var> {
        let x = tape.constant(inputs.clone())?;
        let theta = spec.forward_on_tape(tape, p.leaf, x)?;
        let e = tape.constant(eta_t.clone())?;
        let wv = tape.constant(w.clone())?;
        loss_on_tape(tape, &family, &net, theta, e, wv)
    };
    let params = ParamVector::from_values(spec.layout(), phi).unwrap();
    finite_diff_check(&program, &params, 1e-5).unwrap()
}

#[test]
fn criterion_1_gradient_oracle() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = stream(1, 0, 91, 0);
    let mut worst = ("", 0.0_f64);
    for (name, make, body) in primitive_cases() {
        for _ in 0..10 {
            let err = fd_check(&make(&mut rng), &*body);
            if err > worst.1 {
                worst = (name, err);
            }
        }
    }
    let losses = [
        tiny_efn_error(FamilySpec::Mvn { dim: 2 }, &[LayerKind::Affine, LayerKind::Planar], 1),
        tiny_efn_error(FamilySpec::Dirichlet { dim: 3 }, &[LayerKind::Affine, LayerKind::Planar, LayerKind::Radial], 2),
        tiny_efn_error(FamilySpec::HierDirichletPosterior { dim: 3, beta: 5.0 }, &[LayerKind::Affine, LayerKind::Planar], 3),
    ];
    let loss_worst = losses.iter().copied().fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    report(
        "1",
        worst.1 <= 1e-4 && loss_worst <= 1e-4 && secs < 60.0,
        format!(
            "worst primitive {} at {:.2e}, worst full-loss {:.2e}, {:.1} s",
            worst.0, worst.1, loss_worst, secs
        ),
    );
}

// ---- 2: exact-Gaussian recovery ----

/// KL(N(m1, s1) || N(m2, s2)) in closed form.
fn gauss_kl(m1: &[f64], s1: &[f64], m2: &[f64], s2: &[f64]) -> f64 {
    let d = m1.len();
    let l1 = cholesky(s1, d).unwrap();
    let l2 = cholesky(s2, d).unwrap();
    let p2 = cholesky_inverse(&l2, d);
    let mut tr = 0.0;
    let mut quad = 0.0;
    for i in 0..d {
        for j in 0..d {
            tr += p2[i * d + j] * s1[j * d + i];
            quad += (m2[i] - m1[i]) * p2[i * d + j] * (m2[j] - m1[j]);
        }
    }
    0.5 * (tr + quad - d as f64 + cholesky_logdet(&l2, d) - cholesky_logdet(&l1, d))
}

#[test]
fn criterion_2_exact_gaussian_recovery() {
    let _g = serial();
    let start = Instant::now();
    let family = FamilySpec::Mvn { dim: 5 };
    let eta = EtaPrior::default_for(&family).sample(&family, &mut stream(2, 0, 92, 0)).unwrap();
    let (mu, sigma) = mvn_moments(&eta, 5).unwrap();
    let net = DensityNetwork::new(&[LayerKind::Affine], family.support());
    let problem = Problem::nf(family, net.clone(), eta).unwrap();
    let config = TrainConfig {
        mode: Mode::Nf,
        k: 1,
        m: 1000,
        lr: 1e-2,
        max_iters: 5000,
        min_iters: 5000,
        seed: 2,
        eval_every: 500,
        eval_samples: 1000,
        ..Default::default()
    };
    let mut t = Trainer::new(problem, config).unwrap();
    let mut losses = Vec::new();
    while t.iteration < 5000 {
        losses.push(t.step().unwrap());
    }
    let (qm, qs) = net.affine_gaussian(&t.params).unwrap();
    let kl = gauss_kl(&qm, &qs, &mu, &sigma);
    let secs = start.elapsed().as_secs_f64();
    report(
        "2",
        kl <= 1e-2 && secs < 120.0 && loss_decreased(&losses),
        format!("closed-form KL {kl:.2e} after 5000 iterations, {secs:.1} s"),
    );
}

// ---- 3, 4b: Dirichlet EFN ----

struct DirichletRun {
    trainer: Trainer,
    secs: f64,
    losses: Vec<f64>,
}

fn dirichlet_run() -> &'static DirichletRun {
    static RUN: OnceLock<DirichletRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let family = FamilySpec::Dirichlet { dim: 5 };
        let net = DensityNetwork::affine_then(LayerKind::Planar, 20, family.support());
        let problem = Problem::efn(family.clone(), EtaPrior::default_for(&family), net, None, true, 3).unwrap();
        let config = TrainConfig {
            k: 25,
            m: 200,
            lr: 3e-3,
            max_iters: 20_000,
            min_iters: 20_000,
            seed: 3,
            held_out_etas: 20,
            eval_samples: 1000,
            ..Default::default()
        };
        let mut trainer = Trainer::new(problem, config).unwrap();
        let mut losses = Vec::with_capacity(20_000);
        while trainer.iteration < 20_000 {
            losses.push(trainer.step().unwrap());
        }
        DirichletRun {
            trainer,
            secs: start.elapsed().as_secs_f64(),
            losses,
        }
    })
}

#[test]
fn criterion_3_dirichlet_efn() {
    let _g = serial();
    let run = dirichlet_run();
    let start = Instant::now();
    let metrics = run.trainer.evaluate().unwrap();
    let r2: Vec<f64> = metrics.iter().map(|m| m.r2.unwrap()).collect();
    let kl: Vec<f64> = metrics.iter().map(|m| m.kl.unwrap()).collect();
    let (r2, kl) = (median(&r2), median(&kl));
    let secs = run.secs + start.elapsed().as_secs_f64();
    report(
        "3",
        r2 >= 0.9 && kl <= 0.1 && secs < 900.0 && loss_decreased(&run.losses),
        format!(
            "median r² {r2:.4}, median KL {kl:.4} over {} held-out η, {secs:.0} s",
            metrics.len()
        ),
    );
}

// ---- 4: MMD ----

#[test]
fn criterion_4a_mmd_null_calibration() {
    let _g = serial();
    let mut ps: Vec<f64> = (0..100)
        .map(|rep| {
            let mut rng = stream(4, 0, 94, rep);
            let x = Tensor::matrix(100, 2, normals(200, 1.0, &mut rng)).unwrap();
            let y = Tensor::matrix(100, 2, normals(200, 1.0, &mut rng)).unwrap();
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
    report("4a", ks <= 0.15, format!("KS distance {ks:.3} over 100 null tests"));
}

#[test]
fn criterion_4b_mmd_trained_dirichlet() {
    let _g = serial();
    let t = &dirichlet_run().trainer;
    let thetas = t.problem.thetas(&t.params, &t.held_out).unwrap();
    let ps: Vec<f64> = t
        .held_out
        .iter()
        .enumerate()
        .map(|(j, eta)| {
            let mut rng = stream(4, 0, 95, j as u64);
            let (q, _) = t.problem.net.sample(thetas.row(j), 100, &mut rng).unwrap();
            let p = t.problem.family.exact_sample(eta, 100, &mut rng).unwrap();
            mmd_test(&q, &p, 200, &mut rng).unwrap().p_value
        })
        .collect();
    let passing = ps.iter().filter(|&&p| p > 0.05).count();
    report(
        "4b",
        passing * 5 >= ps.len() * 4,
        format!("{passing}/{} η with p > 0.05", ps.len()),
    );
}

// ---- 5: flow correctness ----

fn numerical_log_det(layer: &FlowLayer, theta: &[f64], z: &[f64]) -> f64 {
    let d = z.len();
    let h = 1e-6;
    let mut jac = vec![0.0; d * d];
    for j in 0..d {
        let mut up = z.to_vec();
        let mut down = z.to_vec();
        up[j] += h;
        down[j] -= h;
        let fu = layer.forward_point(theta, &up).unwrap().0;
        let fd = layer.forward_point(theta, &down).unwrap().0;
        for i in 0..d {
            jac[i * d + j] = (fu[i] - fd[i]) / (2.0 * h);
        }
    }
    let mut log_det = 0.0;
    for c in 0..d {
        let p = (c..d)
            .max_by(|&a, &b| jac[a * d + c].abs().total_cmp(&jac[b * d + c].abs()))
            .unwrap();
        for k in 0..d {
            jac.swap(c * d + k, p * d + k);
        }
        let piv = jac[c * d + c];
        log_det += piv.abs().ln();
        for r in c + 1..d {
            let f = jac[r * d + c] / piv;
            for k in c..d {
                jac[r * d + k] -= f * jac[c * d + k];
            }
        }
    }
    log_det
}

fn identity(d: usize) -> SupportTransform {
    SupportTransform::new(SupportKind::Identity, d)
}

/// Trapezoid rule over the image of a base grid; the one-dimensional map is
/// monotone.
fn integral_1d(net: &DensityNetwork, theta: &[f64]) -> f64 {
    let n = 40_001;
    let w = Tensor::matrix(n, 1, (0..n).map(|i| -9.0 + 18.0 * i as f64 / (n - 1) as f64).collect()).unwrap();
    let (z, lq) = net.push_forward(theta, w).unwrap();
    let z = z.data();
    (0..n - 1)
        .map(|i| 0.5 * (z[i + 1] - z[i]) * (lq[i].exp() + lq[i + 1].exp()))
        .sum()
}

/// Shoelace area of each mapped base-grid cell times its mean corner
/// density.
fn integral_2d(net: &DensityNetwork, theta: &[f64]) -> f64 {
    let n = 401;
    let lim = 7.5;
    let coord = |i: usize| -lim + 2.0 * lim * i as f64 / (n - 1) as f64;
    let data: Vec<f64> = (0..n * n).flat_map(|k| [coord(k / n), coord(k % n)]).collect();
    let (z, lq) = net.push_forward(theta, Tensor::matrix(n * n, 2, data).unwrap()).unwrap();
    let at = |i: usize, j: usize| (z.row(i * n + j), lq[i * n + j].exp());
    let mut total = 0.0;
    for i in 0..n - 1 {
        for j in 0..n - 1 {
            let c = [at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1)];
            let area: f64 = (0..4).map(|k| c[k].0[0] * c[(k + 1) % 4].0[1] - c[(k + 1) % 4].0[0] * c[k].0[1]).sum();
            total += 0.5 * area.abs() * c.iter().map(|x| x.1).sum::<f64>() / 4.0;
        }
    }
    total
}

#[test]
fn criterion_5_flow_correctness() {
    let _g = serial();
    let kinds = [LayerKind::Planar, LayerKind::Radial, LayerKind::Affine];
    let mut rng = stream(5, 0, 96, 0);
    let mut worst = 0.0_f64;
    for i in 0..50 {
        let d = rng.random_range(1..=5);
        let net = DensityNetwork::new(&[kinds[i % 3]], identity(d));
        let theta = normals(net.param_len(), 0.8, &mut rng);
        let z = normals(d, 1.0, &mut rng);
        let (_, analytic) = net.layers()[0].forward_point(&theta, &z).unwrap();
        worst = worst.max((analytic - numerical_log_det(&net.layers()[0], &theta, &z)).abs());
    }

    let flow = [LayerKind::Affine, LayerKind::Planar, LayerKind::Radial, LayerKind::Planar];
    let net1 = DensityNetwork::new(&flow, identity(1));
    let net2 = DensityNetwork::new(&flow, identity(2));
    let i1 = integral_1d(&net1, &normals(net1.param_len(), 0.7, &mut rng));
    let i2 = integral_2d(&net2, &normals(net2.param_len(), 0.6, &mut rng));
    report(
        "5",
        worst <= 1e-6 && (i1 - 1.0).abs() <= 1e-3 && (i2 - 1.0).abs() <= 1e-3,
        format!("worst log-det error {worst:.2e} over 50 layers, D=1 integral {i1:.6}, D=2 integral {i2:.6}"),
    );
}

// ---- 6: estimator consistency ----

#[test]
fn criterion_6_estimator_consistency() {
    let _g = serial();
    let family = FamilySpec::Dirichlet { dim: 3 };
    let net = DensityNetwork::new(&[LayerKind::Affine, LayerKind::Planar, LayerKind::Planar], family.support());
    let problem = Problem::efn(family.clone(), EtaPrior::default_for(&family), net, None, true, 6).unwrap();
    let phi = problem.init_params(6);
    let params = problem.params(&phi);
    let draw = |n: usize, seed: u64, index: u64| -> Vec<Vec<f64>> {
        let mut rng = stream(seed, 0, 1, index);
        (0..n).map(|_| problem.prior.sample(&family, &mut rng).unwrap()).collect()
    };
    let batches: Vec<f64> = (0..200)
        .map(|b| efn_loss(&family, &problem.net, params, &draw(10, 61, b), 20, &mut stream(61, 0, 2, b)).unwrap())
        .collect();
    let mean = batches.iter().sum::<f64>() / 200.0;
    let se = (batches.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / 199.0 / 200.0).sqrt();
    // 10⁶ samples as 10 chunks of 1000 η × 100 z
    let reference = (0..10)
        .map(|c| efn_loss(&family, &problem.net, params, &draw(1000, 62, c), 100, &mut stream(62, 0, 2, c)).unwrap())
        .sum::<f64>()
        / 10.0;
    let z_score = (mean - reference).abs() / se;

    let Model::Efn { param_net } = &problem.model else { unreachable!() };
    let mut identical = true;
    for j in 0..10 {
        let eta = problem.prior.sample(&family, &mut stream(63, 0, 1, j)).unwrap();
        let theta = param_net.forward(&phi, std::slice::from_ref(&eta)).unwrap();
        let w = problem.net.base_sample(64, &mut stream(63, 0, 2, j));
        let e = loss_value(&family, &problem.net, params, std::slice::from_ref(&eta), w.clone()).unwrap();
        let n = loss_value(&family, &problem.net, Params::Nf { theta: theta.row(0) }, &[eta], w).unwrap();
        identical &= e.to_bits() == n.to_bits();
    }
    report(
        "6",
        z_score <= 3.0 && identical,
        format!("minibatch mean {mean:.4} vs 10⁶-sample {reference:.4} ({z_score:.2} SE); NF = EFN bitwise: {identical}"),
    );
}

// ---- 7, 8: LGP lookup and decision boundary ----

const LGP_ITERS: u64 = 30_000;
const LGP_EVAL_EVERY: u64 = 500;

struct LgpRun {
    efn_log: Vec<TrainLogRecord>,
    nf_logs: Vec<Vec<TrainLogRecord>>,
    efn_elbo: Vec<f64>,
    nf_elbo: Vec<f64>,
    secs: f64,
    losses_ok: bool,
}

fn lgp_run() -> &'static LgpRun {
    static RUN: OnceLock<LgpRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let gp = GpPrior::standard();
        let family = FamilySpec::LgpPosterior { gp: gp.clone() };
        // the training corpus is what the η prior generates; held-out
        // datasets come from a separate seed
        let held_out: Vec<Vec<f64>> = simulate_corpus(&gp, 10, 20, 12)
            .unwrap()
            .iter()
            .map(|d| lgp_natural_params(&family, d).unwrap())
            .collect();
        let net = DensityNetwork::affine_then(LayerKind::Planar, 10, family.support());
        let problem = Problem::efn(family.clone(), EtaPrior::default_for(&family), net.clone(), None, true, 7).unwrap();
        let config = TrainConfig {
            k: 10,
            m: 100,
            lr: 3e-4,
            decay_every: 10_000,
            decay_factor: 0.3,
            max_iters: LGP_ITERS,
            min_iters: LGP_ITERS,
            seed: 7,
            eval_every: LGP_EVAL_EVERY,
            held_out_etas: held_out.len(),
            eval_samples: 1000,
            ..Default::default()
        };
        let mut efn = Trainer::new(problem, config.clone()).unwrap().with_held_out(held_out.clone()).unwrap();
        let mut efn_log = Vec::new();
        let mut efn_losses = Vec::new();
        while efn.iteration < LGP_ITERS {
            efn_losses.push(efn.step().unwrap());
            if efn.iteration % LGP_EVAL_EVERY == 0 {
                efn_log.push(efn.record().unwrap());
            }
        }
        let efn_elbo: Vec<f64> = efn.evaluate().unwrap().iter().map(|m| m.elbo).collect();
        let mut losses_ok = loss_decreased(&efn_losses);

        // one NF per held-out dataset: same flow, iterations and schedule
        let mut nf_logs = Vec::new();
        let mut nf_elbo = Vec::new();
        for eta in &held_out {
            let problem = Problem::nf(family.clone(), net.clone(), eta.clone()).unwrap();
            let mut nf = Trainer::new(problem, TrainConfig { mode: Mode::Nf, k: 1, ..config.clone() }).unwrap();
            let mut log = Vec::new();
            let mut losses = Vec::new();
            while nf.iteration < LGP_ITERS {
                losses.push(nf.step().unwrap());
                if nf.iteration % LGP_EVAL_EVERY == 0 {
                    log.push(nf.record().unwrap());
                }
            }
            losses_ok &= loss_decreased(&losses);
            nf_elbo.push(nf.evaluate().unwrap()[0].elbo);
            nf_logs.push(log);
        }
        LgpRun {
            efn_log,
            nf_logs,
            efn_elbo,
            nf_elbo,
            secs: start.elapsed().as_secs_f64(),
            losses_ok,
        }
    })
}

#[test]
fn criterion_7_lgp_lookup() {
    let _g = serial();
    let run = lgp_run();
    let gaps: Vec<f64> = run.efn_elbo.iter().zip(&run.nf_elbo).map(|(e, n)| e - n).collect();
    let worst = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    let within = gaps.iter().filter(|&&g| g >= -0.5).count();
    let shown: Vec<String> = gaps.iter().map(|g| format!("{g:.2}")).collect();
    report(
        "7",
        within == gaps.len() && run.secs < 1800.0 && run.losses_ok,
        format!(
            "{within}/{} datasets with lookup ELBO >= NF ELBO - 0.5; gaps [{}], worst {worst:.2}; {:.0} s",
            gaps.len(),
            shown.join(", "),
            run.secs
        ),
    );
}

fn fixture_log(points: &[(f64, f64)]) -> Vec<TrainLogRecord> {
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

/// Type invariants of a decision row.
fn row_ok(r: &eval::DecisionRow) -> bool {
    let frac_ok = (0.0..=1.0).contains(&r.nf_reach_frac) && (r.t_nf_mean_s.is_none() == (r.nf_reach_frac == 0.0));
    let n_ok = match (r.n_star, r.t_efn_s, r.t_nf_mean_s) {
        (NStar::Undefined, None, _) => true,
        (NStar::Finite(1), Some(_), None) => true,
        (NStar::Finite(n), Some(te), Some(tn)) => n >= 1 && n as f64 >= te / tn * (1.0 - 1e-9) && ((n - 1) as f64) < te / tn,
        _ => false,
    };
    frac_ok && n_ok
}

#[test]
fn criterion_8_decision_boundary() {
    let _g = serial();
    // hand-computed: target 3 → 30 s vs mean(2, 4) s → 10; target 7.5 →
    // 80 s vs mean(4, 10) s → ⌈11.43⌉ = 12; target 10 → no NF → 1;
    // target 11 → EFN never → undefined
    let efn = fixture_log(&(1..=10).map(|i| (10.0 * i as f64, i as f64)).collect::<Vec<_>>());
    let nf1 = fixture_log(&[(1.0, 2.0), (2.0, 4.0), (3.0, 6.0), (4.0, 8.0), (5.0, 9.0), (6.0, 9.0)]);
    let nf2 = fixture_log(&[(2.0, 1.0), (4.0, 3.0), (6.0, 5.0), (8.0, 7.0), (10.0, 8.0), (12.0, 8.5)]);
    let rows = decision_boundary(&efn, &[nf1, nf2], &[3.0, 7.5, 10.0, 11.0]).unwrap();
    let got: Vec<NStar> = rows.iter().map(|r| r.n_star).collect();
    let expected = vec![NStar::Finite(10), NStar::Finite(12), NStar::Finite(1), NStar::Undefined];
    let fixtures_ok = got == expected && rows.iter().all(row_ok);

    let run = lgp_run();
    let targets = default_targets(&run.efn_log, 5);
    let rows = decision_boundary(&run.efn_log, &run.nf_logs, &targets).unwrap();
    let real_ok = rows.len() == 5 && rows.iter().all(row_ok);
    let shown: Vec<String> = rows.iter().map(|r| format!("{:.1}→{}", r.target, r.n_star)).collect();
    report(
        "8",
        fixtures_ok && real_ok,
        format!("fixtures {got:?}; LGP targets [{}]", shown.join(", ")),
    );
}

// ---- 9: determinism ----

const DETERMINISM_CONFIG: &str = r#"
seed = 9
[family]
name = "dirichlet"
dim = 4
[flow]
count = 3
[train]
k = 5
m = 30
max_iters = 60
min_iters = 60
eval_every = 20
held_out_etas = 4
eval_samples = 100
[eval]
mc_samples = 200
"#;

fn short_run(seed: u64) -> (Vec<u64>, Vec<u8>) {
    let family = FamilySpec::Dirichlet { dim: 4 };
    let net = DensityNetwork::affine_then(LayerKind::Planar, 3, family.support());
    let problem = Problem::efn(family.clone(), EtaPrior::default_for(&family), net, None, true, seed).unwrap();
    let config = TrainConfig {
        k: 5,
        m: 30,
        seed,
        held_out_etas: 4,
        eval_samples: 100,
        ..Default::default()
    };
    let mut t = Trainer::new(problem, config).unwrap();
    let losses = (0..100).map(|_| t.step().unwrap().to_bits()).collect();
    (losses, Checkpoint::from_trainer(&t).to_bytes().unwrap())
}

fn cli_run(dir: &std::path::Path, name: &str) -> (Vec<TrainLogRecord>, Vec<u8>) {
    let config = dir.join("config.toml");
    std::fs::write(&config, DETERMINISM_CONFIG).unwrap();
    let args = CommonArgs {
        config,
        out: Some(dir.join(name)),
        seed: None,
    };
    let out = cli::cmd_train(&cli::load_config(&args).unwrap()).unwrap();
    let log = cli::read_train_log(&out.log)
        .unwrap()
        .into_iter()
        .map(|r| TrainLogRecord { wall_s: 0.0, ..r })
        .collect();
    (log, std::fs::read(&out.checkpoint).unwrap())
}

#[test]
fn criterion_9_determinism() {
    let _g = serial();
    let (la, ca) = short_run(9);
    let (lb, cb) = short_run(9);
    let (lc, _) = short_run(10);
    let trainer_ok = la == lb && ca == cb && la != lc;

    let dir = tempfile::tempdir().unwrap();
    let (log_a, ck_a) = cli_run(dir.path(), "a");
    let (log_b, ck_b) = cli_run(dir.path(), "b");
    let cli_ok = log_a == log_b && ck_a == ck_b && !log_a.is_empty();
    report(
        "9",
        trainer_ok && cli_ok,
        format!(
            "100-step losses and checkpoint identical: {trainer_ok}; CLI logs (modulo wall_s) and checkpoints identical: {cli_ok}"
        ),
    );
}
