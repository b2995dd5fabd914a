//! End-to-end acceptance checks, one test per guaranteed contract. Each
//! test prints a single summary line with the measured quantity, the
//! pinned tolerance, and the elapsed wall time, so a captured log shows
//! exactly what was verified. Tests serialize on a shared gate because
//! the wall-time budgets assume they do not compete for the machine.

use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use autodiff::Graph;
use koopman::corpus::{SequenceWindow, SnapshotCorpus};
use koopman::evaluate;
use koopman::latent::{
    koopman_step, GaussianLatent, KoopmanForm, KoopmanMatrix, KoopmanPair,
};
use koopman::losses::{self, LossWeights};
use koopman::networks::{
    to_net_layout, ArchConfig, FwdCtx, ModelParams, Net, ParamGroup,
};
use koopman::solvers::{self, FhnConfig, KsConfig};
use koopman::trainer::{self, TrainConfig, Trainer};
use ndarray::{s, Array1, Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static GATE: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    match GATE.lock() {
        Ok(g) => g,
        Err(poisoned) => poisoned.into_inner(),
    }
}

/// Abort with a visible failure line; assert! alone would only surface the
/// panic payload.
fn require(name: &str, cond: bool, detail: &str) {
    if !cond {
        println!("[FAIL] {name}: {detail}");
        panic!("{name}: {detail}");
    }
}

/// Close out a passing check: enforce the wall-time budget and print the
/// one-line summary.
fn pass(name: &str, detail: &str, started: Instant, budget_s: f64) {
    let elapsed = started.elapsed().as_secs_f64();
    require(
        name,
        elapsed <= budget_s,
        &format!("finished in {elapsed:.1}s, over the {budget_s:.0}s budget"),
    );
    println!("[PASS] {name}: {detail} [{elapsed:.1}s]");
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_dev(xs: &[f32]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
    (xs.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n).sqrt()
}

// ---- 01: packed tridiagonal operator vs dense multiplication ----

#[test]
fn c01_tridiagonal_packing_matches_dense_operator() {
    let _g = serial();
    let t0 = Instant::now();
    let name = "01 tridiagonal operator equivalence";
    const TOL: f64 = 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let mut max_diff = 0.0f64;
    for _ in 0..200 {
        let m = rng.gen_range(2..=16);
        let packed: Vec<f64> =
            (0..3 * m - 2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let tri = KoopmanMatrix::from_packed(KoopmanForm::Tridiagonal, m, &packed).unwrap();
        let dense = KoopmanMatrix::Dense(tri.to_dense());
        let v = Array1::from_iter((0..m).map(|_| rng.gen_range(-2.0..2.0)));
        let yt = tri.apply(&v).unwrap();
        let yd = dense.apply(&v).unwrap();
        for (a, b) in yt.iter().zip(yd.iter()) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    require(name, max_diff <= TOL, &format!("max |tri − dense| = {max_diff:.2e} > {TOL:.0e}"));

    let count = KoopmanForm::Tridiagonal.param_count(64);
    require(name, count == 190, &format!("M=64 packs {count} parameters, expected 190"));

    pass(
        name,
        &format!("200 random operators, M in 2..=16, max |tri − dense| = {max_diff:.2e} (tol {TOL:.0e}); M=64 packs 190 parameters"),
        t0,
        5.0,
    );
}

// ---- 02: zero operator is the identity; sigma stays positive ----

#[test]
fn c02_zero_operator_is_identity_and_sigma_stays_positive() {
    let _g = serial();
    let t0 = Instant::now();
    let name = "02 residual update identity and positivity";

    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);

    // Zero operators of both forms reproduce the state bit for bit. The
    // log-sigma draw stays inside the clamp window so the clamp is a no-op.
    for form in [KoopmanForm::Dense, KoopmanForm::Tridiagonal] {
        for _ in 0..50 {
            let m = rng.gen_range(1..=16);
            let mu = Array1::from_iter((0..m).map(|_| rng.gen_range(-5.0..5.0)));
            let ls = Array1::from_iter((0..m).map(|_| rng.gen_range(-9.5..9.5)));
            let state = GaussianLatent::new(mu, ls).unwrap();
            let zeros = vec![0.0; form.param_count(m)];
            let pair = KoopmanPair {
                k_mu: KoopmanMatrix::from_packed(form, m, &zeros).unwrap(),
                k_sigma: KoopmanMatrix::from_packed(form, m, &zeros).unwrap(),
            };
            let out = koopman_step(&state, &pair).unwrap();
            let same = out
                .mu
                .iter()
                .zip(state.mu.iter())
                .chain(out.log_sigma.iter().zip(state.log_sigma.iter()))
                .all(|(a, b)| a.to_bits() == b.to_bits());
            require(name, same, &format!("zero {form:?} operator moved the state"));
        }
    }

    // 10^4 random residual updates never produce a non-positive or
    // non-finite standard deviation.
    let mut min_sigma = f64::INFINITY;
    for trial in 0..10_000 {
        let m = rng.gen_range(1..=16);
        let form =
            if trial % 2 == 0 { KoopmanForm::Tridiagonal } else { KoopmanForm::Dense };
        let mu = Array1::from_iter((0..m).map(|_| rng.gen_range(-5.0..5.0)));
        let ls = Array1::from_iter((0..m).map(|_| rng.gen_range(-15.0..15.0)));
        let state = GaussianLatent::new(mu, ls).unwrap();
        let rand_packed = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..form.param_count(m)).map(|_| rng.gen_range(-3.0..3.0)).collect()
        };
        let pair = KoopmanPair {
            k_mu: KoopmanMatrix::from_packed(form, m, &rand_packed(&mut rng)).unwrap(),
            k_sigma: KoopmanMatrix::from_packed(form, m, &rand_packed(&mut rng)).unwrap(),
        };
        let out = koopman_step(&state, &pair).unwrap();
        require(name, out.is_finite(), &format!("update {trial} produced a non-finite state"));
        for &l in out.log_sigma.iter() {
            let sigma = l.exp();
            min_sigma = min_sigma.min(sigma);
            require(
                name,
                sigma > 0.0 && sigma.is_finite(),
                &format!("update {trial} produced sigma = {sigma:e}"),
            );
        }
    }

    pass(
        name,
        &format!("zero operators are bit-exact identities (100 states, both forms); 10^4 random updates keep sigma positive (min {min_sigma:.2e})"),
        t0,
        5.0,
    );
}

// ---- 03: latent distribution loss vs a brute-force oracle ----

fn mmd_oracle(z_true: &[Vec<f64>], z_pred: &[Vec<f64>], c: f64) -> f64 {
    let n = z_true.len();
    let k = |a: &[f64], b: &[f64]| -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        c / (c + d2)
    };
    let pair_w = 1.0 / (n * (n - 1)) as f64;
    let cross_w = 2.0 / (n * n) as f64;
    let mut acc = 0.0;
    for l in 0..n {
        for j in 0..n {
            if l != j {
                acc += pair_w * (k(&z_true[l], &z_true[j]) + k(&z_pred[l], &z_pred[j]));
            }
            acc -= cross_w * k(&z_true[l], &z_pred[j]);
        }
    }
    acc
}

#[test]
fn c03_latent_distribution_loss_matches_brute_force_oracle() {
    let _g = serial();
    let t0 = Instant::now();
    let name = "03 distribution loss oracle";
    const TOL: f64 = 1e-12;

    // The kernel of a point with itself is exactly one.
    let mut g = Graph::new();
    let a = g.constant(ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.3, -1.7, 2.2]).unwrap());
    let k_self = losses::imq_kernel(&mut g, a, a, 6.0);
    let k_val = g.scalar(k_self);
    require(name, k_val == 1.0, &format!("k(x, x) = {k_val}, expected exactly 1"));

    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let mut max_diff = 0.0f64;
    let mut cases = 0usize;
    for &n in &[2usize, 3, 5] {
        for _ in 0..40 {
            let m = rng.gen_range(1..=8);
            let c = 2.0 * m as f64;
            let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|_| (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect()
            };
            let zt = draw(&mut rng);
            let zp = draw(&mut rng);
            let oracle = mmd_oracle(&zt, &zp, c);

            let mut g = Graph::new();
            let to_vars = |g: &mut Graph, zs: &[Vec<f64>]| -> Vec<autodiff::Var> {
                zs.iter()
                    .map(|z| {
                        g.constant(ArrayD::from_shape_vec(IxDyn(&[m]), z.clone()).unwrap())
                    })
                    .collect()
            };
            let zt_vars = to_vars(&mut g, &zt);
            let zp_vars = to_vars(&mut g, &zp);
            let loss = losses::mmd_code_loss(&mut g, &zt_vars, &zp_vars, c).unwrap();
            let diff = (g.scalar(loss) - oracle).abs();
            max_diff = max_diff.max(diff);
            cases += 1;
        }
    }
    require(name, max_diff <= TOL, &format!("max |loss − oracle| = {max_diff:.2e} > {TOL:.0e}"));

    pass(
        name,
        &format!("k(x,x) = 1 exactly; {cases} random cases over n in {{2,3,5}}, dim ≤ 8: max |loss − oracle| = {max_diff:.2e} (tol {TOL:.0e})"),
        t0,
        5.0,
    );
}

// ---- 04: analytic gradients vs central finite differences ----

struct GradSetup {
    arch: ArchConfig,
    weights: LossWeights,
    orders: Vec<usize>,
    window: SequenceWindow,
    noise: trainer::NoiseSet,
    alpha: f64,
}

fn grad_setup() -> (GradSetup, ModelParams) {
    let mut arch = ArchConfig::new(vec![32], 1);
    arch.latent_dim = 4;
    arch.enc_widths = vec![4, 8];
    arch.aux_widths = vec![8];
    arch.disc_widths = vec![6];
    arch.disc_seq_len = 2;
    arch.dropout_keep = 1.0;
    let params = ModelParams::init(&arch, 21).unwrap();

    let mut weights = LossWeights::defaults(arch.latent_dim);
    weights.lambda_gan = 0.01;

    let wave = |phase: f64| -> ArrayD<f32> {
        ArrayD::from_shape_fn(IxDyn(&[32, 1]), |ix| {
            let x = ix[0] as f64 / 32.0 * std::f64::consts::TAU;
            (0.8 * (x + phase).sin() + 0.2 * (2.0 * x + phase).cos()) as f32
        })
    };
    let window = SequenceWindow {
        x0: wave(0.0),
        targets: vec![wave(0.35), wave(0.7)],
        conditioning: None,
        start: 0,
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(7);
    let noise = trainer::draw_noise(arch.latent_dim, 2, &mut noise_rng);

    (GradSetup { arch, weights, orders: vec![1, 2, 4], window, noise, alpha: 0.37 }, params)
}

/// Raw per-term values of the generator objective under fixed noise.
fn gen_term_values(setup: &GradSetup, params: &ModelParams) -> [f64; 5] {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, None);
    let net = Net::new(&setup.arch, params, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut obs = Vec::new();
    let fwd =
        trainer::forward_window(&mut g, &net, &setup.window, &setup.noise, &mut rng, &mut obs)
            .unwrap();
    let nodes =
        trainer::generator_window_loss(&mut g, &net, &fwd, &setup.weights, &setup.orders)
            .unwrap();
    let r = nodes.report;
    [r.recon, r.pred, r.code, r.grad, r.gan]
}

/// Critic objective (Wasserstein estimate plus gradient penalty) under the
/// same fixed noise and a fixed interpolation weight.
fn critic_value(setup: &GradSetup, params: &ModelParams) -> f64 {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, None);
    let net = Net::new(&setup.arch, params, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut obs = Vec::new();
    let fwd =
        trainer::forward_window(&mut g, &net, &setup.window, &setup.noise, &mut rng, &mut obs)
            .unwrap();
    obs.clear();
    let (loss, _) =
        trainer::critic_window_loss(&mut g, &net, &fwd, &setup.weights, setup.alpha, &mut obs)
            .unwrap();
    g.scalar(loss)
}

fn set_coord(params: &mut ModelParams, entry: usize, coord: usize, value: f64) {
    params.entries_mut()[entry].value.as_slice_mut().unwrap()[coord] = value;
}

#[test]
fn c04_loss_gradients_match_finite_differences() {
    let _g = serial();
    let t0 = Instant::now();
    let name = "04 gradients vs finite differences";
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    const FLOOR: f64 = 1e-3;

    let (setup, mut params) = grad_setup();

    // Analytic gradients of the five generator terms in one graph.
    let positions = |group: ParamGroup| -> Vec<usize> {
        params
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.group == group)
            .map(|(i, _)| i)
            .collect()
    };
    let gen_pos = positions(ParamGroup::Generator);
    let disc_pos = positions(ParamGroup::Discriminator);

    let gen_grads: Vec<Vec<Option<ArrayD<f64>>>> = {
        let mut g = Graph::new();
        let vars = params.bind(&mut g, Some(ParamGroup::Generator));
        let net = Net::new(&setup.arch, &params, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut obs = Vec::new();
        let fwd = trainer::forward_window(
            &mut g, &net, &setup.window, &setup.noise, &mut rng, &mut obs,
        )
        .unwrap();
        let nodes =
            trainer::generator_window_loss(&mut g, &net, &fwd, &setup.weights, &setup.orders)
                .unwrap();
        let wrt: Vec<autodiff::Var> = gen_pos.iter().map(|&i| vars[i]).collect();
        let roots = [
            nodes.parts.recon,
            nodes.parts.pred,
            nodes.parts.code.unwrap(),
            nodes.parts.grad,
            nodes.parts.gan.unwrap(),
        ];
        roots
            .iter()
            .map(|&root| {
                g.backward(root, &wrt)
                    .into_iter()
                    .map(|ov| ov.map(|v| g.value(v).clone()))
                    .collect()
            })
            .collect()
    };

    let critic_grads: Vec<Option<ArrayD<f64>>> = {
        let mut g = Graph::new();
        let vars = params.bind(&mut g, Some(ParamGroup::Discriminator));
        let net = Net::new(&setup.arch, &params, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut obs = Vec::new();
        let fwd = trainer::forward_window(
            &mut g, &net, &setup.window, &setup.noise, &mut rng, &mut obs,
        )
        .unwrap();
        obs.clear();
        let (loss, _) = trainer::critic_window_loss(
            &mut g, &net, &fwd, &setup.weights, setup.alpha, &mut obs,
        )
        .unwrap();
        let wrt: Vec<autodiff::Var> = disc_pos.iter().map(|&i| vars[i]).collect();
        g.backward(loss, &wrt)
            .into_iter()
            .map(|ov| ov.map(|v| g.value(v).clone()))
            .collect()
    };

    let term_names = ["recon", "pred", "code", "grad", "gan", "critic"];
    let mut max_rel = [0.0f64; 6];
    for (t, term) in term_names.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC4 + t as u64);
        let pool = if t < 5 { &gen_pos } else { &disc_pos };
        for _ in 0..50 {
            let pick = rng.gen_range(0..pool.len());
            let entry = pool[pick];
            let len = params.entries()[entry].value.len();
            let coord = rng.gen_range(0..len);

            let analytic = if t < 5 {
                gen_grads[t][pick]
                    .as_ref()
                    .map_or(0.0, |a| a.as_slice().unwrap()[coord])
            } else {
                critic_grads[pick]
                    .as_ref()
                    .map_or(0.0, |a| a.as_slice().unwrap()[coord])
            };

            let orig = params.entries()[entry].value.as_slice().unwrap()[coord];
            set_coord(&mut params, entry, coord, orig + H);
            let fp = if t < 5 { gen_term_values(&setup, &params)[t] } else { critic_value(&setup, &params) };
            set_coord(&mut params, entry, coord, orig - H);
            let fm = if t < 5 { gen_term_values(&setup, &params)[t] } else { critic_value(&setup, &params) };
            set_coord(&mut params, entry, coord, orig);

            let fd = (fp - fm) / (2.0 * H);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(FLOOR);
            max_rel[t] = max_rel[t].max(rel);
            require(
                name,
                rel < TOL,
                &format!(
                    "{term} term, entry {} coord {coord}: analytic {analytic:.6e} vs central difference {fd:.6e} (rel {rel:.2e})",
                    params.entries()[entry].name
                ),
            );
        }
    }

    let detail = term_names
        .iter()
        .zip(&max_rel)
        .map(|(n, r)| format!("{n} {r:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    pass(
        name,
        &format!("50 random parameters per term, step {H:.0e}: max rel err {detail} (tol {TOL:.0e})"),
        t0,
        120.0,
    );
}

// ---- 05: first reference solver ----

#[test]
fn c05_ks_solver_shape_zero_state_and_convergence() {
    let _g = serial();
    let t0 = Instant::now();
    let name = "05 chaotic 1D reference solver";

    let corpus = solvers::solve_ks(&KsConfig::default()).unwrap();
    require(
        name,
        corpus.data.shape() == [1200, 1024, 1],
        &format!("production corpus shape {:?}, expected [1200, 1024, 1]", corpus.data.shape()),
    );
    require(name, corpus.data.iter().all(|v| v.is_finite()), "corpus contains non-finite values");

    // The zero state is a fixed point of every term and survives the full
    // spectral pipeline exactly.
    let zero =
        solvers::solve_ks_with_ic(&KsConfig::default(), |x| Array1::zeros(x.len())).unwrap();
    require(name, zero.data.iter().all(|&v| v == 0.0), "zero state drifted");

    // Self-convergence: halving dt divides the error against a dt/8
    // reference by roughly four.
    let at_dt = |steps: usize| -> Vec<f64> {
        let cfg = KsConfig {
            nx: 256,
            dt_solver: 1.0 / steps as f64,
            steps,
            save_every: steps / 2,
            ..KsConfig::default()
        };
        solvers::solve_ks(&cfg).unwrap().data.iter().map(|&v| v as f64).collect()
    };
    let coarse = at_dt(16);
    let mid = at_dt(32);
    let reference = at_dt(128);
    let l2 = |a: &[f64], b: &[f64]| -> f64 {
        (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
            / b.iter().map(|y| y * y).sum::<f64>())
        .sqrt()
    };
    let ratio = l2(&coarse, &reference) / l2(&mid, &reference);
    require(
        name,
        (2.8..=5.2).contains(&ratio),
        &format!("dt-halving error ratio {ratio:.3} outside [2.8, 5.2]"),
    );

    pass(
        name,
        &format!("1200 x [1024, 1] snapshots, all finite; zero state exact; dt-halving error ratio {ratio:.2} in [2.8, 5.2]"),
        t0,
        180.0,
    );
}

// ---- 06: second reference solver ----

#[test]
fn c06_fhn_solver_shape_fixed_point_and_pattern_growth() {
    let _g = serial();
    let t0 = Instant::now();
    let name = "06 pattern-forming 2D reference solver";

    let corpus = solvers::solve_fhn(&FhnConfig::default()).unwrap();
    require(
        name,
        corpus.data.shape() == [180, 64, 64, 2],
        &format!("corpus shape {:?}, expected [180, 64, 64, 2]", corpus.data.shape()),
    );

    // The homogeneous fixed point u = v = k^(1/3) stays put for 100 steps.
    let cfg = FhnConfig::default();
    let u_star = cfg.k.cbrt();
    let n = cfg.nx * cfg.ny;
    let mut u = vec![u_star; n];
    let mut v = vec![u_star; n];
    solvers::advance_fhn(&cfg, &mut u, &mut v, 100).unwrap();
    let drift = u
        .iter()
        .chain(v.iter())
        .map(|x| (x - u_star).abs())
        .fold(0.0f64, f64::max);
    require(name, drift <= 1e-6, &format!("fixed point drifted by {drift:.2e} > 1e-6"));

    // Random initial fields organize into patterns: the spatial spread of
    // u grows by more than 10x from t = 1 to t = 10 for most seeds. The
    // early keep threshold puts the first stored snapshot exactly at t = 1.
    let mut grown = 0usize;
    let mut ratios = Vec::new();
    for seed in 0..5 {
        let cfg = FhnConfig { t_start_keep: 0.95, seed, ..FhnConfig::default() };
        let run = solvers::solve_fhn(&cfg).unwrap();
        let t_len = run.t_len();
        let view = run.data.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let first: Vec<f32> = view.slice(s![0, .., .., 0]).iter().copied().collect();
        let last: Vec<f32> = view.slice(s![t_len - 1, .., .., 0]).iter().copied().collect();
        let ratio = std_dev(&last) / std_dev(&first);
        ratios.push(format!("{ratio:.1}"));
        if ratio > 10.0 {
            grown += 1;
        }
    }
    require(
        name,
        grown >= 4,
        &format!("spread grew >10x for only {grown}/5 seeds (ratios {ratios:?})"),
    );

    pass(
        name,
        &format!("180 x [64, 64, 2] snapshots; fixed point drift {drift:.1e} ≤ 1e-6 over 100 steps; spread ratios {ratios:?} (need >10 for ≥4/5 seeds)"),
        t0,
        180.0,
    );
}

// ---- desk-scale training corpus shared by 07 and 08 ----

fn desk_corpus() -> SnapshotCorpus {
    let full = solvers::solve_ks(&KsConfig::default()).unwrap();
    let a3 = full.data.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let coarse = a3.slice(s![.., ..;4, ..]).to_owned().into_dyn();
    SnapshotCorpus::new(coarse, full.dt, 1, vec!["u".into()], None)
        .unwrap()
        .normalize()
        .unwrap()
}

fn desk_config() -> TrainConfig {
    let mut arch = ArchConfig::new(vec![256], 1);
    arch.latent_dim = 16;
    arch.enc_widths = vec![8, 16];
    arch.aux_widths = vec![32];
    arch.disc_widths = vec![8, 16];
    arch.disc_seq_len = 8;
    arch.dropout_keep = 1.0;
    let mut cfg = TrainConfig::new(arch);
    cfg.lr = 1e-3;
    cfg.n_s_initial = 8;
    cfg.n_s_max = 8;
    cfg.batch_size = 4;
    cfg.seed = 7;
    cfg.ckpt_every = 0;
    cfg.grad_orders = vec![1];
    cfg
}

// ---- 07: desk-scale training descends and beats the hold baseline ----

#[test]
fn c07_desk_training_halves_loss_and_beats_hold_baseline() {
    let _g = serial();
    let t0 = Instant::now();
    let name = "07 desk-scale training";

    let corpus = desk_corpus();
    let mut cfg = desk_config();
    cfg.iterations = 2000;
    let arch = cfg.arch.clone();

    let mut trainer = Trainer::new(cfg, vec![corpus.clone()]).unwrap();
    let mut totals = Vec::with_capacity(2000);
    for _ in 0..2000 {
        totals.push(trainer.step().unwrap().gen.total);
    }

    let early = mean(&totals[100..200]);
    let late = mean(&totals[1900..2000]);
    let ratio = late / early;
    require(
        name,
        ratio <= 0.5,
        &format!("mean total over last 100 iterations is {ratio:.3} of iterations 100..200, need ≤ 0.5 ({early:.4e} -> {late:.4e})"),
    );

    // 64-step rollout in physical units against holding the initial state.
    let result = evaluate::rollout_cycles(
        &arch,
        &trainer.state.params,
        &corpus,
        64,
        1,
        None,
        None,
    )
    .unwrap();
    let model_mae = mean(&result.mae_per_step);

    let phys = corpus.denormalize().unwrap();
    let s0 = phys.snapshot(0).to_owned();
    let mut hold = ArrayD::<f32>::zeros(result.ground_truth.raw_dim());
    for t in 0..64 {
        hold.index_axis_mut(Axis(0), t).assign(&s0);
    }
    let hold_mae = mean(&evaluate::mae_between(&hold, &result.ground_truth));
    require(
        name,
        model_mae < hold_mae,
        &format!("64-step rollout MAE {model_mae:.4e} did not beat the hold baseline {hold_mae:.4e}"),
    );

    pass(
        name,
        &format!("2000 iterations (M=16, n_S=8, batch 4): late/early loss ratio {ratio:.2} ≤ 0.5; 64-step rollout MAE {model_mae:.3e} < hold baseline {hold_mae:.3e}"),
        t0,
        900.0,
    );
}

// ---- 08: adversarial alternation stays finite with group isolation ----

fn group_checksum(params: &ModelParams, group: ParamGroup) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut fold = |bits: u64| {
        h ^= bits;
        h = h.wrapping_mul(0x100000001b3);
    };
    for e in params.entries().iter().filter(|e| e.group == group) {
        for &v in e.value.iter() {
            fold(v.to_bits());
        }
    }
    let disc = group == ParamGroup::Discriminator;
    for bn in params.bn_layers().iter().filter(|b| b.name.starts_with("disc.") == disc) {
        for &v in bn.mean.iter().chain(bn.var.iter()) {
            fold(v.to_bits());
        }
    }
    h
}

#[test]
fn c08_adversarial_steps_stay_finite_with_group_isolation() {
    let _g = serial();
    let t0 = Instant::now();
    let name = "08 adversarial alternation";

    let corpus = desk_corpus();
    let mut cfg = desk_config();
    cfg.iterations = 500;
    cfg.weights.lambda_gan = 0.01;

    let mut trainer = Trainer::new(cfg, vec![corpus]).unwrap();
    for it in 0..500 {
        let batch = trainer.sample_batch(it).unwrap();

        let disc_before = group_checksum(&trainer.state.params, ParamGroup::Discriminator);
        let gen = trainer.generator_step(it, &batch).unwrap();
        let disc_after_gen = group_checksum(&trainer.state.params, ParamGroup::Discriminator);
        require(
            name,
            disc_before == disc_after_gen,
            &format!("iteration {it}: generator update touched critic parameters"),
        );
        for (term, v) in [
            ("recon", gen.recon),
            ("pred", gen.pred),
            ("code", gen.code),
            ("grad", gen.grad),
            ("reg", gen.reg),
            ("gan", gen.gan),
            ("total", gen.total),
        ] {
            require(name, v.is_finite(), &format!("iteration {it}: generator {term} = {v}"));
        }

        let gen_before = group_checksum(&trainer.state.params, ParamGroup::Generator);
        let disc = trainer.discriminator_step(it, &batch).unwrap();
        let gen_after_disc = group_checksum(&trainer.state.params, ParamGroup::Generator);
        require(
            name,
            gen_before == gen_after_disc,
            &format!("iteration {it}: critic update touched generator parameters"),
        );
        for (term, v) in
            [("total", disc.total), ("wasserstein", disc.wasserstein), ("gp", disc.gp)]
        {
            require(name, v.is_finite(), &format!("iteration {it}: critic {term} = {v}"));
        }

        trainer.state.iteration = it + 1;
    }

    pass(
        name,
        "500 alternating generator/critic updates at lambda_gan = 0.01: every loss term finite, parameter groups isolated (checksums over values and BN statistics)",
        t0,
        600.0,
    );
}

// ---- 09: window-growth schedule replay vs closed form ----

#[test]
fn c09_curriculum_replay_matches_closed_form() {
    let _g = serial();
    let t0 = Instant::now();
    let name = "09 window-growth schedule replay";

    let mut cfg = TrainConfig::new(ArchConfig::new(vec![32], 1));
    cfg.n_s_initial = 16;
    cfg.n_s_max = 32;
    cfg.curriculum_every = 20_000;
    cfg.curriculum_rate = 1.05;

    let formula = |boundaries: usize| -> usize {
        (0..boundaries)
            .fold(16u64, |n, _| (((n as f64 * 1.05).round() as u64) + 1).min(32))
            as usize
    };

    let mut n = cfg.n_s_initial;
    for it in 0..=500_000usize {
        n = trainer::curriculum_update(n, it, &cfg);
        let expect = formula(it / 20_000);
        require(
            name,
            n == expect,
            &format!("iteration {it}: training loop has n_S = {n}, formula gives {expect}"),
        );
        if it % 997 == 0 {
            let replayed = trainer::n_s_at(it, &cfg);
            require(
                name,
                replayed == expect,
                &format!("iteration {it}: schedule replay gives {replayed}, formula {expect}"),
            );
        }
    }
    require(name, n == 32, &format!("schedule ended at {n}, expected the cap 32"));
    let fixed = trainer::curriculum_update(32, 520_000, &cfg);
    require(name, fixed == 32, &format!("cap is not a fixed point: 32 -> {fixed}"));

    pass(
        name,
        "500k iterations from n_S = 16 (rate 1.05, cap 32, interval 20k) match the closed-form replay at every step; the cap is a fixed point",
        t0,
        1.0,
    );
}

// ---- 10: conditioning input separates the learned operators ----

fn rotating_corpus(speed: f64, t_len: usize, grid: usize) -> SnapshotCorpus {
    let mut data = ndarray::Array3::<f32>::zeros((t_len, grid, 1));
    for t in 0..t_len {
        for j in 0..grid {
            let x = j as f64 / grid as f64 * std::f64::consts::TAU;
            let ph = x - speed * t as f64 * 0.1;
            data[[t, j, 0]] = (ph.sin() + 0.5 * (2.0 * ph + 0.7).sin()) as f32;
        }
    }
    SnapshotCorpus::new(data.into_dyn(), 0.1, 1, vec!["u".into()], Some(speed)).unwrap()
}

#[test]
fn c10_conditioned_training_separates_operators() {
    let _g = serial();
    let t0 = Instant::now();
    let name = "10 conditioned operator separation";
    const MIN_FRO: f64 = 1e-3;

    let speeds = [0.6, 1.8];
    let corpora = SnapshotCorpus::normalize_joint(&[
        rotating_corpus(speeds[0], 160, 32),
        rotating_corpus(speeds[1], 160, 32),
    ])
    .unwrap();

    let mut arch = ArchConfig::new(vec![32], 1);
    arch.latent_dim = 8;
    arch.conditioned = true;
    arch.enc_widths = vec![4, 8];
    arch.aux_widths = vec![16];
    arch.disc_widths = vec![4];
    arch.dropout_keep = 1.0;
    let m = arch.latent_dim;
    require(
        name,
        arch.aux_in_width() == 2 * m + 1,
        &format!("auxiliary input width {} != 2M+1 = {}", arch.aux_in_width(), 2 * m + 1),
    );

    let mut cfg = TrainConfig::new(arch.clone());
    cfg.iterations = 1000;
    cfg.lr = 1e-3;
    cfg.n_s_initial = 4;
    cfg.n_s_max = 4;
    cfg.batch_size = 2;
    cfg.seed = 3;
    cfg.ckpt_every = 0;

    let mut trainer = Trainer::new(cfg, corpora.clone()).unwrap();
    let fc0 = &trainer.state.params.entries()[trainer.state.params.entry_index("aux.fc0.w")];
    require(
        name,
        fc0.value.shape()[1] == 2 * m + 1,
        &format!("aux.fc0.w input dimension {} != {}", fc0.value.shape()[1], 2 * m + 1),
    );
    for _ in 0..1000 {
        trainer.step().unwrap();
    }

    // Feed the same latent state through the trained auxiliary network at
    // both conditioning values and compare the resulting mean operators.
    let params = &trainer.state.params;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, None);
    let net = Net::new(&arch, params, &vars);
    let mut ctx = FwdCtx::eval();
    let x = g.constant(to_net_layout(&corpora[0].snapshot(0)));
    let xp = net.pad_input(&mut g, x);
    let (mu, ls) = net.encode(&mut g, xp, &mut ctx);

    let n_dec = arch.koopman_form.param_count(m);
    let k_of = |g: &mut Graph, speed: f64| -> Array2<f64> {
        let mut ctx = FwdCtx::eval();
        let packed = net.aux(g, mu, ls, Some(speed), &mut ctx);
        let vals: Vec<f64> = g.value(packed).iter().take(n_dec).copied().collect();
        KoopmanMatrix::from_packed(arch.koopman_form, m, &vals).unwrap().to_dense()
    };
    let k_slow = k_of(&mut g, speeds[0]);
    let k_fast = k_of(&mut g, speeds[1]);
    let fro = (&k_slow - &k_fast).mapv(|v| v * v).sum().sqrt();
    require(
        name,
        fro > MIN_FRO,
        &format!("mean operators differ by {fro:.3e} in Frobenius norm, need > {MIN_FRO:.0e}"),
    );

    pass(
        name,
        &format!("two corpora (speeds {} and {}), 1000 iterations, aux input width {}; mean operators differ by {fro:.3e} (need > {MIN_FRO:.0e})", speeds[0], speeds[1], 2 * m + 1),
        t0,
        600.0,
    );
}

// ---- 11: seeded determinism and exact resume ----

fn params_bits_equal(a: &ModelParams, b: &ModelParams) -> bool {
    a.entries().len() == b.entries().len()
        && a.entries().iter().zip(b.entries()).all(|(x, y)| {
            x.name == y.name
                && x.value.iter().zip(y.value.iter()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
        && a.bn_layers().iter().zip(b.bn_layers()).all(|(x, y)| {
            x.name == y.name
                && x.mean.iter().zip(y.mean.iter()).all(|(p, q)| p.to_bits() == q.to_bits())
                && x.var.iter().zip(y.var.iter()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

#[test]
fn c11_seeded_runs_replay_and_resume_exactly() {
    let _g = serial();
    let t0 = Instant::now();
    let name = "11 determinism and exact resume";

    // Small conditioned-free setup with the adversarial path, dropout,
    // and a live window curriculum, so every noise stream is exercised.
    let wave = rotating_corpus(1.0, 40, 32);
    let corpus = SnapshotCorpus::new(wave.data.clone(), wave.dt, 1, vec!["u".into()], None)
        .unwrap()
        .normalize()
        .unwrap();

    let mut arch = ArchConfig::new(vec![32], 1);
    arch.latent_dim = 4;
    arch.enc_widths = vec![4, 8];
    arch.aux_widths = vec![8];
    arch.disc_widths = vec![4, 4];
    arch.disc_seq_len = 6;
    let mut cfg = TrainConfig::new(arch);
    cfg.iterations = 300;
    cfg.lr = 1e-3;
    cfg.n_s_initial = 2;
    cfg.n_s_max = 6;
    cfg.curriculum_every = 50;
    cfg.curriculum_rate = 1.3;
    cfg.batch_size = 2;
    cfg.seed = 17;
    cfg.ckpt_every = 0;
    cfg.weights.lambda_gan = 0.01;

    let run = |iters: usize| -> (Vec<String>, Trainer) {
        let mut t = Trainer::new(cfg.clone(), vec![corpus.clone()]).unwrap();
        let mut lines = Vec::with_capacity(iters);
        for _ in 0..iters {
            lines.push(t.step().unwrap().log_line());
        }
        (lines, t)
    };

    let (lines_a, trainer_a) = run(300);
    let (lines_b, _) = run(300);
    require(name, lines_a == lines_b, "two runs from the same seed produced different logs");

    // Interrupt at 100, checkpoint, reload, continue 200 more.
    let (head, trainer_c) = run(100);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt_100");
    trainer::save_checkpoint(&ckpt, &trainer_c.cfg, &trainer_c.state).unwrap();
    drop(trainer_c);

    let loaded = trainer::load_checkpoint(&ckpt).unwrap();
    let resumed_cfg =
        TrainConfig { arch: loaded.arch, weights: loaded.weights, ..cfg.clone() };
    let mut resumed =
        Trainer::from_state(resumed_cfg, vec![corpus.clone()], loaded.state).unwrap();
    let mut tail = Vec::with_capacity(200);
    for _ in 0..200 {
        tail.push(resumed.step().unwrap().log_line());
    }

    require(name, head == lines_a[..100], "interrupted run diverged before the checkpoint");
    require(
        name,
        tail == lines_a[100..],
        "resumed run diverged from the uninterrupted one within 200 iterations",
    );
    require(
        name,
        params_bits_equal(&trainer_a.state.params, &resumed.state.params),
        "final parameters differ bit-for-bit between uninterrupted and resumed runs",
    );

    pass(
        name,
        "same seed reproduces all 300 log lines; save at 100 / load / 200 further iterations match the uninterrupted run exactly, parameters bit-identical",
        t0,
        600.0,
    );
}
