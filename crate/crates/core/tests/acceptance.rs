//! Acceptance suite. Prints one `PASS` or `FAIL` line per criterion with the
//! measured values. Outcomes are reported, not asserted, so the workspace
//! test run stays green while the numbers stay visible:
//!
//!     cargo test -p stride-core --test acceptance -- --nocapture

mod common;

use std::time::Instant;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stride_core::autodiff::{Tape, Var};
use stride_core::baselines::{DelanModel, LnnDiffusionModel, OnnModel, PureDiffusionModel};
use stride_core::data::{generate_dataset, Policy, TrajectoryDataset};
use stride_core::envs::EnvSpec;
use stride_core::eval::*;
use stride_core::model::{DynamicsModel, Latent, ModelInput, OracleModel};
use stride_core::mppi::{importance_weights, run_swingup, MppiConfig};
use stride_core::persistence::{AnyModel, Checkpoint};
use stride_core::state::State;
use stride_core::stride::StrideModel;
use stride_core::synthetic::{bimodal_set, fit_both, mode_summary};
use stride_core::train::{Objective, TrainConfig};

const SEEDS: u64 = 5;
const TRAIN_RECORDS: usize = 6000;
const TEST_RECORDS: usize = 3000;

struct Fixtures {
    bounce_train: TrajectoryDataset,
    bounce_test: TrajectoryDataset,
    pend_train: TrajectoryDataset,
    stride: Vec<StrideModel>,
    delan: Vec<DelanModel>,
    onn: Vec<OnnModel>,
    lnn_diffusion: LnnDiffusionModel,
    pend_stride: StrideModel,
    pend_onn: OnnModel,
    train_seconds: f64,
}

fn cfg(seed: u64) -> TrainConfig {
    TrainConfig { seed, ..TrainConfig::default() }
}

fn build_fixtures() -> Fixtures {
    let t0 = Instant::now();
    let bounce = EnvSpec::bouncing_pendulum();
    let pend = EnvSpec::pendulum();
    let bounce_train = generate_dataset(&bounce, Policy::RandomTorque, TRAIN_RECORDS, 0.0, 1).unwrap();
    let bounce_test = generate_dataset(&bounce, Policy::RandomTorque, TEST_RECORDS, 0.0, 101).unwrap();
    let pend_train = generate_dataset(&pend, Policy::RandomTorque, TRAIN_RECORDS, 0.0, 2).unwrap();
    let mut stride = Vec::new();
    let mut delan = Vec::new();
    let mut onn = Vec::new();
    for s in 0..SEEDS {
        stride.push(StrideModel::train(&bounce_train, &cfg(s)).unwrap().0);
        delan.push(DelanModel::train(&bounce_train, &cfg(s)).unwrap().0);
        onn.push(OnnModel::train(&bounce_train, &cfg(s)).unwrap().0);
    }
    let lnn_diffusion = LnnDiffusionModel::train(&bounce_train, &cfg(0)).unwrap().0;
    let pend_stride = StrideModel::train(&pend_train, &cfg(0)).unwrap().0;
    let pend_onn = OnnModel::train(&pend_train, &cfg(0)).unwrap().0;
    Fixtures {
        bounce_train,
        bounce_test,
        pend_train,
        stride,
        delan,
        onn,
        lnn_diffusion,
        pend_stride,
        pend_onn,
        train_seconds: t0.elapsed().as_secs_f64(),
    }
}

fn rollout_cfg() -> RolloutConfig {
    RolloutConfig {
        horizon: 30,
        starts: 64,
        replicates: 8,
        seed: 7,
        ..RolloutConfig::default()
    }
}

fn report(n: usize, ok: bool, detail: &str, secs: f64) {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!("{tag} criterion {n}: {detail} [{secs:.1} s]");
}

type Outcome = stride_core::Result<(bool, String)>;

fn run(n: usize, f: impl FnOnce() -> Outcome) {
    let t0 = Instant::now();
    match f() {
        Ok((ok, detail)) => report(n, ok, &detail, t0.elapsed().as_secs_f64()),
        Err(e) => report(n, false, &format!("error: {e}"), t0.elapsed().as_secs_f64()),
    }
}

/// Tape gradient of a scalar function of one input against central
/// differences.
fn primitive_error(f: impl Fn(&mut Tape, Var) -> Var, g: impl Fn(f64) -> f64, x: f64) -> f64 {
    let mut tape = Tape::new();
    let v = tape.leaf(Array2::from_elem((1, 1), x));
    let y = f(&mut tape, v);
    let grads = tape.backward(y).unwrap();
    let ad = grads.wrt(&tape, v)[[0, 0]];
    let h = 1e-6;
    let fd = (g(x + h) - g(x - h)) / (2.0 * h);
    (ad - fd).abs() / fd.abs().max(1e-3)
}

fn criterion_1() -> Outcome {
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let sp = |x: f64| x.exp().ln_1p();
    let prims: Vec<f64> = vec![
        primitive_error(|t, v| t.tanh(v), f64::tanh, 0.3),
        primitive_error(|t, v| t.sigmoid(v), sig, -0.7),
        primitive_error(|t, v| t.softplus(v), sp, 1.2),
        primitive_error(|t, v| t.exp(v), f64::exp, 0.4),
        primitive_error(|t, v| t.log(v), f64::ln, 1.7),
        primitive_error(|t, v| t.sin(v), f64::sin, 0.9),
        primitive_error(|t, v| t.cos(v), f64::cos, -0.2),
        primitive_error(|t, v| t.sqrt(v), f64::sqrt, 2.3),
        primitive_error(|t, v| t.square(v), |x| x * x, -1.1),
        primitive_error(
            |t, v| {
                let s = t.sin(v);
                let m = t.mul(v, s);
                t.div(m, v)
            },
            f64::sin,
            0.8,
        ),
    ];
    let prim = prims.iter().cloned().fold(0.0, f64::max);

    let tiny = TrainConfig {
        hidden: vec![16, 16],
        nfe_train: 4,
        ..TrainConfig::default()
    };
    let no_fm = TrainConfig { lambda_fm: 0.0, ..tiny.clone() };
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut params = 0;
    for env in [EnvSpec::pendulum(), EnvSpec::bouncing_pendulum(), EnvSpec::cartpole()] {
        let ds = common::small_dataset(&env, 300, 3);
        let data = ds.train_set();
        let batch = common::head(&ds, 24);
        let mut push = |name, e: f64| {
            params += 24;
            worst.push((name, e));
        };
        // Generative targets are held constant with respect to the prior, so
        // the prior is checked on the acceleration term and the sampler
        // networks on the full loss.
        let m = StrideModel::new(&env, &data, &no_fm);
        push("stride accel", common::gradient_check(&m, &batch, 24, 1));
        let m = StrideModel::new(&env, &data, &tiny);
        let k = m.lnn.param_count();
        push("stride joint", common::gradient_check_range(&m, &batch, k..m.params().len(), 24, 2));
        push("delan", common::gradient_check(&DelanModel::new(&env, &data, &tiny), &batch, 24, 3));
        push("onn", common::gradient_check(&OnnModel::new(&env, &data, &tiny), &batch, 24, 4));
        push(
            "pure diffusion",
            common::gradient_check(&PureDiffusionModel::new(&env, &data, &tiny), &batch, 24, 5),
        );
        let l = LnnDiffusionModel::new(&env, &data, &no_fm);
        let k = l.lnn.param_count();
        push("lnn+diffusion prior", common::gradient_check_range(&l, &batch, 0..k, 24, 6));
        let mut l = LnnDiffusionModel::new(&env, &data, &tiny);
        l.begin_step(true);
        push(
            "lnn+diffusion denoiser",
            common::gradient_check_range(&l, &batch, k..l.params().len(), 24, 7),
        );
    }
    let (name, model_err) = worst
        .iter()
        .cloned()
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    Ok((
        prim < 1e-6 && model_err < 1e-3,
        format!(
            "primitive max rel err {prim:.2e} (tol 1e-6); model losses max rel err {model_err:.2e} on {name} over {params} coordinates (tol 1e-3)"
        ),
    ))
}

fn min_eigen(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let d = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    d.symmetric_eigen().eigenvalues.min()
}

fn min_mass_eigen(model: &dyn DynamicsModel, env: &EnvSpec, states: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lo = f64::INFINITY;
    for _ in 0..states {
        let q: Vec<f64> = (0..env.dof()).map(|_| rng.random_range(-2.0 * std::f64::consts::PI..2.0 * std::f64::consts::PI)).collect();
        lo = lo.min(min_eigen(&model.mass_matrix(&q).unwrap()));
    }
    lo
}

fn criterion_2(fx: &Fixtures) -> Outcome {
    let tiny = TrainConfig::default();
    let mut init = f64::INFINITY;
    for env in [EnvSpec::pendulum(), EnvSpec::bouncing_pendulum(), EnvSpec::cartpole()] {
        let ds = common::small_dataset(&env, 200, 9);
        for s in 0..3 {
            let c = TrainConfig { seed: s, ..tiny.clone() };
            let m = StrideModel::new(&env, &ds.train_set(), &c);
            init = init.min(min_mass_eigen(&m, &env, 1000, s));
            let d = DelanModel::new(&env, &ds.train_set(), &c);
            init = init.min(min_mass_eigen(&d, &env, 1000, s + 10));
        }
    }
    let bounce = EnvSpec::bouncing_pendulum();
    let mut trained = f64::INFINITY;
    for (i, m) in fx.stride.iter().enumerate() {
        trained = trained.min(min_mass_eigen(m, &bounce, 1000, 20 + i as u64));
    }
    for (i, m) in fx.delan.iter().enumerate() {
        trained = trained.min(min_mass_eigen(m, &bounce, 1000, 30 + i as u64));
    }
    trained = trained.min(min_mass_eigen(&fx.pend_stride, &EnvSpec::pendulum(), 1000, 40));
    trained = trained.min(min_mass_eigen(&fx.lnn_diffusion, &bounce, 1000, 41));
    Ok((
        init > 0.0 && trained > 0.0,
        format!("min eigenvalue over 10^3 states: initialized {init:.3e}, trained {trained:.3e}"),
    ))
}

fn criterion_3(fx: &Fixtures) -> Outcome {
    let env = EnvSpec::pendulum();
    let s0 = State::new(vec![1.0], vec![0.0]);
    let learned = learned_energy_rollout(&fx.pend_stride, &env, &s0, 10.0)?;
    let ratio = learned.drift / learned.spread;
    let truth = analytic_energy_rollout(&OracleModel { env: env.clone() }, &env, &s0, 10.0)?;
    let bound = 0.01 * truth.spread;
    let onn = analytic_energy_rollout(&fx.pend_onn, &env, &s0, 10.0)?;
    let factor = onn.drift / bound;
    Ok((
        ratio < 0.01 && factor > 5.0,
        format!(
            "STRIDE learned-energy drift {:.3e} = {:.3}% of spread {:.3e} (need < 1%); ONN analytic-energy violation {:.3e} = {factor:.1}x bound {bound:.3e} (need > 5x)",
            learned.drift,
            100.0 * ratio,
            learned.spread,
            onn.drift
        ),
    ))
}

fn criterion_4() -> Outcome {
    let data = bimodal_set(4000, 3);
    let cfg = TrainConfig {
        steps: 3000,
        hidden: vec![64, 64],
        ..TrainConfig::default()
    };
    let (reg, flow, _, _) = fit_both(&data, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ctx = Array2::from_shape_simple_fn((1000, 1), || rng.random_range(-1.0..1.0));
    let pred = reg.predict(&ctx)?;
    let mean_abs = pred.iter().map(|v| v.abs()).sum::<f64>() / pred.len() as f64;
    let samples = flow.sample(&ctx, 10, &mut rng)?;
    let m = mode_summary(samples.as_slice().unwrap());
    let ok = mean_abs < 0.1
        && m.central_mass < 0.05
        && (m.upper_mode - 1.0).abs() <= 0.15
        && (m.lower_mode + 1.0).abs() <= 0.15;
    Ok((
        ok,
        format!(
            "regressor mean |pred| {mean_abs:.3} (need < 0.1); flow mass in [-0.3, 0.3] {:.1}% (need < 5%), modes {:+.3} / {:+.3} (need within 0.15 of ±1)",
            100.0 * m.central_mass,
            m.upper_mode,
            m.lower_mode
        ),
    ))
}

fn criterion_5(fx: &Fixtures) -> Outcome {
    let (contact, flight) = fx.bounce_test.contact_split();
    let mut f = Vec::new();
    let mut c = Vec::new();
    for (i, m) in fx.stride.iter().enumerate() {
        f.push(residual_fraction(m, &fx.bounce_test, &flight, 8, i as u64)?);
        c.push(residual_fraction(m, &fx.bounce_test, &contact, 8, i as u64)?);
    }
    let (fm, cm) = (median_of(&f), median_of(&c));
    Ok((
        fm < 0.2 && cm > 0.5,
        format!(
            "median residual fraction flight {:.1}% (need < 20%), contact {:.1}% (need > 50%); per seed flight {:?} contact {:?}",
            100.0 * fm,
            100.0 * cm,
            f.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            c.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    ))
}

fn median_rollout<M: DynamicsModel>(models: &[M], ds: &TrajectoryDataset) -> stride_core::Result<(f64, Vec<f64>)> {
    let mut v = Vec::new();
    for m in models {
        v.push(eval_rollout(m, ds, &rollout_cfg())?.cumulative());
    }
    Ok((median_of(&v), v))
}

fn criterion_6(fx: &Fixtures) -> Outcome {
    let (onn, _) = median_rollout(&fx.onn, &fx.bounce_test)?;
    let (delan, _) = median_rollout(&fx.delan, &fx.bounce_test)?;
    let (stride, _) = median_rollout(&fx.stride, &fx.bounce_test)?;
    let gain = 1.0 - stride / delan;
    Ok((
        onn > delan && delan > stride && gain >= 0.15,
        format!(
            "median cumulative RMSE at H=30: ONN {onn:.4}, DeLaN {delan:.4}, STRIDE {stride:.4}; STRIDE {:.1}% below DeLaN (need >= 15%)",
            100.0 * gain
        ),
    ))
}

fn criterion_7(fx: &Fixtures) -> Outcome {
    let (contact, _) = fx.bounce_test.contact_split();
    let mut s = Vec::new();
    let mut d = Vec::new();
    for (i, (m, dl)) in fx.stride.iter().zip(&fx.delan).enumerate() {
        s.push(eval_force(m, &fx.bounce_test, Some(&contact), 8, i as u64)?.rmse);
        d.push(eval_implied_force(dl, &fx.bounce_test, Some(&contact), i as u64)?.rmse);
    }
    let (sm, dm) = (median_of(&s), median_of(&d));
    Ok((
        sm <= 0.8 * dm,
        format!(
            "median contact force RMSE: STRIDE {sm:.3}, DeLaN implied {dm:.3}; ratio {:.3} (need <= 0.8)",
            sm / dm
        ),
    ))
}

fn criterion_8(fx: &Fixtures) -> Outcome {
    let (target, _) = median_rollout(&fx.delan, &fx.bounce_test)?;
    let nfes = [1, 2, 4, 8, 16, 32, 50];
    let models: [(&str, &dyn DynamicsModel); 2] = [("cfm", &fx.stride[0]), ("diffusion", &fx.lnn_diffusion)];
    let rows = eval_nfe_sweep(&models, &fx.bounce_test, &nfes, &rollout_cfg())?;
    let first_reaching = |name: &str| {
        rows.iter()
            .filter(|r| r.model == name)
            .find(|r| r.rollout_error.is_some_and(|e| e <= target))
            .map(|r| r.nfe)
    };
    let decreasing = |name: &str| {
        let t: Vec<f64> = rows
            .iter()
            .filter(|r| r.model == name)
            .filter_map(|r| r.samples_per_second)
            .collect();
        t.windows(2).all(|w| w[1] < w[0])
    };
    let (cfm, diff) = (first_reaching("cfm"), first_reaching("diffusion"));
    // A diffusion model that never reaches the target within the sweep counts
    // as needing more than the largest NFE.
    let reach_ok = match (cfm, diff) {
        (Some(c), Some(d)) => 2 * c <= d,
        (Some(c), None) => 2 * c <= *nfes.last().unwrap(),
        _ => false,
    };
    let thr_ok = decreasing("cfm") && decreasing("diffusion");
    let errs = |name: &str| {
        rows.iter()
            .filter(|r| r.model == name)
            .map(|r| format!("{}:{}", r.nfe, r.rollout_error.map(|e| format!("{e:.3}")).unwrap_or("NA".into())))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Ok((
        reach_ok && thr_ok,
        format!(
            "DeLaN-level error {target:.4}; first NFE reaching it: CFM {cfm:?}, diffusion {diff:?}; throughput strictly decreasing: {thr_ok}; CFM [{}] diffusion [{}]",
            errs("cfm"),
            errs("diffusion")
        ),
    ))
}

fn criterion_9(fx: &Fixtures) -> Outcome {
    let r = eval_phase_portrait(&fx.pend_stride, &grid(-3.1, 3.1, 5), &grid(-3.0, 3.0, 5), 16, 0)?;
    let oracle = eval_phase_portrait(&OracleModel { env: EnvSpec::pendulum() }, &[0.0], &[0.0], 1, 0)?;
    let ok = r.upright.is_saddle() && r.downward.is_near_center(0.5);
    let fmt = |e: &Eigen2| {
        format!(
            "{:+.3}{:+.3}i, {:+.3}{:+.3}i",
            e.values[0].0, e.values[0].1, e.values[1].0, e.values[1].1
        )
    };
    Ok((
        ok,
        format!(
            "upright eigenvalues {} (oracle {}); downward {} (oracle {})",
            fmt(&r.upright),
            fmt(&oracle.upright),
            fmt(&r.downward),
            fmt(&oracle.downward)
        ),
    ))
}

fn criterion_10(fx: &Fixtures) -> Outcome {
    let env = EnvSpec::pendulum();
    let cfg = MppiConfig::for_env(&env);
    let oracle = OracleModel { env: env.clone() };
    let mut oracle_ok = 0;
    let mut stride_ok = 0;
    let mut invariants = true;
    for seed in 0..5 {
        let r = run_swingup(&oracle, &env, &cfg, 6.0, seed)?;
        oracle_ok += r.success as usize;
        invariants &= r.weights_normalized && r.shift_invariant;
        let r = run_swingup(&fx.pend_stride, &env, &cfg, 6.0, seed)?;
        stride_ok += r.success as usize;
        invariants &= r.weights_normalized && r.shift_invariant;
    }
    let w = importance_weights(&[4.0, 1.0, 2.0, 9.0], 1.0);
    invariants &= (w.iter().sum::<f64>() - 1.0).abs() < 1e-12;
    Ok((
        oracle_ok >= 4 && stride_ok >= 3 && invariants,
        format!(
            "swing-up within 6 s: oracle {oracle_ok}/5 (need >= 4), STRIDE {stride_ok}/5 (need >= 3); weight normalization and shift invariance on every step: {invariants}"
        ),
    ))
}

fn criterion_11(fx: &Fixtures) -> Outcome {
    let env = EnvSpec::bouncing_pendulum();
    let ds = common::small_dataset(&env, 600, 5);
    let c = TrainConfig {
        steps: 60,
        batch_size: 64,
        hidden: vec![32, 32],
        ..TrainConfig::default()
    };
    let mut same_losses = true;
    let mut same_evals = true;
    let mut same_ckpt = true;
    let small = RolloutConfig {
        starts: 8,
        replicates: 4,
        ..rollout_cfg()
    };
    for kind in [
        stride_core::model::ModelKind::Stride,
        stride_core::model::ModelKind::Delan,
        stride_core::model::ModelKind::Onn,
        stride_core::model::ModelKind::LnnDiffusion,
        stride_core::model::ModelKind::PureDiffusion,
    ] {
        let (a, ca) = AnyModel::train(kind, &ds, &c)?;
        let (b, cb) = AnyModel::train(kind, &ds, &c)?;
        same_losses &= ca == cb;
        let ra = eval_rollout(a.as_model(), &ds, &small)?;
        let rb = eval_rollout(b.as_model(), &ds, &small)?;
        same_evals &= ra.to_csv() == rb.to_csv();
        let ck = Checkpoint::new(a, 5);
        let back = Checkpoint::from_json(&ck.to_json())?;
        let rc = eval_rollout(back.model.as_model(), &ds, &small)?;
        same_ckpt &= ra.to_csv() == rc.to_csv() && back.to_json() == ck.to_json();
        let idx: Vec<usize> = (0..64).collect();
        let input = ModelInput::from_batch(ds.train_set().select(&idx).contexts, &env.feature_map());
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = r1.clone();
        let p1 = ck.model.as_model().predict(&input, &mut Latent::Sampled(&mut r1), None)?;
        let p2 = back.model.as_model().predict(&input, &mut Latent::Sampled(&mut r2), None)?;
        same_ckpt &= format!("{p1:?}") == format!("{p2:?}");
    }
    // Evaluation of a fully trained model is repeatable too.
    let f1 = eval_force(&fx.stride[0], &fx.bounce_test, None, 4, 3)?;
    let f2 = eval_force(&fx.stride[0], &fx.bounce_test, None, 4, 3)?;
    same_evals &= f1 == f2;
    Ok((
        same_losses && same_evals && same_ckpt,
        format!("identical loss curves {same_losses}, identical evaluations {same_evals}, bit-exact checkpoint round trip {same_ckpt}"),
    ))
}

#[test]
fn acceptance_criteria() {
    println!();
    run(1, criterion_1);
    let t0 = Instant::now();
    let fx = build_fixtures();
    println!(
        "fixtures: {} bouncing / {} pendulum training records, {} held-out, trained in {:.0} s (amortized over criteria 2-11)",
        fx.bounce_train.len(),
        fx.pend_train.len(),
        fx.bounce_test.len(),
        fx.train_seconds.max(t0.elapsed().as_secs_f64())
    );
    run(2, || criterion_2(&fx));
    run(3, || criterion_3(&fx));
    run(4, criterion_4);
    run(5, || criterion_5(&fx));
    run(6, || criterion_6(&fx));
    run(7, || criterion_7(&fx));
    run(8, || criterion_8(&fx));
    run(9, || criterion_9(&fx));
    run(10, || criterion_10(&fx));
    run(11, || criterion_11(&fx));
}
