mod common;

use approx::assert_abs_diff_eq;
use common::small_dataset;
use ndarray::Array2;
use stride_core::baselines::{DelanModel, LnnDiffusionModel};
use stride_core::cfm::FlowField;
use stride_core::envs::EnvSpec;
use stride_core::error::Error;
use stride_core::eval::*;
use stride_core::model::{FrozenModel, Latent, ModelInput, OracleModel};
use stride_core::persistence::{AnyModel, Checkpoint};
use stride_core::model::ModelKind;
use stride_core::train::TrainConfig;

fn zero_cfg(horizon: usize) -> RolloutConfig {
    RolloutConfig {
        horizon,
        starts: 16,
        z_policy: ZPolicy::Zero,
        ..RolloutConfig::default()
    }
}

#[test]
fn oracle_rollout_error_vanishes_on_every_env() {
    for env in [EnvSpec::pendulum(), EnvSpec::bouncing_pendulum(), EnvSpec::cartpole()] {
        let ds = small_dataset(&env, 400, 11);
        let r = eval_rollout(&OracleModel { env: env.clone() }, &ds, &zero_cfg(30)).unwrap();
        assert!(r.cumulative() < 1e-8, "{:?}: {}", env.kind, r.cumulative());
        let frac = r.residual_fraction.unwrap();
        assert!(frac.iter().all(|f| (0.0..=1.0).contains(f)));
    }
}

#[test]
fn frozen_model_error_grows_with_horizon() {
    let env = EnvSpec::pendulum();
    let ds = small_dataset(&env, 400, 12);
    let frozen = FrozenModel { features: env.feature_map() };
    let r = eval_rollout(&frozen, &ds, &zero_cfg(30)).unwrap();
    assert!(r.per_step_rmse[29] > 5.0 * r.per_step_rmse[0]);
    assert!(r.cumulative_rmse.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn short_trajectory_is_rejected() {
    let env = EnvSpec::pendulum();
    let ds = small_dataset(&env, 20, 1);
    let err = eval_rollout(&OracleModel { env }, &ds, &zero_cfg(30)).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn oracle_force_error_is_zero() {
    let env = EnvSpec::bouncing_pendulum();
    let ds = small_dataset(&env, 1500, 13);
    let oracle = OracleModel { env: env.clone() };
    let (contact, flight) = ds.contact_split();
    assert!(!contact.is_empty());
    let r = eval_force(&oracle, &ds, Some(&contact), 4, 0).unwrap();
    assert_eq!(r.rmse, 0.0);
    assert!(r.peak_force > 0.0);
    let implied = eval_implied_force(&oracle, &ds, Some(&contact), 0).unwrap();
    assert!(implied.rmse < 1e-9 * implied.peak_force, "{}", implied.rmse);
    // Flight records carry no external force.
    let r = eval_force(&oracle, &ds, Some(&flight), 1, 0).unwrap();
    assert_eq!((r.rmse, r.peak_force), (0.0, 0.0));
}

#[test]
fn force_error_needs_a_force_stream() {
    let env = EnvSpec::bouncing_pendulum();
    let ds = small_dataset(&env, 200, 14);
    let cfg = TrainConfig { hidden: vec![8], ..TrainConfig::default() };
    let delan = DelanModel::new(&env, &ds.train_set(), &cfg);
    assert!(matches!(eval_force(&delan, &ds, None, 2, 0), Err(Error::Unsupported(_))));
}

#[test]
fn analytic_phase_portrait_eigenvalues() {
    let env = EnvSpec::pendulum();
    let r = eval_phase_portrait(&OracleModel { env }, &grid(-1.0, 1.0, 3), &grid(-1.0, 1.0, 3), 4, 0).unwrap();
    let w = (9.81f64).sqrt();
    assert!(r.upright.is_saddle());
    assert_abs_diff_eq!(r.upright.values[0].0, w, epsilon = 1e-4);
    assert_abs_diff_eq!(r.upright.values[1].0, -w, epsilon = 1e-4);
    assert!(r.downward.is_near_center(1e-6));
    assert_abs_diff_eq!(r.downward.values[0].1.abs(), w, epsilon = 1e-4);
    assert_eq!(r.nodes.len(), 9);
}

#[test]
fn single_step_sampler_is_one_euler_step() {
    let f = FlowField::new(2, 3, &[8, 8], 5);
    let z0 = Array2::from_shape_vec((2, 2), vec![0.1, -0.4, 1.2, 0.3]).unwrap();
    let c = Array2::from_shape_vec((2, 3), vec![0.5, -1.0, 0.0, 2.0, 0.1, -0.3]).unwrap();
    let one = f.sample(&z0, &c, 1).unwrap();
    let manual = &z0 + &f.velocity(&z0, 0.0, &c);
    assert_eq!(one, manual);
}

#[test]
fn diffusion_beyond_its_schedule_is_unsupported() {
    let env = EnvSpec::pendulum();
    let ds = small_dataset(&env, 200, 15);
    let cfg = TrainConfig { hidden: vec![8], ..TrainConfig::default() };
    let m = LnnDiffusionModel::new(&env, &ds.train_set(), &cfg);
    let input = ModelInput::from_batch(ds.contexts(0..4), &env.feature_map());
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let out = stride_core::model::DynamicsModel::predict(&m, &input, &mut Latent::Sampled(&mut rng), Some(64));
    assert!(matches!(out, Err(Error::Unsupported(_))));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let env = EnvSpec::bouncing_pendulum();
    let ds = small_dataset(&env, 300, 16);
    let cfg = TrainConfig { steps: 20, hidden: vec![8, 8], batch_size: 32, ..TrainConfig::default() };
    for kind in [ModelKind::Stride, ModelKind::Onn, ModelKind::Delan, ModelKind::LnnDiffusion, ModelKind::PureDiffusion] {
        let (model, _) = AnyModel::train(kind, &ds, &cfg).unwrap();
        let ck = Checkpoint::new(model, ds.seed);
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        let rc = RolloutConfig { horizon: 10, starts: 4, replicates: 2, ..RolloutConfig::default() };
        let a = eval_rollout(ck.model.as_model(), &ds, &rc).unwrap();
        let b = eval_rollout(back.model.as_model(), &ds, &rc).unwrap();
        assert_eq!(a, b, "{kind:?}");
        assert_eq!(ck.config_digest(), back.config_digest());
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let env = EnvSpec::pendulum();
    let ds = small_dataset(&env, 100, 17);
    let cfg = TrainConfig { steps: 2, hidden: vec![4], batch_size: 8, ..TrainConfig::default() };
    let (model, _) = AnyModel::train(ModelKind::Delan, &ds, &cfg).unwrap();
    let text = Checkpoint::new(model, 0).to_json();
    let cut = text.len() / 2;
    match Checkpoint::from_json(&text[..cut]) {
        Err(Error::Corrupt { offset, .. }) => assert!(offset <= cut),
        other => panic!("expected corrupt-file error, got {other:?}"),
    }
    let bumped = text.replacen("\"schema_version\":1", "\"schema_version\":99", 1);
    assert!(matches!(Checkpoint::from_json(&bumped), Err(Error::Schema(_))));
    let swapped = text.replacen("\"model_kind\":\"delan\"", "\"model_kind\":\"onn\"", 1);
    assert!(matches!(Checkpoint::from_json(&swapped), Err(Error::Schema(_))));
}

#[test]
fn checkpoint_files_round_trip() {
    let env = EnvSpec::pendulum();
    let ds = small_dataset(&env, 100, 18);
    let cfg = TrainConfig { steps: 3, hidden: vec![4], batch_size: 8, ..TrainConfig::default() };
    let (model, _) = AnyModel::train(ModelKind::Stride, &ds, &cfg).unwrap();
    let ck = Checkpoint::new(model, ds.seed);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    assert!(matches!(Checkpoint::load(&dir.path().join("missing.json")), Err(Error::Io(_))));
}
