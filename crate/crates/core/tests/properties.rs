use nalgebra::DMatrix;
use proptest::prelude::*;
use stride_core::cfm::cfm_training_pair;
use stride_core::data::{generate_dataset, Policy, TrajectoryDataset};
use stride_core::envs::{EnvKind, EnvSpec};
use stride_core::lnn::LnnParams;
use stride_core::mppi::importance_weights;
use stride_core::state::{wrap_angle, ContextEncoder, State};

fn min_eigenvalue(m: &ndarray::Array2<f64>) -> f64 {
    let n = m.nrows();
    let d = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    d.symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

fn env_of(k: u8) -> EnvSpec {
    match k % 3 {
        0 => EnvSpec::pendulum(),
        1 => EnvSpec::bouncing_pendulum(),
        _ => EnvSpec::cartpole(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn learned_mass_is_symmetric_positive_definite(
        seed in 0u64..1000,
        cart in any::<bool>(),
        q in prop::collection::vec(-10.0f64..10.0, 2),
        scale in 0.1f64..3.0,
    ) {
        let env = if cart { EnvSpec::cartpole() } else { EnvSpec::pendulum() };
        let mut lnn = LnnParams::new(ContextEncoder::identity(env.feature_map()), &[16, 16], seed);
        // Scaled weights move the factor away from its initialization.
        let flat: Vec<f64> = lnn.flat().iter().map(|v| v * scale).collect();
        lnn.set_flat(&flat);
        let m = lnn.mass_matrix(&q[..env.dof()]);
        for i in 0..env.dof() {
            for j in 0..env.dof() {
                prop_assert_eq!(m[[i, j]], m[[j, i]]);
            }
        }
        prop_assert!(min_eigenvalue(&m) > 0.0);
    }

    #[test]
    fn importance_weights_normalize_and_ignore_shifts(
        costs in prop::collection::vec(-1e3f64..1e3, 1..64),
        shift in -1e4f64..1e4,
        temp in 1e-3f64..10.0,
    ) {
        let w = importance_weights(&costs, temp);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|v| *v >= 0.0 && v.is_finite()));
        let shifted: Vec<f64> = costs.iter().map(|c| c + shift).collect();
        let w2 = importance_weights(&shifted, temp);
        for (a, b) in w.iter().zip(&w2) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn conditional_path_hits_endpoints(
        x1 in prop::collection::vec(-5.0f64..5.0, 3),
        z0 in prop::collection::vec(-5.0f64..5.0, 3),
        t in 0.0f64..=1.0,
    ) {
        let (zt0, u) = cfm_training_pair(&x1, &z0, 0.0, 0.0);
        prop_assert_eq!(&zt0, &z0);
        let (zt1, _) = cfm_training_pair(&x1, &z0, 1.0, 0.0);
        for i in 0..3 {
            prop_assert!((zt1[i] - x1[i]).abs() < 1e-12);
            prop_assert!((u[i] - (x1[i] - z0[i])).abs() < 1e-12);
        }
        // The target velocity does not depend on t.
        let (_, ut) = cfm_training_pair(&x1, &z0, t, 0.01);
        let (_, u0) = cfm_training_pair(&x1, &z0, 0.0, 0.01);
        prop_assert_eq!(ut, u0);
    }

    #[test]
    fn wrapped_angles_stay_in_range(a in -1e3f64..1e3) {
        let w = wrap_angle(a);
        prop_assert!(w > -std::f64::consts::PI - 1e-12 && w <= std::f64::consts::PI + 1e-12);
        prop_assert!(((a - w) / (2.0 * std::f64::consts::PI)).fract().abs() < 1e-6
            || (1.0 - ((a - w) / (2.0 * std::f64::consts::PI)).fract().abs()) < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn datasets_round_trip_byte_for_byte(
        k in 0u8..3,
        n in 1usize..80,
        noise in 0.0f64..0.1,
        seed in 0u64..1_000_000,
        policy in 0u8..2,
    ) {
        let env = env_of(k);
        let policy = if policy == 0 { Policy::RandomTorque } else { Policy::SineSweep };
        let ds = generate_dataset(&env, policy, n, noise, seed).unwrap();
        let text = ds.to_jsonl();
        let back = TrajectoryDataset::from_jsonl(&text).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn true_energy_is_conserved_without_forcing(q0 in -2.5f64..2.5, v0 in -2.0f64..2.0) {
        let env = EnvSpec::pendulum();
        prop_assume!(env.kind == EnvKind::Pendulum && env.joint_damping == 0.0);
        let mut s = State::new(vec![q0], vec![v0]);
        let e0 = env.energy(&s.q, &s.qdot);
        for _ in 0..2000 {
            env.step_in_place(&mut s.q, &mut s.qdot, &[0.0]);
        }
        prop_assert!((env.energy(&s.q, &s.qdot) - e0).abs() < 1e-6 * e0.abs().max(1.0));
    }
}
