//! Model Predictive Path Integral control over any [`DynamicsModel`].

use std::time::Instant;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::{EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::model::{observations, state_from_obs, DynamicsModel, Latent, ModelInput, OracleModel, Prediction};
use crate::state::{wrap_angle, ContextBatch, State};

/// Cost assigned to rollouts that leave the finite range.
pub const NON_FINITE_COST: f64 = 1e9;
/// Control period of a 50 Hz loop, s.
pub const LOOP_BUDGET_S: f64 = 0.02;
/// Angular band around upright counted as success, rad.
pub const UPRIGHT_BAND: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    /// On the wrapped pole-angle error from upright.
    pub angle: f64,
    pub angular_velocity: f64,
    pub control: f64,
    /// Subtracted per step while the pole is within the upright band.
    pub upright_bonus: f64,
    /// Cart position and velocity (cartpole only).
    pub cart_position: f64,
    pub cart_velocity: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            angle: 1.0,
            angular_velocity: 0.1,
            control: 0.01,
            upright_bonus: 2.0,
            cart_position: 0.5,
            cart_velocity: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MppiConfig {
    pub horizon: usize,
    pub n_samples: usize,
    pub temperature: f64,
    /// Perturbation std per coordinate; zero on unactuated coordinates.
    pub noise_std: Vec<f64>,
    pub control_min: Vec<f64>,
    pub control_max: Vec<f64>,
    pub weights: CostWeights,
    pub nfe: Option<usize>,
    /// Planner integration step, s.
    pub dt: f64,
    /// Roll out stochastic models with a zero latent instead of fresh draws.
    pub zero_latent: bool,
}

impl MppiConfig {
    pub fn for_env(env: &EnvSpec) -> Self {
        let n = env.dof();
        let bound = match env.kind {
            EnvKind::CartpoleFriction => 10.0,
            _ => 0.5 * env.mass * env.gravity * env.length,
        };
        let act = env.actuated();
        let pick = |v: f64| act.iter().map(|&a| if a { v } else { 0.0 }).collect::<Vec<_>>();
        Self {
            horizon: 30,
            n_samples: 256,
            temperature: 1.0,
            noise_std: pick(0.6 * bound),
            control_min: pick(-bound),
            control_max: pick(bound),
            weights: CostWeights::default(),
            nfe: None,
            dt: 0.05,
            zero_latent: false,
        }
        .with_dof(n)
    }

    fn with_dof(self, n: usize) -> Self {
        debug_assert_eq!(self.noise_std.len(), n);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.n_samples == 0 || !(self.temperature > 0.0) || !(self.dt > 0.0) {
            return Err(Error::Usage(format!(
                "invalid MPPI config: horizon {}, samples {}, temperature {}, dt {}",
                self.horizon, self.n_samples, self.temperature, self.dt
            )));
        }
        Ok(())
    }
}

/// Running cost of one state-control pair.
pub fn stage_cost(env: &EnvSpec, w: &CostWeights, q: &[f64], qdot: &[f64], u: &[f64]) -> f64 {
    let p = env.pole_index();
    let e = wrap_angle(q[p] - std::f64::consts::PI);
    let mut c = w.angle * e * e + w.angular_velocity * qdot[p] * qdot[p];
    c += w.control * u.iter().map(|v| v * v).sum::<f64>();
    if e.abs() < UPRIGHT_BAND {
        c -= w.upright_bonus;
    }
    if env.kind == EnvKind::CartpoleFriction {
        c += w.cart_position * q[0] * q[0] + w.cart_velocity * qdot[0] * qdot[0];
    }
    c
}

/// Softmax importance weights `exp(−(S − min S)/λ) / Σ`.
pub fn importance_weights(costs: &[f64], temperature: f64) -> Vec<f64> {
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = costs.iter().map(|s| (-(s - min) / temperature).exp()).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / z).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Predicted states of `K` rollouts: `q` and `q̇` as `K×(H+1)×n`.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub q: Array3<f64>,
    pub qdot: Array3<f64>,
    /// Number of model calls and their total wall time.
    pub calls: usize,
    pub model_seconds: f64,
}

/// Propagates `K` control sequences (`K×H×n`) from `state` with the model's
/// predictions, using semi-implicit Euler at `dt`. Observation-space models
/// are stepped at their own data period as many times as fit in `dt`.
pub fn rollout_model(
    model: &dyn DynamicsModel,
    state: &State,
    controls: &Array3<f64>,
    dt: f64,
    nfe: Option<usize>,
    latent: &mut Latent<'_>,
) -> Result<RolloutBatch> {
    let (k, h, n) = controls.dim();
    let features = model.feature_map();
    let mut q = Array2::zeros((k, n));
    let mut qd = Array2::zeros((k, n));
    for r in 0..k {
        for j in 0..n {
            q[[r, j]] = state.q[j];
            qd[[r, j]] = state.qdot[j];
        }
    }
    let mut obs = observations(&q, &qd, &features);
    let mut out_q = Array3::zeros((k, h + 1, n));
    let mut out_qd = Array3::zeros((k, h + 1, n));
    out_q.index_axis_mut(Axis(1), 0).assign(&q);
    out_qd.index_axis_mut(Axis(1), 0).assign(&qd);
    let mut calls = 0;
    let mut secs = 0.0;
    let obs_substeps = model
        .data_dt()
        .map(|d| ((dt / d).round() as usize).max(1))
        .unwrap_or(1);
    for step in 0..h {
        let tau = controls.index_axis(Axis(1), step).to_owned();
        let mut inner = 0;
        loop {
            let input = ModelInput {
                batch: ContextBatch {
                    q: q.clone(),
                    qdot: qd.clone(),
                    tau: tau.clone(),
                },
                obs: obs.clone(),
            };
            let t0 = Instant::now();
            let pred = model.predict(&input, latent, nfe);
            secs += t0.elapsed().as_secs_f64();
            calls += 1;
            match pred? {
                Prediction::Accel { accel, .. } => {
                    qd.scaled_add(dt, &accel);
                    q.scaled_add(dt, &qd);
                    obs = observations(&q, &qd, &features);
                    break;
                }
                Prediction::NextObs(next) => {
                    obs = next;
                    for r in 0..k {
                        let near = q.row(r).to_vec();
                        let s = state_from_obs(obs.row(r).as_slice().unwrap(), &features, Some(&near));
                        for j in 0..n {
                            q[[r, j]] = s.q[j];
                            qd[[r, j]] = s.qdot[j];
                        }
                    }
                    inner += 1;
                    if inner >= obs_substeps {
                        break;
                    }
                }
            }
        }
        out_q.index_axis_mut(Axis(1), step + 1).assign(&q);
        out_qd.index_axis_mut(Axis(1), step + 1).assign(&qd);
    }
    Ok(RolloutBatch {
        q: out_q,
        qdot: out_qd,
        calls,
        model_seconds: secs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MppiDiagnostics {
    pub weight_sum: f64,
    pub entropy: f64,
    pub min_cost: f64,
    pub best_index: usize,
    /// Largest weight change after adding a constant to every cost.
    pub shift_weight_error: f64,
    pub shift_argmax_invariant: bool,
    pub model_call_latency_s: f64,
    pub step_seconds: f64,
    pub within_loop_budget: bool,
    pub degraded: bool,
}

#[derive(Debug, Clone)]
pub struct Mppi {
    pub cfg: MppiConfig,
    pub env: EnvSpec,
    /// `H×n` nominal control sequence.
    pub nominal: Array2<f64>,
}

impl Mppi {
    pub fn new(env: &EnvSpec, cfg: MppiConfig) -> Result<Self> {
        cfg.validate()?;
        let n = env.dof();
        if cfg.noise_std.len() != n || cfg.control_min.len() != n || cfg.control_max.len() != n {
            return Err(Error::Usage(format!("MPPI control vectors must have length {n}")));
        }
        Ok(Self {
            nominal: Array2::zeros((cfg.horizon, n)),
            cfg,
            env: env.clone(),
        })
    }

    fn clamp(&self, u: &mut Array2<f64>) {
        for mut row in u.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = v.clamp(self.cfg.control_min[j], self.cfg.control_max[j]);
            }
        }
    }

    /// Trajectory costs of the sampled sequences.
    pub fn costs(&self, roll: &RolloutBatch, controls: &Array3<f64>) -> Vec<f64> {
        let (k, h, _) = controls.dim();
        (0..k)
            .map(|r| {
                let mut s = 0.0;
                for t in 0..h {
                    let q = roll.q.index_axis(Axis(0), r).row(t + 1).to_vec();
                    let qd = roll.qdot.index_axis(Axis(0), r).row(t + 1).to_vec();
                    let u = controls.index_axis(Axis(0), r).row(t).to_vec();
                    s += stage_cost(&self.env, &self.cfg.weights, &q, &qd, &u);
                }
                if s.is_finite() {
                    s
                } else {
                    NON_FINITE_COST
                }
            })
            .collect()
    }

    /// One planning step: returns the action to apply now.
    pub fn step(&mut self, model: &dyn DynamicsModel, state: &State, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, MppiDiagnostics)> {
        let start = Instant::now();
        let (h, n) = self.nominal.dim();
        let k = self.cfg.n_samples;
        let mut controls = Array3::zeros((k, h, n));
        for r in 0..k {
            let mut u = self.nominal.clone();
            for t in 0..h {
                for j in 0..n {
                    let e: f64 = StandardNormal.sample(rng);
                    u[[t, j]] += self.cfg.noise_std[j] * e;
                }
            }
            self.clamp(&mut u);
            controls.index_axis_mut(Axis(0), r).assign(&u);
        }
        let mut model_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let mut latent = if self.cfg.zero_latent {
            Latent::Zero
        } else {
            Latent::Sampled(&mut model_rng)
        };
        let roll = rollout_model(model, state, &controls, self.cfg.dt, self.cfg.nfe, &mut latent);
        let costs = match roll {
            Ok(r) => (self.costs(&r, &controls), r.model_seconds / r.calls.max(1) as f64),
            Err(Error::Numerical(_)) => (vec![NON_FINITE_COST; k], 0.0),
            Err(e) => return Err(e),
        };
        let (costs, latency) = costs;
        let degraded = costs.iter().all(|&c| c >= NON_FINITE_COST);
        let weights = importance_weights(&costs, self.cfg.temperature);
        let shifted: Vec<f64> = costs.iter().map(|c| c + 1234.5).collect();
        let w2 = importance_weights(&shifted, self.cfg.temperature);
        let shift_weight_error = weights
            .iter()
            .zip(&w2)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let best = argmax(&weights);
        let entropy = -weights.iter().filter(|w| **w > 0.0).map(|w| w * w.ln()).sum::<f64>();
        if !degraded {
            let mut upd = Array2::zeros((h, n));
            for (r, w) in weights.iter().enumerate() {
                upd.scaled_add(*w, &controls.index_axis(Axis(0), r));
            }
            self.nominal = upd;
        }
        let action = self.nominal.row(0).to_vec();
        // Shift the plan one step forward, repeating the last control.
        for t in 0..h - 1 {
            let next = self.nominal.row(t + 1).to_owned();
            self.nominal.row_mut(t).assign(&next);
        }
        let step_seconds = start.elapsed().as_secs_f64();
        Ok((
            action,
            MppiDiagnostics {
                weight_sum: weights.iter().sum(),
                entropy,
                min_cost: costs.iter().copied().fold(f64::INFINITY, f64::min),
                best_index: best,
                shift_weight_error,
                shift_argmax_invariant: argmax(&w2) == best,
                model_call_latency_s: latency,
                step_seconds,
                within_loop_budget: step_seconds <= LOOP_BUDGET_S,
                degraded,
            },
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub t: f64,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub action: Vec<f64>,
    pub cost: f64,
    pub diagnostics: MppiDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwingupReport {
    pub steps: Vec<PlanStep>,
    /// First time the pole entered the upright band.
    pub time_to_upright: Option<f64>,
    pub success: bool,
    pub weights_normalized: bool,
    pub shift_invariant: bool,
    pub mean_model_latency_s: f64,
}

impl SwingupReport {
    pub fn to_csv(&self) -> String {
        let n = self.steps.first().map(|s| s.q.len()).unwrap_or(0);
        let mut s = String::from("t");
        for j in 0..n {
            s.push_str(&format!(",q{j},qdot{j}"));
        }
        for j in 0..n {
            s.push_str(&format!(",action{j}"));
        }
        s.push_str(",cost,weight_entropy,model_latency_s,degraded\n");
        for p in &self.steps {
            s.push_str(&format!("{:.4}", p.t));
            for j in 0..n {
                s.push_str(&format!(",{:e},{:e}", p.q[j], p.qdot[j]));
            }
            for a in &p.action {
                s.push_str(&format!(",{a:e}"));
            }
            s.push_str(&format!(
                ",{:e},{:e},{:e},{}\n",
                p.cost, p.diagnostics.entropy, p.diagnostics.model_call_latency_s, p.diagnostics.degraded
            ));
        }
        s
    }
}

/// Closed-loop swing-up from near the hanging position against the true
/// simulator. Actions are held for the planner step.
pub fn run_swingup(
    model: &dyn DynamicsModel,
    env: &EnvSpec,
    cfg: &MppiConfig,
    seconds: f64,
    seed: u64,
) -> Result<SwingupReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planner = Mppi::new(env, cfg.clone())?;
    let n = env.dof();
    let mut s = State::new(vec![0.0; n], vec![0.0; n]);
    s.q[env.pole_index()] = rng.random_range(-0.1..0.1);
    let plant_steps = ((cfg.dt / env.dt).round() as usize).max(1);
    let n_steps = (seconds / cfg.dt).round() as usize;
    let mut steps = Vec::with_capacity(n_steps);
    let mut time_to_upright = None;
    for i in 0..n_steps {
        let t = i as f64 * cfg.dt;
        let e = wrap_angle(s.q[env.pole_index()] - std::f64::consts::PI);
        if time_to_upright.is_none() && e.abs() < UPRIGHT_BAND {
            time_to_upright = Some(t);
        }
        let (action, diag) = planner.step(model, &s, &mut rng)?;
        let cost = stage_cost(env, &cfg.weights, &s.q, &s.qdot, &action);
        steps.push(PlanStep {
            t,
            q: s.q.clone(),
            qdot: s.qdot.clone(),
            action: action.clone(),
            cost,
            diagnostics: diag,
        });
        for _ in 0..plant_steps {
            env.step_in_place(&mut s.q, &mut s.qdot, &action);
        }
        if !s.is_finite() {
            return Err(Error::Numerical(format!("plant state diverged at t = {t}")));
        }
    }
    if time_to_upright.is_none() {
        let e = wrap_angle(s.q[env.pole_index()] - std::f64::consts::PI);
        if e.abs() < UPRIGHT_BAND {
            time_to_upright = Some(seconds);
        }
    }
    let weights_normalized = steps
        .iter()
        .all(|p| (p.diagnostics.weight_sum - 1.0).abs() <= 1e-12);
    let shift_invariant = steps.iter().all(|p| p.diagnostics.shift_argmax_invariant);
    let mean_model_latency_s =
        steps.iter().map(|p| p.diagnostics.model_call_latency_s).sum::<f64>() / steps.len().max(1) as f64;
    Ok(SwingupReport {
        success: time_to_upright.is_some_and(|t| t <= seconds),
        time_to_upright,
        steps,
        weights_normalized,
        shift_invariant,
        mean_model_latency_s,
    })
}

/// Torques from an MPPI swing-up controller using the analytic model, held
/// for each planner step and logged once per record.
pub fn expert_torques(env: &EnvSpec, initial: &State, n_records: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let oracle = OracleModel { env: env.clone() };
    let mut cfg = MppiConfig::for_env(env);
    cfg.n_samples = 64;
    cfg.horizon = 20;
    let mut planner = Mppi::new(env, cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let per_plan = ((cfg.dt / env.record_dt()).round() as usize).max(1);
    let mut s = initial.clone();
    let mut out = Vec::with_capacity(n_records);
    let mut action = vec![0.0; env.dof()];
    for k in 0..n_records {
        if k % per_plan == 0 {
            action = planner.step(&oracle, &s, &mut rng)?.0;
        }
        out.push(action.clone());
        env.advance_record(&mut s.q, &mut s.qdot, &action);
    }
    Ok(out)
}
