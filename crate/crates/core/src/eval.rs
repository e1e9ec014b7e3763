//! Rollout error, force error, residual allocation, NFE sweeps and phase
//! portraits.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryDataset;
use crate::envs::{EnvSpec, Integrator};
use crate::error::{Error, Result};
use crate::model::{observations, state_from_obs, DynamicsModel, Latent, ModelInput, Prediction};
use crate::persistence::digest_of;
use crate::state::{ContextBatch, Standardizer, State};

/// Default number of latent replicates for stochastic evaluation.
pub const REPLICATES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZPolicy {
    /// Fresh latent draws each step; the median over replicates is reported.
    Sampled,
    /// Zero latent throughout.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub starts: usize,
    pub z_policy: ZPolicy,
    pub replicates: usize,
    pub nfe: Option<usize>,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            horizon: 30,
            starts: 64,
            z_policy: ZPolicy::Sampled,
            replicates: REPLICATES,
            nfe: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub horizon: usize,
    /// Normalized observation RMSE after each step.
    pub per_step_rmse: Vec<f64>,
    /// `sqrt(Σ_{h ≤ k} MSE_h)` for `k = 1..=H`.
    pub cumulative_rmse: Vec<f64>,
    /// Residual force error per step, for models with a force stream.
    pub per_step_force_error: Option<Vec<f64>>,
    /// Residual share of predicted acceleration per step.
    pub residual_fraction: Option<Vec<f64>>,
    pub anchors: Vec<usize>,
    pub seed: u64,
    pub config_digest: String,
}

impl RolloutReport {
    pub fn cumulative(&self) -> f64 {
        *self.cumulative_rmse.last().unwrap_or(&0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# seed={} config_digest={}\n", self.seed, self.config_digest);
        s.push_str("step,rmse,cumulative_rmse,force_error,residual_fraction\n");
        for h in 0..self.horizon {
            let opt = |v: &Option<Vec<f64>>| v.as_ref().map(|v| format!("{:e}", v[h])).unwrap_or_else(|| "NA".into());
            s.push_str(&format!(
                "{},{:e},{:e},{},{}\n",
                h + 1,
                self.per_step_rmse[h],
                self.cumulative_rmse[h],
                opt(&self.per_step_force_error),
                opt(&self.residual_fraction)
            ));
        }
        s
    }
}

/// Observation standardizer fitted on the whole dataset.
pub fn observation_scale(ds: &TrajectoryDataset) -> Standardizer {
    Standardizer::fit(&ds.observations(0..ds.len()), 1e-8)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn median_of(v: &[f64]) -> f64 {
    median(&mut v.to_vec())
}

/// Accelerations with residual diagnostics from the first evaluation of a
/// step.
struct StepInfo {
    force: Option<Array2<f64>>,
    residual_accel: Option<Array2<f64>>,
    accel: Array2<f64>,
}

/// Advances a batch by one logged record with a model's accelerations,
/// using the environment's own integrator and step. Every evaluation within
/// the record reuses the same latent draw.
fn advance_with_model(
    model: &dyn DynamicsModel,
    env: &EnvSpec,
    q: &mut Array2<f64>,
    qd: &mut Array2<f64>,
    tau: &Array2<f64>,
    step_seed: Option<u64>,
    nfe: Option<usize>,
) -> Result<StepInfo> {
    let features = model.feature_map();
    let mut first: Option<StepInfo> = None;
    let mut eval = |q: &Array2<f64>, qd: &Array2<f64>| -> Result<Array2<f64>> {
        let input = ModelInput::from_batch(
            ContextBatch {
                q: q.clone(),
                qdot: qd.clone(),
                tau: tau.clone(),
            },
            &features,
        );
        let mut rng;
        let mut latent = match step_seed {
            Some(s) => {
                rng = ChaCha8Rng::seed_from_u64(s);
                Latent::Sampled(&mut rng)
            }
            None => Latent::Zero,
        };
        match model.predict(&input, &mut latent, nfe)? {
            Prediction::Accel {
                accel,
                residual_force,
                residual_accel,
            } => {
                if first.is_none() {
                    first = Some(StepInfo {
                        force: residual_force,
                        residual_accel,
                        accel: accel.clone(),
                    });
                }
                Ok(accel)
            }
            Prediction::NextObs(_) => Err(Error::Usage("observation model in acceleration rollout".into())),
        }
    };
    let dt = env.dt;
    let (rows, n) = q.dim();
    for _ in 0..env.record_every {
        match env.integrator {
            Integrator::SemiImplicitEuler => {
                let a = eval(q, qd)?;
                for r in 0..rows {
                    for i in 0..n {
                        qd[[r, i]] += a[[r, i]] * dt;
                        q[[r, i]] += qd[[r, i]] * dt;
                    }
                }
            }
            Integrator::Rk4 => {
                let k1a = eval(q, qd)?;
                let mut tq = q.clone();
                let mut tv = qd.clone();
                for r in 0..rows {
                    for i in 0..n {
                        tq[[r, i]] = q[[r, i]] + 0.5 * dt * qd[[r, i]];
                        tv[[r, i]] = qd[[r, i]] + 0.5 * dt * k1a[[r, i]];
                    }
                }
                let k2q = tv.clone();
                let k2a = eval(&tq, &tv)?;
                for r in 0..rows {
                    for i in 0..n {
                        tq[[r, i]] = q[[r, i]] + 0.5 * dt * k2q[[r, i]];
                        tv[[r, i]] = qd[[r, i]] + 0.5 * dt * k2a[[r, i]];
                    }
                }
                let k3q = tv.clone();
                let k3a = eval(&tq, &tv)?;
                for r in 0..rows {
                    for i in 0..n {
                        tq[[r, i]] = q[[r, i]] + dt * k3q[[r, i]];
                        tv[[r, i]] = qd[[r, i]] + dt * k3a[[r, i]];
                    }
                }
                let k4q = tv.clone();
                let k4a = eval(&tq, &tv)?;
                for r in 0..rows {
                    for i in 0..n {
                        q[[r, i]] += dt / 6.0 * (qd[[r, i]] + 2.0 * k2q[[r, i]] + 2.0 * k3q[[r, i]] + k4q[[r, i]]);
                        qd[[r, i]] += dt / 6.0 * (k1a[[r, i]] + 2.0 * k2a[[r, i]] + 2.0 * k3a[[r, i]] + k4a[[r, i]]);
                    }
                }
            }
        }
    }
    Ok(first.expect("at least one evaluation"))
}

/// Row-mean of `‖residual‖ / ‖accel‖`, each ratio capped at 1.
fn fraction_mean(res: &Array2<f64>, accel: &Array2<f64>) -> f64 {
    let mut s = 0.0;
    for r in 0..res.nrows() {
        let nr = res.row(r).dot(&res.row(r)).sqrt();
        let na = accel.row(r).dot(&accel.row(r)).sqrt();
        s += if na > 0.0 { (nr / na).min(1.0) } else if nr > 0.0 { 1.0 } else { 0.0 };
    }
    s / res.nrows().max(1) as f64
}

/// Open-loop rollouts of one replicate from every anchor.
fn rollout_once(
    model: &dyn DynamicsModel,
    ds: &TrajectoryDataset,
    anchors: &[usize],
    cfg: &RolloutConfig,
    obs_scale: &Standardizer,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Vec<f64>, Option<Vec<f64>>, Option<Vec<f64>>)> {
    let env = &ds.env;
    let features = model.feature_map();
    let n = ds.dof();
    let b = anchors.len();
    let mut q = Array2::zeros((b, n));
    let mut qd = Array2::zeros((b, n));
    for (r, &a) in anchors.iter().enumerate() {
        for j in 0..n {
            q[[r, j]] = ds.records[a].q[j];
            qd[[r, j]] = ds.records[a].qdot[j];
        }
    }
    let mut obs = observations(&q, &qd, &features);
    let mut mse = Vec::with_capacity(cfg.horizon);
    let mut force_err: Option<Vec<f64>> = None;
    let mut fraction: Option<Vec<f64>> = None;
    let mut rng = rng;
    for h in 0..cfg.horizon {
        let mut tau = Array2::zeros((b, n));
        for (r, &a) in anchors.iter().enumerate() {
            for j in 0..n {
                tau[[r, j]] = ds.records[a + h].tau[j];
            }
        }
        let step_seed = rng.as_deref_mut().map(|g| g.random::<u64>());
        if is_obs_model(model) {
            let input = ModelInput {
                batch: ContextBatch {
                    q: q.clone(),
                    qdot: qd.clone(),
                    tau,
                },
                obs: obs.clone(),
            };
            let mut g;
            let mut latent = match step_seed {
                Some(s) => {
                    g = ChaCha8Rng::seed_from_u64(s);
                    Latent::Sampled(&mut g)
                }
                None => Latent::Zero,
            };
            match model.predict(&input, &mut latent, cfg.nfe)? {
                Prediction::NextObs(next) => {
                    obs = next;
                    for r in 0..b {
                        let near = q.row(r).to_vec();
                        let s = state_from_obs(obs.row(r).as_slice().unwrap(), &features, Some(&near));
                        for j in 0..n {
                            q[[r, j]] = s.q[j];
                            qd[[r, j]] = s.qdot[j];
                        }
                    }
                }
                Prediction::Accel { .. } => unreachable!("checked by is_obs_model"),
            }
        } else {
            let info = advance_with_model(model, env, &mut q, &mut qd, &tau, step_seed, cfg.nfe)?;
            obs = observations(&q, &qd, &features);
            if let Some(f) = &info.force {
                let mut se = 0.0;
                for (r, &a) in anchors.iter().enumerate() {
                    for j in 0..n {
                        se += (f[[r, j]] - ds.records[a + h].f_ext[j]).powi(2);
                    }
                }
                force_err.get_or_insert_with(Vec::new).push((se / (b * n) as f64).sqrt());
            }
            if let Some(ra) = &info.residual_accel {
                fraction.get_or_insert_with(Vec::new).push(fraction_mean(ra, &info.accel));
            }
        }
        let mut se = 0.0;
        let d = obs.ncols();
        for (r, &a) in anchors.iter().enumerate() {
            let rec = &ds.records[a + h + 1];
            let mut true_obs = features.features(&rec.q);
            true_obs.extend_from_slice(&rec.qdot);
            for j in 0..d {
                let e = (obs[[r, j]] - true_obs[j]) / obs_scale.std[j];
                se += e * e;
            }
        }
        let m = se / (b * d) as f64;
        mse.push(if m.is_finite() { m } else { f64::INFINITY });
    }
    Ok((mse, force_err, fraction))
}

fn is_obs_model(model: &dyn DynamicsModel) -> bool {
    matches!(
        model.kind(),
        crate::model::ModelKind::Onn | crate::model::ModelKind::PureDiffusion
    )
}

/// Random anchors with room for `horizon` steps, without replacement.
pub fn choose_anchors(ds: &TrajectoryDataset, horizon: usize, starts: usize, seed: u64) -> Result<Vec<usize>> {
    if starts == 0 {
        return Err(Error::Usage("need at least one rollout start".into()));
    }
    if ds.len() <= horizon + 1 {
        return Err(Error::Usage(format!(
            "trajectory of {} records is too short for horizon {horizon}",
            ds.len()
        )));
    }
    let max = ds.len() - horizon - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, max, starts.min(max)).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Multi-step open-loop error from random anchors using recorded torques.
pub fn eval_rollout(model: &dyn DynamicsModel, ds: &TrajectoryDataset, cfg: &RolloutConfig) -> Result<RolloutReport> {
    if cfg.horizon == 0 {
        return Err(Error::Usage("horizon must be at least 1".into()));
    }
    if model.dof() != ds.dof() {
        return Err(Error::Usage(format!(
            "model has {} coordinates but dataset has {}",
            model.dof(),
            ds.dof()
        )));
    }
    let anchors = choose_anchors(ds, cfg.horizon, cfg.starts, cfg.seed)?;
    let scale = observation_scale(ds);
    let stochastic = cfg.z_policy == ZPolicy::Sampled && model.default_nfe().is_some();
    let reps = if stochastic { cfg.replicates.max(1) } else { 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(11);
    let mut per_rep = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut rep_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let r = rollout_once(model, ds, &anchors, cfg, &scale, stochastic.then_some(&mut rep_rng))?;
        per_rep.push(r);
    }
    let h = cfg.horizon;
    let step_median = |pick: &dyn Fn(usize, usize) -> Option<f64>| -> Option<Vec<f64>> {
        (0..h)
            .map(|k| {
                let mut v: Vec<f64> = (0..reps).filter_map(|r| pick(r, k)).collect();
                (!v.is_empty()).then(|| median(&mut v))
            })
            .collect()
    };
    let cumulative_per_rep: Vec<Vec<f64>> = per_rep
        .iter()
        .map(|(mse, _, _)| {
            let mut acc = 0.0;
            mse.iter()
                .map(|m| {
                    acc += m;
                    acc.sqrt()
                })
                .collect()
        })
        .collect();
    let per_step_rmse = step_median(&|r, k| Some(per_rep[r].0[k].sqrt())).unwrap();
    let cumulative_rmse = step_median(&|r, k| Some(cumulative_per_rep[r][k])).unwrap();
    let per_step_force_error = step_median(&|r, k| per_rep[r].1.as_ref().map(|v| v[k]));
    let residual_fraction = step_median(&|r, k| per_rep[r].2.as_ref().map(|v| v[k]));
    Ok(RolloutReport {
        horizon: h,
        per_step_rmse,
        cumulative_rmse,
        per_step_force_error,
        residual_fraction,
        anchors,
        seed: cfg.seed,
        config_digest: digest_of(cfg),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceReport {
    pub rmse: f64,
    pub peak_force: f64,
    pub fraction_of_peak: f64,
    pub points: usize,
    pub samples: usize,
    pub seed: u64,
}

impl ForceReport {
    pub fn to_csv(&self) -> String {
        format!(
            "# seed={}\nrmse,peak_force,fraction_of_peak,points,samples\n{:e},{:e},{:e},{},{}\n",
            self.seed, self.rmse, self.peak_force, self.fraction_of_peak, self.points, self.samples
        )
    }
}

fn subset_batch(ds: &TrajectoryDataset, idx: &[usize]) -> (ContextBatch, Array2<f64>, Array2<f64>) {
    let n = ds.dof();
    let mut q = Array2::zeros((idx.len(), n));
    let mut qd = Array2::zeros((idx.len(), n));
    let mut tau = Array2::zeros((idx.len(), n));
    let mut f = Array2::zeros((idx.len(), n));
    let mut qdd = Array2::zeros((idx.len(), n));
    for (r, &k) in idx.iter().enumerate() {
        let rec = &ds.records[k];
        for j in 0..n {
            q[[r, j]] = rec.q[j];
            qd[[r, j]] = rec.qdot[j];
            tau[[r, j]] = rec.tau[j];
            f[[r, j]] = rec.f_ext[j];
            qdd[[r, j]] = rec.qddot[j];
        }
    }
    (ContextBatch { q, qdot: qd, tau }, f, qdd)
}

fn force_summary(err_sq: f64, count: usize, truth: &Array2<f64>, samples: usize, seed: u64) -> ForceReport {
    let rmse = (err_sq / count.max(1) as f64).sqrt();
    let peak = truth.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ForceReport {
        rmse,
        peak_force: peak,
        fraction_of_peak: if peak > 0.0 { rmse / peak } else { f64::NAN },
        points: truth.nrows(),
        samples,
        seed,
    }
}

/// Error of the mean predicted residual force against the recorded external
/// force. `indices` selects records; `None` uses all of them.
pub fn eval_force(
    model: &dyn DynamicsModel,
    ds: &TrajectoryDataset,
    indices: Option<&[usize]>,
    samples: usize,
    seed: u64,
) -> Result<ForceReport> {
    if !model.has_force_stream() {
        return Err(Error::Unsupported(format!(
            "model '{}' has no residual force stream",
            model.kind().cli_name()
        )));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let idx = indices.unwrap_or(&all);
    let (batch, truth, _) = subset_batch(ds, idx);
    let input = ModelInput::from_batch(batch, &model.feature_map());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reps = samples.max(1);
    let mut mean = Array2::<f64>::zeros(truth.raw_dim());
    for _ in 0..reps {
        match model.predict(&input, &mut Latent::Sampled(&mut rng), None)? {
            Prediction::Accel {
                residual_force: Some(f),
                ..
            } => mean = mean + f,
            _ => return Err(Error::Unsupported("model returned no residual force".into())),
        }
    }
    mean /= reps as f64;
    let err: f64 = (&mean - &truth).iter().map(|v| v * v).sum();
    Ok(force_summary(err, truth.len(), &truth, reps, seed))
}

/// Force error of the residual implied by a model's accelerations under the
/// true rigid-body terms: `M q̈_pred + C q̇ + g − τ`.
pub fn eval_implied_force(
    model: &dyn DynamicsModel,
    ds: &TrajectoryDataset,
    indices: Option<&[usize]>,
    seed: u64,
) -> Result<ForceReport> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let idx = indices.unwrap_or(&all);
    let (batch, truth, _) = subset_batch(ds, idx);
    let input = ModelInput::from_batch(batch.clone(), &model.feature_map());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let accel = match model.predict(&input, &mut Latent::Sampled(&mut rng), None)? {
        Prediction::Accel { accel, .. } => accel,
        Prediction::NextObs(_) => {
            return Err(Error::Unsupported("implied force needs an acceleration model".into()))
        }
    };
    let n = ds.dof();
    let mut err = 0.0;
    for r in 0..idx.len() {
        let q = batch.q.row(r).to_vec();
        let qd = batch.qdot.row(r).to_vec();
        let m = ds.env.mass_matrix(&q);
        let mut bias = vec![0.0; n];
        ds.env.bias(&q, &qd, &mut bias);
        for i in 0..n {
            let ma: f64 = (0..n).map(|j| m[[i, j]] * accel[[r, j]]).sum();
            let implied = ma + bias[i] - batch.tau[[r, i]];
            err += (implied - truth[[r, i]]).powi(2);
        }
    }
    Ok(force_summary(err, truth.len(), &truth, 1, seed))
}

/// Mean residual share `‖M⁻¹ε‖ / ‖q̈_pred‖` (capped at 1) over the selected
/// records, averaged over latent samples.
pub fn residual_fraction(
    model: &dyn DynamicsModel,
    ds: &TrajectoryDataset,
    indices: &[usize],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Usage("no records selected".into()));
    }
    let (batch, _, _) = subset_batch(ds, indices);
    let input = ModelInput::from_batch(batch, &model.feature_map());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..samples.max(1) {
        match model.predict(&input, &mut Latent::Sampled(&mut rng), None)? {
            Prediction::Accel {
                accel,
                residual_accel: Some(ra),
                ..
            } => total += fraction_mean(&ra, &accel),
            _ => return Err(Error::Unsupported("model has no residual stream".into())),
        }
    }
    Ok(total / samples.max(1) as f64)
}

/// One-step acceleration RMSE against recorded accelerations, zero latent.
pub fn one_step_accel_rmse(model: &dyn DynamicsModel, ds: &TrajectoryDataset) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (batch, _, qdd) = subset_batch(ds, &idx);
    let input = ModelInput::from_batch(batch, &model.feature_map());
    match model.predict(&input, &mut Latent::Zero, None)? {
        Prediction::Accel { accel, .. } => {
            let n = ds.dof();
            Ok((0..n)
                .map(|j| {
                    let d = &accel.column(j) - &qdd.column(j);
                    (d.dot(&d) / ds.len() as f64).sqrt()
                })
                .collect())
        }
        Prediction::NextObs(_) => Err(Error::Unsupported("not an acceleration model".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NfeRow {
    pub model: String,
    pub nfe: usize,
    /// `None` where the model cannot run at this NFE.
    pub rollout_error: Option<f64>,
    pub samples_per_second: Option<f64>,
}

/// Sampler throughput in samples per second at a fixed batch, best of
/// several timed repetitions.
pub fn sampler_throughput(model: &dyn DynamicsModel, ds: &TrajectoryDataset, nfe: usize, batch: usize) -> Result<Option<f64>> {
    let idx: Vec<usize> = (0..batch).map(|i| i % ds.len()).collect();
    let (b, _, _) = subset_batch(ds, &idx);
    let input = ModelInput::from_batch(b, &model.feature_map());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut best = f64::INFINITY;
    for _ in 0..5 {
        let t0 = Instant::now();
        match model.run_sampler(&input, nfe, &mut Latent::Sampled(&mut rng)) {
            None => return Ok(None),
            Some(Err(Error::Unsupported(_))) => return Ok(None),
            Some(r) => r?,
        }
        best = best.min(t0.elapsed().as_secs_f64());
    }
    Ok(Some(batch as f64 / best.max(1e-12)))
}

/// Rollout error and sampler throughput for each model at each NFE.
pub fn eval_nfe_sweep(
    models: &[(&str, &dyn DynamicsModel)],
    ds: &TrajectoryDataset,
    nfes: &[usize],
    cfg: &RolloutConfig,
) -> Result<Vec<NfeRow>> {
    let mut rows = Vec::new();
    for (name, model) in models {
        for &nfe in nfes {
            let c = RolloutConfig {
                nfe: Some(nfe),
                ..cfg.clone()
            };
            let err = match eval_rollout(*model, ds, &c) {
                Ok(r) => Some(r.cumulative()),
                Err(Error::Unsupported(_)) => None,
                Err(e) => return Err(e),
            };
            let thr = sampler_throughput(*model, ds, nfe, 256)?;
            rows.push(NfeRow {
                model: name.to_string(),
                nfe,
                rollout_error: err,
                samples_per_second: thr,
            });
        }
    }
    Ok(rows)
}

pub fn nfe_rows_to_csv(rows: &[NfeRow]) -> String {
    let mut s = String::from("model,nfe,rollout_error,samples_per_second\n");
    for r in rows {
        let f = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_else(|| "NA".into());
        s.push_str(&format!("{},{},{},{}\n", r.model, r.nfe, f(r.rollout_error), f(r.samples_per_second)));
    }
    s
}

/// Eigenvalues of a 2×2 linearization as `(re, im)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eigen2 {
    pub jacobian: [[f64; 2]; 2],
    pub values: [(f64, f64); 2],
}

impl Eigen2 {
    pub fn of(j: [[f64; 2]; 2]) -> Self {
        let tr = j[0][0] + j[1][1];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let disc = 0.25 * tr * tr - det;
        let values = if disc >= 0.0 {
            let s = disc.sqrt();
            [(0.5 * tr + s, 0.0), (0.5 * tr - s, 0.0)]
        } else {
            let s = (-disc).sqrt();
            [(0.5 * tr, s), (0.5 * tr, -s)]
        };
        Self { jacobian: j, values }
    }

    /// Two real eigenvalues of opposite sign.
    pub fn is_saddle(&self) -> bool {
        let [(a, ai), (b, bi)] = self.values;
        ai == 0.0 && bi == 0.0 && a * b < 0.0
    }

    /// Complex pair with real part below `tol` in magnitude.
    pub fn is_near_center(&self, tol: f64) -> bool {
        let [(a, ai), _] = self.values;
        ai != 0.0 && a.abs() < tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseNode {
    pub q: f64,
    pub qdot: f64,
    pub qddot_mean: f64,
    pub qddot_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub nodes: Vec<PhaseNode>,
    /// Linearization at `(π, 0)`.
    pub upright: Eigen2,
    /// Linearization at `(0, 0)`.
    pub downward: Eigen2,
    pub samples: usize,
    pub seed: u64,
}

impl PhaseReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("# seed={} samples={}\n", self.seed, self.samples);
        for (name, e) in [("upright", &self.upright), ("downward", &self.downward)] {
            s.push_str(&format!(
                "# {name} eigenvalues: {:e}{:+e}i, {:e}{:+e}i\n",
                e.values[0].0, e.values[0].1, e.values[1].0, e.values[1].1
            ));
        }
        s.push_str("q,qdot,qddot_mean,qddot_spread\n");
        for n in &self.nodes {
            s.push_str(&format!("{:e},{:e},{:e},{:e}\n", n.q, n.qdot, n.qddot_mean, n.qddot_spread));
        }
        s
    }
}

/// `(mean, std)` of predicted `q̈` over `samples` latent draws at each point.
/// Draws come from a generator reseeded per call, so different calls with
/// equally sized inputs share their draws.
fn field_stats(
    model: &dyn DynamicsModel,
    points: &[(f64, f64)],
    samples: usize,
    seed: u64,
    dt: f64,
) -> Result<Vec<(f64, f64)>> {
    let rows = points.len();
    let q = Array2::from_shape_fn((rows, 1), |(r, _)| points[r].0);
    let qd = Array2::from_shape_fn((rows, 1), |(r, _)| points[r].1);
    let input = ModelInput::from_batch(
        ContextBatch {
            q: q.clone(),
            qdot: qd.clone(),
            tau: Array2::zeros((rows, 1)),
        },
        &model.feature_map(),
    );
    let stochastic = model.default_nfe().is_some();
    let reps = if stochastic { samples.max(1) } else { 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); rows];
    for _ in 0..reps {
        let a = match model.predict(&input, &mut Latent::Sampled(&mut rng), None)? {
            Prediction::Accel { accel, .. } => accel.column(0).to_vec(),
            Prediction::NextObs(next) => {
                let fd = model.feature_map().dim();
                (0..rows).map(|r| (next[[r, fd]] - qd[[r, 0]]) / dt).collect()
            }
        };
        for (r, v) in a.into_iter().enumerate() {
            acc[r].push(v);
        }
    }
    Ok(acc
        .into_iter()
        .map(|v| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            (m, s)
        })
        .collect())
}

fn linearize(model: &dyn DynamicsModel, q0: f64, samples: usize, seed: u64, dt: f64) -> Result<Eigen2> {
    let h = 1e-4;
    let f = |q: f64, v: f64| -> Result<f64> { Ok(field_stats(model, &[(q, v)], samples, seed, dt)?[0].0) };
    let dfdq = (f(q0 + h, 0.0)? - f(q0 - h, 0.0)?) / (2.0 * h);
    let dfdv = (f(q0, h)? - f(q0, -h)?) / (2.0 * h);
    Ok(Eigen2::of([[0.0, 1.0], [dfdq, dfdv]]))
}

/// Evenly spaced grid `a:b:steps` (inclusive).
pub fn grid(a: f64, b: f64, steps: usize) -> Vec<f64> {
    if steps <= 1 {
        return vec![a];
    }
    (0..steps).map(|i| a + (b - a) * i as f64 / (steps - 1) as f64).collect()
}

/// Unforced vector field on a grid plus linearizations at both equilibria.
pub fn eval_phase_portrait(
    model: &dyn DynamicsModel,
    q_grid: &[f64],
    qdot_grid: &[f64],
    samples: usize,
    seed: u64,
) -> Result<PhaseReport> {
    if model.dof() != 1 {
        return Err(Error::Usage("phase portraits need a one-coordinate model".into()));
    }
    let dt = model.data_dt().unwrap_or(1e-2);
    let points: Vec<(f64, f64)> = q_grid
        .iter()
        .flat_map(|&q| qdot_grid.iter().map(move |&v| (q, v)))
        .collect();
    let stats = field_stats(model, &points, samples, seed, dt)?;
    let nodes = points
        .iter()
        .zip(stats)
        .map(|(&(q, v), (m, s))| PhaseNode {
            q,
            qdot: v,
            qddot_mean: m,
            qddot_spread: s,
        })
        .collect();
    Ok(PhaseReport {
        nodes,
        upright: linearize(model, std::f64::consts::PI, samples, seed, dt)?,
        downward: linearize(model, 0.0, samples, seed, dt)?,
        samples,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// `max_t |E(t) − E(0)|` of the tracked energy.
    pub drift: f64,
    /// `max − min` of the potential along the trajectory.
    pub spread: f64,
    pub energies: Vec<f64>,
}

/// Unforced rollout with a zero latent; energy measured with the model's
/// own learned energy.
pub fn learned_energy_rollout(model: &dyn DynamicsModel, env: &EnvSpec, s0: &State, seconds: f64) -> Result<EnergyReport> {
    let n = env.dof();
    let records = (seconds / env.record_dt()).round() as usize;
    let mut q = Array2::from_shape_vec((1, n), s0.q.clone()).unwrap();
    let mut qd = Array2::from_shape_vec((1, n), s0.qdot.clone()).unwrap();
    let tau = Array2::zeros((1, n));
    let energy = |q: &Array2<f64>, qd: &Array2<f64>| -> Result<(f64, f64)> {
        let s = State::new(q.row(0).to_vec(), qd.row(0).to_vec());
        let e = model
            .learned_energy(&s)
            .ok_or_else(|| Error::Unsupported("model has no learned energy".into()))?;
        Ok((e, model.learned_potential(&s.q).unwrap()))
    };
    let (e0, v0) = energy(&q, &qd)?;
    let mut energies = vec![e0];
    let (mut vmin, mut vmax) = (v0, v0);
    for _ in 0..records {
        advance_with_model(model, env, &mut q, &mut qd, &tau, None, None)?;
        let (e, v) = energy(&q, &qd)?;
        energies.push(e);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    let drift = energies.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max);
    Ok(EnergyReport {
        drift,
        spread: vmax - vmin,
        energies,
    })
}

/// Unforced open-loop rollout of any model, one record at a time, scored by
/// the analytic energy of the predicted states.
pub fn analytic_energy_rollout(model: &dyn DynamicsModel, env: &EnvSpec, s0: &State, seconds: f64) -> Result<EnergyReport> {
    let n = env.dof();
    let records = (seconds / env.record_dt()).round() as usize;
    let features = model.feature_map();
    let mut q = Array2::from_shape_vec((1, n), s0.q.clone()).unwrap();
    let mut qd = Array2::from_shape_vec((1, n), s0.qdot.clone()).unwrap();
    let mut obs = observations(&q, &qd, &features);
    let tau = Array2::zeros((1, n));
    let e0 = env.energy(&s0.q, &s0.qdot);
    let mut energies = vec![e0];
    let zero = vec![0.0; n];
    let v0 = env.energy(&s0.q, &zero);
    let (mut vmin, mut vmax) = (v0, v0);
    for _ in 0..records {
        if is_obs_model(model) {
            let input = ModelInput {
                batch: ContextBatch {
                    q: q.clone(),
                    qdot: qd.clone(),
                    tau: tau.clone(),
                },
                obs: obs.clone(),
            };
            if let Prediction::NextObs(next) = model.predict(&input, &mut Latent::Zero, None)? {
                obs = next;
                let near = q.row(0).to_vec();
                let s = state_from_obs(obs.row(0).as_slice().unwrap(), &features, Some(&near));
                q.row_mut(0).assign(&ndarray::ArrayView1::from(&s.q));
                qd.row_mut(0).assign(&ndarray::ArrayView1::from(&s.qdot));
            }
        } else {
            advance_with_model(model, env, &mut q, &mut qd, &tau, None, None)?;
            obs = observations(&q, &qd, &features);
        }
        let (qv, qdv) = (q.row(0).to_vec(), qd.row(0).to_vec());
        let e = env.energy(&qv, &qdv);
        energies.push(if e.is_finite() { e } else { f64::INFINITY });
        let v = env.energy(&qv, &zero);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    let drift = energies.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max);
    Ok(EnergyReport {
        drift,
        spread: vmax - vmin,
        energies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_classification() {
        let g: f64 = 9.81;
        let up = Eigen2::of([[0.0, 1.0], [g, 0.0]]);
        assert!(up.is_saddle());
        assert!((up.values[0].0 - g.sqrt()).abs() < 1e-12);
        let down = Eigen2::of([[0.0, 1.0], [-g, 0.0]]);
        assert!(down.is_near_center(1e-9));
        assert!((down.values[0].1.abs() - 3.132).abs() < 1e-3);
    }

    #[test]
    fn grid_endpoints() {
        assert_eq!(grid(-1.0, 1.0, 3), vec![-1.0, 0.0, 1.0]);
        assert_eq!(grid(2.0, 5.0, 1), vec![2.0]);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median_of(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median_of(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
