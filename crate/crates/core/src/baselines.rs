//! Comparison models: a black-box next-observation network, the Lagrangian
//! prior alone, a DDPM residual on top of the prior, and a DDPM over next
//! observations.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cfm::ConditionalNet;
use crate::data::{TrainSet, TrajectoryDataset};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::lnn::{columns, LnnParams};
use crate::model::{DynamicsModel, Latent, ModelInput, ModelKind, Prediction};
use crate::nets::{Mlp, MlpSpec};
use crate::state::{FeatureMap, Standardizer, State};
use crate::stride::{accel_error, fit_encoder, mass_times, predict_with_residual, OutputScales};
use crate::train::{fit, LossCurve, LossTerms, Objective, TrainConfig};

pub const DEFAULT_DIFFUSION_STEPS: usize = 50;
/// Bound on the predicted clean sample during ancestral sampling.
pub const X0_CLIP: f64 = 10.0;

fn mean_sq_cols(tape: &mut Tape, d: Var, cols: usize) -> Var {
    let sq = tape.square(d);
    let s = tape.sum_cols(sq);
    tape.scale(s, 1.0 / cols as f64)
}

fn obs_dim(features: &FeatureMap) -> usize {
    features.dim() + features.dof()
}

/// Black-box network mapping `(obs_t, τ_t)` to `obs_{t+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnnModel {
    pub net: Mlp,
    pub features: FeatureMap,
    pub obs_norm: Standardizer,
    pub tau_norm: Standardizer,
    pub config: TrainConfig,
    pub env: EnvSpec,
}

impl OnnModel {
    pub fn new(env: &EnvSpec, data: &TrainSet, cfg: &TrainConfig) -> Self {
        let features = env.feature_map();
        let d = obs_dim(&features);
        let n = env.dof();
        let mut spec = MlpSpec::default_dynamics(d + n, d);
        spec.hidden = cfg.hidden.clone();
        Self {
            net: Mlp::new(spec, cfg.seed.wrapping_mul(2).wrapping_add(11)),
            obs_norm: Standardizer::fit(&data.obs, 1e-6),
            tau_norm: Standardizer::fit(&data.contexts.tau, 1e-6),
            features,
            config: cfg.clone(),
            env: env.clone(),
        }
    }

    pub fn train(ds: &TrajectoryDataset, cfg: &TrainConfig) -> Result<(Self, LossCurve)> {
        let data = ds.train_set();
        let mut m = Self::new(&ds.env, &data, cfg);
        let curve = fit(&mut m, &data, cfg)?;
        Ok((m, curve))
    }

    fn input(&self, obs: &Array2<f64>, tau: &Array2<f64>) -> Array2<f64> {
        let o = self.obs_norm.apply(obs);
        let t = self.tau_norm.apply(tau);
        ndarray::concatenate(Axis(1), &[o.view(), t.view()]).unwrap()
    }

    pub fn predict_next(&self, obs: &Array2<f64>, tau: &Array2<f64>) -> Result<Array2<f64>> {
        let z = self.net.forward(&self.input(obs, tau))?;
        Ok(self.obs_norm.invert(&z))
    }
}

impl Objective for OnnModel {
    fn params(&self) -> Vec<f64> {
        self.net.params.flat.clone()
    }

    fn set_params(&mut self, flat: &[f64]) {
        self.net.params.flat.copy_from_slice(flat);
    }

    fn loss_on_tape(&self, tape: &mut Tape, theta: Var, batch: &TrainSet, _rng: &mut ChaCha8Rng) -> Result<LossTerms> {
        let bound = self.net.bind(tape, theta, 0);
        let x = tape.leaf(self.input(&batch.obs, &batch.contexts.tau));
        let y = bound.forward(tape, x);
        let target = tape.leaf(self.obs_norm.apply(&batch.next_obs));
        let d = tape.sub(y, target);
        let l = mean_sq_cols(tape, d, batch.next_obs.ncols());
        Ok(LossTerms {
            total: l,
            accel: Some(l),
            generative: None,
        })
    }
}

impl DynamicsModel for OnnModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Onn
    }

    fn dof(&self) -> usize {
        self.features.dof()
    }

    fn feature_map(&self) -> FeatureMap {
        self.features.clone()
    }

    fn data_dt(&self) -> Option<f64> {
        Some(self.env.record_dt())
    }

    fn predict(&self, input: &ModelInput, _latent: &mut Latent<'_>, _nfe: Option<usize>) -> Result<Prediction> {
        Ok(Prediction::NextObs(self.predict_next(&input.obs, &input.batch.tau)?))
    }
}

/// The Lagrangian prior trained on acceleration error alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelanModel {
    pub lnn: LnnParams,
    pub scales: OutputScales,
    pub config: TrainConfig,
    pub env: EnvSpec,
}

impl DelanModel {
    pub fn new(env: &EnvSpec, data: &TrainSet, cfg: &TrainConfig) -> Self {
        Self {
            lnn: LnnParams::new(fit_encoder(env, data), &cfg.hidden, cfg.seed),
            scales: OutputScales::fit(data),
            config: cfg.clone(),
            env: env.clone(),
        }
    }

    pub fn train(ds: &TrajectoryDataset, cfg: &TrainConfig) -> Result<(Self, LossCurve)> {
        let data = ds.train_set();
        let mut m = Self::new(&ds.env, &data, cfg);
        let curve = fit(&mut m, &data, cfg)?;
        Ok((m, curve))
    }
}

impl Objective for DelanModel {
    fn params(&self) -> Vec<f64> {
        self.lnn.flat()
    }

    fn set_params(&mut self, flat: &[f64]) {
        self.lnn.set_flat(flat);
    }

    fn loss_on_tape(&self, tape: &mut Tape, theta: Var, batch: &TrainSet, _rng: &mut ChaCha8Rng) -> Result<LossTerms> {
        let b = &batch.contexts;
        let enc = self.lnn.encoder.encode(b, true);
        let out = self.lnn.eval_on_tape(tape, theta, 0, &enc, &b.qdot, &b.tau);
        let l = accel_error(tape, &out.accel, &batch.qddot, &self.scales.accel);
        Ok(LossTerms {
            total: l,
            accel: Some(l),
            generative: None,
        })
    }
}

impl DynamicsModel for DelanModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Delan
    }

    fn dof(&self) -> usize {
        self.lnn.dof()
    }

    fn feature_map(&self) -> FeatureMap {
        self.lnn.encoder.features.clone()
    }

    fn data_dt(&self) -> Option<f64> {
        Some(self.env.record_dt())
    }

    fn predict(&self, input: &ModelInput, _latent: &mut Latent<'_>, _nfe: Option<usize>) -> Result<Prediction> {
        Ok(Prediction::Accel {
            accel: self.lnn.accel_batch(&input.batch)?,
            residual_force: None,
            residual_accel: None,
        })
    }

    fn mass_matrix(&self, q: &[f64]) -> Option<Array2<f64>> {
        Some(self.lnn.mass_matrix(q))
    }

    fn learned_energy(&self, state: &State) -> Option<f64> {
        Some(self.lnn.energy(state))
    }

    fn learned_potential(&self, q: &[f64]) -> Option<f64> {
        Some(self.lnn.potential(q))
    }
}

/// Discrete DDPM noise schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Usage("diffusion schedule needs at least one step".into()));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Usage("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] <= w[0]) && betas.len() > 1 {
            return Err(Error::Usage("betas must be strictly increasing".into()));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// Linear schedule whose endpoints are the 1000-step defaults
    /// `1e-4 → 2e-2` scaled by `1000 / steps`, so that the terminal
    /// `ᾱ` is close to zero at short lengths.
    pub fn rescaled_default(steps: usize) -> Result<Self> {
        let k = 1000.0 / steps as f64;
        Self::linear(steps, (1e-4 * k).min(0.5), (2e-2 * k).min(0.999))
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Evenly spaced 1-based timesteps ending at `T`, `nfe` of them.
    pub fn respaced(&self, nfe: usize) -> Vec<usize> {
        let t = self.steps();
        (1..=nfe)
            .map(|i| ((i as f64 * t as f64 / nfe as f64).round() as usize).clamp(1, t))
            .collect()
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }
}

/// Noise-prediction network together with its schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    pub net: ConditionalNet,
    pub schedule: NoiseSchedule,
}

impl Denoiser {
    pub fn new(dim: usize, context_dim: usize, hidden: &[usize], seed: u64) -> Self {
        Self {
            net: ConditionalNet::new(dim, context_dim, hidden, seed),
            schedule: NoiseSchedule::rescaled_default(DEFAULT_DIFFUSION_STEPS).unwrap(),
        }
    }

    fn time(&self, k: usize) -> f64 {
        k as f64 / self.schedule.steps() as f64
    }

    /// Ancestral sampling over `nfe` respaced steps. With a zero latent the
    /// initial state and injected noise are all zero.
    pub fn sample(&self, context: &Array2<f64>, nfe: usize, latent: &mut Latent<'_>) -> Result<Array2<f64>> {
        let steps = self.schedule.steps();
        if nfe == 0 {
            return Err(Error::Usage("nfe must be at least 1".into()));
        }
        if nfe > steps {
            return Err(Error::Unsupported(format!(
                "nfe {nfe} exceeds the {steps}-step diffusion schedule"
            )));
        }
        let rows = context.nrows();
        let dim = self.net.dim;
        let ks = self.schedule.respaced(nfe);
        let mut x = latent.normal(rows, dim);
        for i in (0..ks.len()).rev() {
            let k = ks[i];
            let prev = if i == 0 { 0 } else { ks[i - 1] };
            let ab = self.schedule.alpha_bar(k);
            let ab_prev = self.schedule.alpha_bar(prev);
            let beta = 1.0 - ab / ab_prev;
            let eps = self.net.eval(&x, &vec![self.time(k); rows], context);
            let mut x0 = (&x - &(eps * (1.0 - ab).sqrt())) / ab.sqrt();
            x0.mapv_inplace(|v| v.clamp(-X0_CLIP, X0_CLIP));
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
            let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            x = x0 * c0 + &x * ct;
            if i > 0 {
                let var = beta * (1.0 - ab_prev) / (1.0 - ab);
                x = x + latent.normal(rows, dim) * var.sqrt();
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite diffusion state at timestep {k}")));
            }
        }
        Ok(x)
    }

    /// Per-datum noise-prediction error on `x0`, `B×1`.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        theta: Var,
        offset: usize,
        x0: &Array2<f64>,
        context: Var,
        rng: &mut ChaCha8Rng,
    ) -> Var {
        let (rows, dim) = x0.dim();
        let steps = self.schedule.steps();
        let ks: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=steps)).collect();
        let noise = Latent::Sampled(rng).normal(rows, dim);
        let mut xt = x0.clone();
        for r in 0..rows {
            let ab = self.schedule.alpha_bar(ks[r]);
            for c in 0..dim {
                xt[[r, c]] = ab.sqrt() * x0[[r, c]] + (1.0 - ab).sqrt() * noise[[r, c]];
            }
        }
        let t: Vec<f64> = ks.iter().map(|&k| self.time(k)).collect();
        let xt = tape.leaf(xt);
        let eps = self.net.eval_on_tape(tape, theta, offset, xt, &t, context);
        let target = tape.leaf(noise);
        let d = tape.sub(eps, target);
        mean_sq_cols(tape, d, dim)
    }
}

/// Lagrangian prior plus a DDPM-sampled residual force.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnnDiffusionModel {
    pub lnn: LnnParams,
    pub denoiser: Denoiser,
    pub scales: OutputScales,
    pub config: TrainConfig,
    pub env: EnvSpec,
    #[serde(skip)]
    warming_up: bool,
}

impl LnnDiffusionModel {
    pub fn new(env: &EnvSpec, data: &TrainSet, cfg: &TrainConfig) -> Self {
        let encoder = fit_encoder(env, data);
        let ctx = encoder.context_dim();
        Self {
            lnn: LnnParams::new(encoder, &cfg.hidden, cfg.seed),
            denoiser: Denoiser::new(env.dof(), ctx, &cfg.hidden, cfg.seed.wrapping_mul(2).wrapping_add(5)),
            scales: OutputScales::fit(data),
            config: cfg.clone(),
            env: env.clone(),
            warming_up: false,
        }
    }

    pub fn train(ds: &TrajectoryDataset, cfg: &TrainConfig) -> Result<(Self, LossCurve)> {
        let data = ds.train_set();
        let mut m = Self::new(&ds.env, &data, cfg);
        let curve = fit(&mut m, &data, cfg)?;
        Ok((m, curve))
    }

    pub fn sample_force(&self, context: &Array2<f64>, nfe: usize, latent: &mut Latent<'_>) -> Result<Array2<f64>> {
        Ok(self.denoiser.sample(context, nfe, latent)? * &self.scales.residual_row())
    }

    fn nfe_train(&self) -> usize {
        self.config.nfe_train.min(self.denoiser.schedule.steps())
    }
}

impl Objective for LnnDiffusionModel {
    fn params(&self) -> Vec<f64> {
        let mut p = self.lnn.flat();
        p.extend_from_slice(&self.denoiser.net.net.params.flat);
        p
    }

    fn set_params(&mut self, flat: &[f64]) {
        let k = self.lnn.param_count();
        self.lnn.set_flat(&flat[..k]);
        self.denoiser.net.net.params.flat.copy_from_slice(&flat[k..]);
    }

    fn loss_on_tape(&self, tape: &mut Tape, theta: Var, batch: &TrainSet, rng: &mut ChaCha8Rng) -> Result<LossTerms> {
        let b = &batch.contexts;
        let n = b.dof();
        let enc = self.lnn.encoder.encode(b, true);
        let out = self.lnn.eval_on_tape(tape, theta, 0, &enc, &b.qdot, &b.tau);
        let prior = columns(tape, &out.accel);
        let r_target = mass_times(tape, &out, &(&batch.qddot - &prior));
        let x0 = r_target / &self.scales.residual_row();
        let ctx = tape.leaf(enc.context.clone());
        let den = self
            .denoiser
            .loss_on_tape(tape, theta, self.lnn.param_count(), &x0, ctx, rng);

        if self.warming_up {
            let accel = accel_error(tape, &out.accel, &batch.qddot, &self.scales.accel);
            let weighted = tape.scale(den, self.config.lambda_fm);
            let total = tape.add(accel, weighted);
            return Ok(LossTerms {
                total,
                accel: Some(accel),
                generative: Some(den),
            });
        }
        // Ancestral sampling is not differentiated; the residual enters the
        // acceleration term as a constant.
        let force = self.sample_force(&enc.context, self.nfe_train(), &mut Latent::Sampled(rng))?;
        let cols: Vec<Var> = (0..n)
            .map(|j| tape.leaf(force.column(j).to_owned().insert_axis(Axis(1))))
            .collect();
        let res = out.chol.solve(tape, &cols);
        let pred: Vec<Var> = (0..n).map(|i| tape.add(out.accel[i], res[i])).collect();
        let accel = accel_error(tape, &pred, &batch.qddot, &self.scales.accel);
        let weighted = tape.scale(den, self.config.lambda_fm);
        let total = tape.add(accel, weighted);
        Ok(LossTerms {
            total,
            accel: Some(accel),
            generative: Some(den),
        })
    }

    fn begin_step(&mut self, warming_up: bool) {
        self.warming_up = warming_up;
    }
}

impl DynamicsModel for LnnDiffusionModel {
    fn kind(&self) -> ModelKind {
        ModelKind::LnnDiffusion
    }

    fn dof(&self) -> usize {
        self.lnn.dof()
    }

    fn feature_map(&self) -> FeatureMap {
        self.lnn.encoder.features.clone()
    }

    fn data_dt(&self) -> Option<f64> {
        Some(self.env.record_dt())
    }

    fn predict(&self, input: &ModelInput, latent: &mut Latent<'_>, nfe: Option<usize>) -> Result<Prediction> {
        let nfe = nfe.unwrap_or(self.denoiser.schedule.steps());
        let p = predict_with_residual(&self.lnn, &input.batch, |ctx| self.sample_force(ctx, nfe, latent))?;
        Ok(Prediction::Accel {
            accel: p.accel,
            residual_force: Some(p.residual_force),
            residual_accel: Some(p.residual_accel),
        })
    }

    fn default_nfe(&self) -> Option<usize> {
        Some(self.denoiser.schedule.steps())
    }

    fn run_sampler(&self, input: &ModelInput, nfe: usize, latent: &mut Latent<'_>) -> Option<Result<()>> {
        let ctx = self.lnn.encoder.encode(&input.batch, false).context;
        Some(self.sample_force(&ctx, nfe, latent).map(|_| ()))
    }

    fn has_force_stream(&self) -> bool {
        true
    }

    fn mass_matrix(&self, q: &[f64]) -> Option<Array2<f64>> {
        Some(self.lnn.mass_matrix(q))
    }

    fn learned_energy(&self, state: &State) -> Option<f64> {
        Some(self.lnn.energy(state))
    }

    fn learned_potential(&self, q: &[f64]) -> Option<f64> {
        Some(self.lnn.potential(q))
    }
}

/// DDPM over standardized next observations conditioned on `(obs_t, τ_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PureDiffusionModel {
    pub denoiser: Denoiser,
    pub features: FeatureMap,
    pub obs_norm: Standardizer,
    pub tau_norm: Standardizer,
    pub config: TrainConfig,
    pub env: EnvSpec,
}

impl PureDiffusionModel {
    pub fn new(env: &EnvSpec, data: &TrainSet, cfg: &TrainConfig) -> Self {
        let features = env.feature_map();
        let d = obs_dim(&features);
        Self {
            denoiser: Denoiser::new(d, d + env.dof(), &cfg.hidden, cfg.seed.wrapping_mul(2).wrapping_add(13)),
            obs_norm: Standardizer::fit(&data.obs, 1e-6),
            tau_norm: Standardizer::fit(&data.contexts.tau, 1e-6),
            features,
            config: cfg.clone(),
            env: env.clone(),
        }
    }

    pub fn train(ds: &TrajectoryDataset, cfg: &TrainConfig) -> Result<(Self, LossCurve)> {
        let data = ds.train_set();
        let mut m = Self::new(&ds.env, &data, cfg);
        let curve = fit(&mut m, &data, cfg)?;
        Ok((m, curve))
    }

    fn context(&self, obs: &Array2<f64>, tau: &Array2<f64>) -> Array2<f64> {
        let o = self.obs_norm.apply(obs);
        let t = self.tau_norm.apply(tau);
        ndarray::concatenate(Axis(1), &[o.view(), t.view()]).unwrap()
    }
}

impl Objective for PureDiffusionModel {
    fn params(&self) -> Vec<f64> {
        self.denoiser.net.net.params.flat.clone()
    }

    fn set_params(&mut self, flat: &[f64]) {
        self.denoiser.net.net.params.flat.copy_from_slice(flat);
    }

    fn loss_on_tape(&self, tape: &mut Tape, theta: Var, batch: &TrainSet, rng: &mut ChaCha8Rng) -> Result<LossTerms> {
        let ctx = tape.leaf(self.context(&batch.obs, &batch.contexts.tau));
        let x0 = self.obs_norm.apply(&batch.next_obs);
        let l = self.denoiser.loss_on_tape(tape, theta, 0, &x0, ctx, rng);
        Ok(LossTerms {
            total: l,
            accel: None,
            generative: Some(l),
        })
    }
}

impl DynamicsModel for PureDiffusionModel {
    fn kind(&self) -> ModelKind {
        ModelKind::PureDiffusion
    }

    fn dof(&self) -> usize {
        self.features.dof()
    }

    fn feature_map(&self) -> FeatureMap {
        self.features.clone()
    }

    fn data_dt(&self) -> Option<f64> {
        Some(self.env.record_dt())
    }

    fn predict(&self, input: &ModelInput, latent: &mut Latent<'_>, nfe: Option<usize>) -> Result<Prediction> {
        let nfe = nfe.unwrap_or(self.denoiser.schedule.steps());
        let ctx = self.context(&input.obs, &input.batch.tau);
        let z = self.denoiser.sample(&ctx, nfe, latent)?;
        Ok(Prediction::NextObs(self.obs_norm.invert(&z)))
    }

    fn default_nfe(&self) -> Option<usize> {
        Some(self.denoiser.schedule.steps())
    }

    fn run_sampler(&self, input: &ModelInput, nfe: usize, latent: &mut Latent<'_>) -> Option<Result<()>> {
        let ctx = self.context(&input.obs, &input.batch.tau);
        Some(self.denoiser.sample(&ctx, nfe, latent).map(|_| ()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::rescaled_default(50).unwrap();
        assert!(s.betas.windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bars.windows(2).all(|w| w[0] > w[1]));
        assert!(*s.alpha_bars.last().unwrap() < 1e-3);
        assert!(NoiseSchedule::from_betas(vec![0.2, 0.1]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.0]).is_err());
        assert_eq!(s.respaced(50), (1..=50).collect::<Vec<_>>());
        assert_eq!(*s.respaced(4).last().unwrap(), 50);
    }

    #[test]
    fn single_step_zero_denoiser_rescales() {
        let mut d = Denoiser::new(1, 1, &[4], 0);
        d.schedule = NoiseSchedule::from_betas(vec![0.3]).unwrap();
        d.net.net.params.flat.iter_mut().for_each(|v| *v = 0.0);
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let ctx = Array2::zeros((1, 1));
        let mut probe = rng.clone();
        let x1 = Latent::Sampled(&mut probe).normal(1, 1)[[0, 0]];
        let out = d.sample(&ctx, 1, &mut Latent::Sampled(&mut rng)).unwrap();
        let expected = (x1 / 0.7f64.sqrt()).clamp(-X0_CLIP, X0_CLIP);
        assert!((out[[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn nfe_beyond_schedule_is_unsupported() {
        let d = Denoiser::new(1, 1, &[4], 0);
        let ctx = Array2::zeros((1, 1));
        assert!(matches!(
            d.sample(&ctx, 64, &mut Latent::Zero),
            Err(Error::Unsupported(_))
        ));
    }
}
