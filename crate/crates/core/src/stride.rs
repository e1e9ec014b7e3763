//! Lagrangian prior plus flow-matched residual force, trained jointly.
//!
//! Prediction: `q̈ = f_LNN(q, q̇, τ) + M(q)⁻¹ ε` with `ε` sampled from the flow.
//! Training minimizes the standardized acceleration error of that prediction
//! plus a flow-matching term whose regression target is the residual force
//! `M(q)(q̈_obs − f_LNN)`, held constant with respect to the prior.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cfm::{FlowField, DEFAULT_NFE};
use crate::data::{TrainSet, TrajectoryDataset};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::lnn::{columns, LnnOnTape, LnnParams};
use crate::model::{DynamicsModel, Latent, ModelInput, ModelKind, Prediction};
use crate::state::{Context, ContextBatch, ContextEncoder, FeatureMap, Standardizer, State};
use crate::train::{fit, LossCurve, LossTerms, Objective, TrainConfig};

/// Absolute floor on per-coordinate residual-force scales.
pub const RESIDUAL_SCALE_FLOOR: f64 = 1e-3;

/// Residual-force scales are at least this fraction of the largest applied
/// torque spread, so data without external forces still gives an O(1)
/// flow-matching target at initialization.
pub const RESIDUAL_SCALE_TORQUE_FRACTION: f64 = 1e-2;

/// Output scales shared by the Lagrangian-prior models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputScales {
    /// Per-coordinate standard deviation of observed accelerations.
    pub accel: Vec<f64>,
    /// Per-coordinate scale of the residual force target.
    pub residual: Vec<f64>,
}

impl OutputScales {
    pub fn fit(data: &TrainSet) -> Self {
        let accel = Standardizer::fit(&data.qddot, 1e-6).std;
        let torque = Standardizer::fit(&data.contexts.tau, 0.0).std.into_iter().fold(0.0, f64::max);
        let floor = (RESIDUAL_SCALE_TORQUE_FRACTION * torque).max(RESIDUAL_SCALE_FLOOR);
        let residual = Standardizer::fit(&data.f_ext, 0.0)
            .std
            .into_iter()
            .map(|s| s.max(floor))
            .collect();
        Self { accel, residual }
    }

    pub fn residual_row(&self) -> Array2<f64> {
        Array2::from_shape_vec((1, self.residual.len()), self.residual.clone()).unwrap()
    }
}

pub fn fit_encoder(env: &EnvSpec, data: &TrainSet) -> ContextEncoder {
    ContextEncoder::fit(env.feature_map(), &data.contexts)
}

/// Per-coordinate columns of a `B×n` array as tape leaves.
pub(crate) fn leaf_columns(tape: &mut Tape, a: &Array2<f64>) -> Vec<Var> {
    (0..a.ncols())
        .map(|j| tape.leaf(a.column(j).to_owned().insert_axis(ndarray::Axis(1))))
        .collect()
}

/// `M(q) x` row by row using the factor values on the tape.
pub(crate) fn mass_times(tape: &Tape, out: &LnnOnTape, x: &Array2<f64>) -> Array2<f64> {
    let (rows, n) = x.dim();
    Array2::from_shape_fn((rows, n), |(r, a)| {
        (0..n).map(|b| out.chol.mass_value(tape, a, b, r) * x[[r, b]]).sum()
    })
}

/// Standardized squared acceleration error per datum, averaged over
/// coordinates: `B×1`.
pub(crate) fn accel_error(tape: &mut Tape, pred: &[Var], observed: &Array2<f64>, scale: &[f64]) -> Var {
    let n = pred.len();
    let obs = leaf_columns(tape, observed);
    let mut acc: Option<Var> = None;
    for i in 0..n {
        let d = tape.sub(obs[i], pred[i]);
        let d = tape.scale(d, 1.0 / scale[i]);
        let sq = tape.square(d);
        acc = Some(match acc {
            Some(a) => tape.add(a, sq),
            None => sq,
        });
    }
    tape.scale(acc.unwrap(), 1.0 / n as f64)
}

/// Prior evaluation with an additive residual force; shared by the models
/// built on the Lagrangian prior.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorPrediction {
    pub accel: Array2<f64>,
    pub prior_accel: Array2<f64>,
    pub residual_force: Array2<f64>,
    pub residual_accel: Array2<f64>,
}

pub(crate) fn predict_with_residual<F>(lnn: &LnnParams, batch: &ContextBatch, residual: F) -> Result<PriorPrediction>
where
    F: FnOnce(&Array2<f64>) -> Result<Array2<f64>>,
{
    let enc = lnn.encoder.encode(batch, true);
    let mut tape = Tape::new();
    let theta = tape.row(&lnn.flat());
    let out = lnn.eval_on_tape(&mut tape, theta, 0, &enc, &batch.qdot, &batch.tau);
    out.chol.check_pivots(&tape)?;
    let force = residual(&enc.context)?;
    let cols = leaf_columns(&mut tape, &force);
    let res = out.chol.solve(&mut tape, &cols);
    let prior_accel = columns(&tape, &out.accel);
    let residual_accel = columns(&tape, &res);
    let accel = &prior_accel + &residual_accel;
    if accel.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite predicted acceleration".into()));
    }
    Ok(PriorPrediction {
        accel,
        prior_accel,
        residual_force: force,
        residual_accel,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrideModel {
    pub lnn: LnnParams,
    pub flow: FlowField,
    pub scales: OutputScales,
    pub config: TrainConfig,
    pub env: EnvSpec,
    #[serde(skip)]
    pub(crate) warming_up: bool,
}

impl StrideModel {
    /// Fresh model with normalization statistics taken from `data`.
    pub fn new(env: &EnvSpec, data: &TrainSet, cfg: &TrainConfig) -> Self {
        let encoder = fit_encoder(env, data);
        let ctx_dim = encoder.context_dim();
        let n = env.dof();
        Self {
            lnn: LnnParams::new(encoder, &cfg.hidden, cfg.seed),
            flow: FlowField::new(n, ctx_dim, &cfg.hidden, cfg.seed.wrapping_mul(2).wrapping_add(3)),
            scales: OutputScales::fit(data),
            config: cfg.clone(),
            env: env.clone(),
            warming_up: false,
        }
    }

    pub fn train(ds: &TrajectoryDataset, cfg: &TrainConfig) -> Result<(Self, LossCurve)> {
        let data = ds.train_set();
        let mut model = Self::new(&ds.env, &data, cfg);
        let curve = fit(&mut model, &data, cfg)?;
        Ok((model, curve))
    }

    fn flow_offset(&self) -> usize {
        self.lnn.param_count()
    }

    /// Residual force samples `s ⊙ z(1)` for standardized contexts.
    pub fn sample_force(&self, context: &Array2<f64>, z0: &Array2<f64>, nfe: usize) -> Result<Array2<f64>> {
        let z1 = self.flow.sample(z0, context, nfe)?;
        Ok(z1 * &self.scales.residual_row())
    }

    pub fn predict_batch(&self, batch: &ContextBatch, z0: &Array2<f64>, nfe: usize) -> Result<PriorPrediction> {
        predict_with_residual(&self.lnn, batch, |ctx| self.sample_force(ctx, z0, nfe))
    }

    /// Predicted acceleration for one context and one latent draw.
    pub fn predict_accel(&self, ctx: &Context, z0: &[f64], nfe: usize) -> Result<Vec<f64>> {
        let z = Array2::from_shape_vec((1, z0.len()), z0.to_vec())
            .map_err(|e| Error::Usage(e.to_string()))?;
        Ok(self.predict_batch(&ContextBatch::single(ctx), &z, nfe)?.accel.row(0).to_vec())
    }

    /// Mean joint loss over `batch` with latent draws from `rng`.
    pub fn joint_loss(&self, batch: &TrainSet, rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut tape = Tape::new();
        let theta = tape.row(&self.params());
        let terms = self.loss_on_tape(&mut tape, theta, batch, rng)?;
        let m = tape.mean(terms.total);
        Ok(tape.item(m))
    }
}

impl Objective for StrideModel {
    fn params(&self) -> Vec<f64> {
        let mut p = self.lnn.flat();
        p.extend_from_slice(&self.flow.field.net.params.flat);
        p
    }

    fn set_params(&mut self, flat: &[f64]) {
        let k = self.lnn.param_count();
        self.lnn.set_flat(&flat[..k]);
        self.flow.field.net.params.flat.copy_from_slice(&flat[k..]);
    }

    fn loss_on_tape(&self, tape: &mut Tape, theta: Var, batch: &TrainSet, rng: &mut ChaCha8Rng) -> Result<LossTerms> {
        let b = &batch.contexts;
        let (rows, n) = b.q.dim();
        let enc = self.lnn.encoder.encode(b, true);
        let out = self.lnn.eval_on_tape(tape, theta, 0, &enc, &b.qdot, &b.tau);

        let prior = columns(tape, &out.accel);
        let r_target = mass_times(tape, &out, &(&batch.qddot - &prior));
        let x1 = r_target / &self.scales.residual_row();

        let z0 = Latent::Sampled(rng).normal(rows, n);
        let t: Vec<f64> = (0..rows).map(|_| rng.random::<f64>()).collect();
        let ctx = tape.leaf(enc.context.clone());
        let off = self.flow_offset();
        let fm = self.flow.loss_on_tape(tape, theta, off, &x1, &z0, &t, ctx);

        if self.warming_up {
            let accel = accel_error(tape, &out.accel, &batch.qddot, &self.scales.accel);
            let weighted = tape.scale(fm, self.config.lambda_fm);
            let total = tape.add(accel, weighted);
            return Ok(LossTerms {
                total,
                accel: Some(accel),
                generative: Some(fm),
            });
        }
        let z1 = if self.config.grad_through_sampler {
            let z = tape.leaf(z0);
            self.flow.sample_on_tape(tape, theta, off, z, ctx, self.config.nfe_train)
        } else {
            let v = self.flow.sample(&z0, &enc.context, self.config.nfe_train)?;
            tape.leaf(v)
        };
        let s = tape.leaf(self.scales.residual_row());
        let eps = tape.mul(z1, s);
        let eps_cols: Vec<Var> = (0..n).map(|i| tape.col(eps, i)).collect();
        let res = out.chol.solve(tape, &eps_cols);
        let pred: Vec<Var> = (0..n).map(|i| tape.add(out.accel[i], res[i])).collect();
        let accel = accel_error(tape, &pred, &batch.qddot, &self.scales.accel);

        let weighted = tape.scale(fm, self.config.lambda_fm);
        let total = tape.add(accel, weighted);
        Ok(LossTerms {
            total,
            accel: Some(accel),
            generative: Some(fm),
        })
    }

    fn begin_step(&mut self, warming_up: bool) {
        self.warming_up = warming_up;
    }
}

impl DynamicsModel for StrideModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Stride
    }

    fn dof(&self) -> usize {
        self.lnn.dof()
    }

    fn feature_map(&self) -> FeatureMap {
        self.lnn.encoder.features.clone()
    }

    fn predict(&self, input: &ModelInput, latent: &mut Latent<'_>, nfe: Option<usize>) -> Result<Prediction> {
        let z0 = latent.normal(input.batch.len(), self.dof());
        let p = self.predict_batch(&input.batch, &z0, nfe.unwrap_or(DEFAULT_NFE))?;
        Ok(Prediction::Accel {
            accel: p.accel,
            residual_force: Some(p.residual_force),
            residual_accel: Some(p.residual_accel),
        })
    }

    fn default_nfe(&self) -> Option<usize> {
        Some(DEFAULT_NFE)
    }

    fn data_dt(&self) -> Option<f64> {
        Some(self.env.record_dt())
    }

    fn run_sampler(&self, input: &ModelInput, nfe: usize, latent: &mut Latent<'_>) -> Option<Result<()>> {
        let ctx = self.lnn.encoder.encode(&input.batch, false).context;
        let z0 = latent.normal(input.batch.len(), self.dof());
        Some(self.sample_force(&ctx, &z0, nfe).map(|_| ()))
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
