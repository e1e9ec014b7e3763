//! Synthetic conditional regression task with a symmetric two-point target,
//! used to compare a deterministic regressor against the flow sampler.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::cfm::FlowField;
use crate::data::TrainSet;
use crate::error::Result;
use crate::model::Latent;
use crate::nets::{Mlp, MlpSpec};
use crate::state::ContextBatch;
use crate::train::{fit, LossCurve, LossTerms, Objective, TrainConfig};

/// `n` pairs `(c, y)` with `c ~ U(−1, 1)` and `y = ±1` independent of `c`.
/// The context sits in `obs` and the target in `f_ext`.
pub fn bimodal_set(n: usize, seed: u64) -> TrainSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = Array2::from_shape_simple_fn((n, 1), || rng.random_range(-1.0..1.0));
    let y = Array2::from_shape_simple_fn((n, 1), || if rng.random::<bool>() { 1.0 } else { -1.0 });
    TrainSet {
        contexts: ContextBatch {
            q: c.clone(),
            qdot: Array2::zeros((n, 1)),
            tau: Array2::zeros((n, 1)),
        },
        qddot: y.clone(),
        f_ext: y.clone(),
        obs: c,
        next_obs: y,
    }
}

/// Plain MLP fitted by squared error.
pub struct Regressor {
    pub net: Mlp,
}

impl Regressor {
    pub fn new(context_dim: usize, dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut spec = MlpSpec::default_dynamics(context_dim, dim);
        spec.hidden = hidden.to_vec();
        Self { net: Mlp::new(spec, seed) }
    }

    pub fn predict(&self, context: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.net.forward(context)?)
    }
}

impl Objective for Regressor {
    fn params(&self) -> Vec<f64> {
        self.net.params.flat.clone()
    }

    fn set_params(&mut self, flat: &[f64]) {
        self.net.params.flat.copy_from_slice(flat);
    }

    fn loss_on_tape(&self, tape: &mut Tape, theta: Var, batch: &TrainSet, _rng: &mut ChaCha8Rng) -> Result<LossTerms> {
        let bound = self.net.bind(tape, theta, 0);
        let x = tape.leaf(batch.obs.clone());
        let y = tape.leaf(batch.f_ext.clone());
        let pred = bound.forward(tape, x);
        let d = tape.sub(pred, y);
        let sq = tape.square(d);
        let s = tape.sum_cols(sq);
        let total = tape.scale(s, 1.0 / batch.f_ext.ncols() as f64);
        Ok(LossTerms {
            total,
            accel: Some(total),
            generative: None,
        })
    }
}

/// Flow field fitted by the flow-matching loss alone.
pub struct FlowRegressor {
    pub flow: FlowField,
}

impl FlowRegressor {
    pub fn new(context_dim: usize, dim: usize, hidden: &[usize], seed: u64) -> Self {
        Self {
            flow: FlowField::new(dim, context_dim, hidden, seed),
        }
    }

    pub fn sample(&self, context: &Array2<f64>, nfe: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        let z0 = Latent::Sampled(rng).normal(context.nrows(), self.flow.dim());
        Ok(self.flow.sample(&z0, context, nfe)?)
    }
}

impl Objective for FlowRegressor {
    fn params(&self) -> Vec<f64> {
        self.flow.field.net.params.flat.clone()
    }

    fn set_params(&mut self, flat: &[f64]) {
        self.flow.field.net.params.flat.copy_from_slice(flat);
    }

    fn loss_on_tape(&self, tape: &mut Tape, theta: Var, batch: &TrainSet, rng: &mut ChaCha8Rng) -> Result<LossTerms> {
        let rows = batch.len();
        let z0 = Latent::Sampled(rng).normal(rows, self.flow.dim());
        let t: Vec<f64> = (0..rows).map(|_| rng.random::<f64>()).collect();
        let ctx = tape.leaf(batch.obs.clone());
        let total = self.flow.loss_on_tape(tape, theta, 0, &batch.f_ext, &z0, &t, ctx);
        Ok(LossTerms {
            total,
            accel: None,
            generative: Some(total),
        })
    }
}

/// Trains both models on the same data and configuration.
pub fn fit_both(data: &TrainSet, cfg: &TrainConfig) -> Result<(Regressor, FlowRegressor, LossCurve, LossCurve)> {
    let cdim = data.obs.ncols();
    let dim = data.f_ext.ncols();
    let mut reg = Regressor::new(cdim, dim, &cfg.hidden, cfg.seed);
    let mut flow = FlowRegressor::new(cdim, dim, &cfg.hidden, cfg.seed.wrapping_add(1));
    let c1 = fit(&mut reg, data, cfg)?;
    let c2 = fit(&mut flow, data, cfg)?;
    Ok((reg, flow, c1, c2))
}

/// 1-Wasserstein distance between two equally sized 1-D samples.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

/// Histogram summary of a 1-D sample around the two modes `±1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeSummary {
    /// Share of samples with `|x| ≤ 0.3`.
    pub central_mass: f64,
    /// Median of the positive samples.
    pub upper_mode: f64,
    /// Median of the negative samples.
    pub lower_mode: f64,
}

pub fn mode_summary(x: &[f64]) -> ModeSummary {
    let central = x.iter().filter(|v| v.abs() <= 0.3).count() as f64 / x.len().max(1) as f64;
    let pos: Vec<f64> = x.iter().copied().filter(|v| *v > 0.0).collect();
    let neg: Vec<f64> = x.iter().copied().filter(|v| *v < 0.0).collect();
    ModeSummary {
        central_mass: central,
        upper_mode: crate::eval::median_of(&pos),
        lower_mode: crate::eval::median_of(&neg),
    }
}
