//! Minibatch Adam training shared by every learned model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::TrainSet;
use crate::error::{Error, Result};

pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Weight of the generative (flow-matching or denoising) term.
    pub lambda_fm: f64,
    /// Sampler steps inside the acceleration term.
    pub nfe_train: usize,
    pub seed: u64,
    /// Let acceleration-error gradients reach the residual sampler weights.
    pub grad_through_sampler: bool,
    pub hidden: Vec<usize>,
    /// Initial steps in which residual samples are left out of the
    /// acceleration term, so the prior fits the data first.
    #[serde(default)]
    pub prior_warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 256,
            steps: 5000,
            lambda_fm: 1.0,
            nfe_train: 10,
            seed: 0,
            grad_through_sampler: true,
            hidden: vec![64, 64],
            prior_warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.nfe_train == 0 || !(self.lambda_fm >= 0.0) {
            return Err(Error::Usage(format!("invalid training config: {self:?}")));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Usage("hidden layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub total: f64,
    pub accel_mse: f64,
    pub fm_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<CurvePoint>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,total_loss,accel_mse,fm_loss\n");
        for p in &self.points {
            s.push_str(&format!("{},{:e},{:e},{:e}\n", p.step, p.total, p.accel_mse, p.fm_loss));
        }
        s
    }

    pub fn last(&self) -> Option<&CurvePoint> {
        self.points.last()
    }
}

/// Per-datum loss columns (`B×1`) recorded on a tape.
pub struct LossTerms {
    pub total: Var,
    pub accel: Option<Var>,
    pub generative: Option<Var>,
}

/// A model that can be fitted by [`fit`].
pub trait Objective {
    fn params(&self) -> Vec<f64>;

    fn set_params(&mut self, flat: &[f64]);

    fn loss_on_tape(&self, tape: &mut Tape, theta: Var, batch: &TrainSet, rng: &mut ChaCha8Rng) -> Result<LossTerms>;

    /// Called before every step; `warming_up` is true during the first
    /// `prior_warmup_steps` steps.
    fn begin_step(&mut self, _warming_up: bool) {}
}

/// Loss value, per-term means and gradient for one batch.
pub fn loss_and_grad<O: Objective>(
    obj: &O,
    theta: &[f64],
    batch: &TrainSet,
    rng: &mut ChaCha8Rng,
) -> Result<(CurvePoint, Vec<f64>)> {
    let mut tape = Tape::new();
    let p = tape.row(theta);
    let terms = obj.loss_on_tape(&mut tape, p, batch, rng)?;
    if let Some(datum) = tape.value(terms.total).iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite loss at datum {datum}")));
    }
    let mean = tape.mean(terms.total);
    let grads = tape.backward(mean)?;
    let col_mean = |v: Option<Var>| v.map(|v| tape.value(v).mean().unwrap()).unwrap_or(0.0);
    let point = CurvePoint {
        step: 0,
        total: tape.item(mean),
        accel_mse: col_mean(terms.accel),
        fm_loss: col_mean(terms.generative),
    };
    Ok((point, grads.wrt(&tape, p).iter().copied().collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// How often a curve point is logged.
pub fn log_every(steps: usize) -> usize {
    (steps / 200).max(1)
}

/// Runs `cfg.steps` Adam steps on random minibatches.
pub fn fit<O: Objective>(obj: &mut O, data: &TrainSet, cfg: &TrainConfig) -> Result<LossCurve> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let mut theta = obj.params();
    let mut opt = Adam::new(theta.len(), cfg.lr);
    let mut curve = LossCurve::default();
    let bs = cfg.batch_size.min(data.len());
    let every = log_every(cfg.steps);
    for step in 0..cfg.steps {
        let idx = rand::seq::index::sample(&mut rng, data.len(), bs).into_vec();
        let batch = data.select(&idx);
        obj.begin_step(step < cfg.prior_warmup_steps);
        let (mut point, grad) = loss_and_grad(obj, &theta, &batch, &mut rng)?;
        if !(point.total <= DIVERGENCE_LIMIT) {
            return Err(Error::Numerical(format!(
                "training diverged at step {step}: total {:e}, accel {:e}, generative {:e}",
                point.total, point.accel_mse, point.fm_loss
            )));
        }
        if step % every == 0 || step + 1 == cfg.steps {
            point.step = step;
            curve.points.push(point);
        }
        opt.step(&mut theta, &grad);
        obj.set_params(&theta);
    }
    obj.begin_step(false);
    Ok(curve)
}
