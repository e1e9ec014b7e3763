//! Conditional flow matching for the residual force.
//!
//! A vector field `v(z, t | c)` is regressed onto the straight conditional-OT
//! velocity and sampled by explicit Euler integration from `t = 0` to `t = 1`.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::nets::{Mlp, MlpSpec};

pub const DEFAULT_SIGMA_MIN: f64 = 1e-2;
pub const DEFAULT_TIME_PAIRS: usize = 8;
pub const DEFAULT_NFE: usize = 10;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum CfmError {
    #[error("non-finite flow state at integration step {step}")]
    NonFinite { step: usize },
    #[error("nfe must be at least 1")]
    ZeroNfe,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Sine/cosine features of `t` at frequencies `k·π/2`, `k = 1..=pairs`.
pub fn time_embedding(t: &[f64], pairs: usize) -> Array2<f64> {
    let mut out = Array2::zeros((t.len(), 2 * pairs));
    for (r, &tv) in t.iter().enumerate() {
        for k in 0..pairs {
            let w = (k + 1) as f64 * std::f64::consts::FRAC_PI_2;
            out[[r, 2 * k]] = (w * tv).sin();
            out[[r, 2 * k + 1]] = (w * tv).cos();
        }
    }
    out
}

/// Network taking `[z, time embedding, context]` and returning a vector the
/// size of `z`. Shared by the flow field and the diffusion denoisers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalNet {
    pub net: Mlp,
    pub dim: usize,
    pub time_pairs: usize,
    pub context_dim: usize,
}

impl ConditionalNet {
    pub fn new(dim: usize, context_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let time_pairs = DEFAULT_TIME_PAIRS;
        let mut spec = MlpSpec::default_dynamics(dim + 2 * time_pairs + context_dim, dim);
        spec.hidden = hidden.to_vec();
        Self {
            net: Mlp::new(spec, seed),
            dim,
            time_pairs,
            context_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        self.net.params.len()
    }

    fn input(&self, z: &Array2<f64>, t: &[f64], context: &Array2<f64>) -> Array2<f64> {
        let temb = time_embedding(t, self.time_pairs);
        ndarray::concatenate(Axis(1), &[z.view(), temb.view(), context.view()]).unwrap()
    }

    /// Plain batched evaluation; `t` has one entry per row.
    pub fn eval(&self, z: &Array2<f64>, t: &[f64], context: &Array2<f64>) -> Array2<f64> {
        self.net
            .forward(&self.input(z, t, context))
            .expect("conditional net input width")
    }

    pub fn eval_on_tape(
        &self,
        tape: &mut Tape,
        theta: Var,
        offset: usize,
        z: Var,
        t: &[f64],
        context: Var,
    ) -> Var {
        let bound = self.net.bind(tape, theta, offset);
        let temb = tape.leaf(time_embedding(t, self.time_pairs));
        let x = tape.concat_cols(&[z, temb, context]);
        bound.forward(tape, x)
    }
}

/// The residual flow field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    pub field: ConditionalNet,
    pub sigma_min: f64,
}

/// `(z_t, u_target)` on the conditional-OT path.
pub fn cfm_training_pair(x1: &[f64], z0: &[f64], t: f64, sigma_min: f64) -> (Vec<f64>, Vec<f64>) {
    let a = 1.0 - (1.0 - sigma_min) * t;
    let zt = z0.iter().zip(x1).map(|(z, x)| a * z + t * x).collect();
    let u = z0
        .iter()
        .zip(x1)
        .map(|(z, x)| x - (1.0 - sigma_min) * z)
        .collect();
    (zt, u)
}

/// Batched `(z_t, u_target)`; `t` has one entry per row.
pub fn cfm_training_batch(
    x1: &Array2<f64>,
    z0: &Array2<f64>,
    t: &[f64],
    sigma_min: f64,
) -> (Array2<f64>, Array2<f64>) {
    let mut zt = z0.clone();
    let mut u = z0.clone();
    for r in 0..z0.nrows() {
        let a = 1.0 - (1.0 - sigma_min) * t[r];
        for c in 0..z0.ncols() {
            zt[[r, c]] = a * z0[[r, c]] + t[r] * x1[[r, c]];
            u[[r, c]] = x1[[r, c]] - (1.0 - sigma_min) * z0[[r, c]];
        }
    }
    (zt, u)
}

impl FlowField {
    pub fn new(dim: usize, context_dim: usize, hidden: &[usize], seed: u64) -> Self {
        Self {
            field: ConditionalNet::new(dim, context_dim, hidden, seed),
            sigma_min: DEFAULT_SIGMA_MIN,
        }
    }

    pub fn dim(&self) -> usize {
        self.field.dim
    }

    pub fn param_count(&self) -> usize {
        self.field.param_count()
    }

    pub fn velocity(&self, z: &Array2<f64>, t: f64, context: &Array2<f64>) -> Array2<f64> {
        self.field.eval(z, &vec![t; z.nrows()], context)
    }

    /// Euler integration of `dz/dt = v(z, t | c)` over `nfe` equal steps.
    pub fn sample(&self, z0: &Array2<f64>, context: &Array2<f64>, nfe: usize) -> Result<Array2<f64>, CfmError> {
        if nfe == 0 {
            return Err(CfmError::ZeroNfe);
        }
        if z0.ncols() != self.dim() {
            return Err(CfmError::Dimension {
                expected: self.dim(),
                got: z0.ncols(),
            });
        }
        let h = 1.0 / nfe as f64;
        let mut z = z0.clone();
        for step in 0..nfe {
            let v = self.velocity(&z, step as f64 * h, context);
            z.scaled_add(h, &v);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(CfmError::NonFinite { step });
            }
        }
        Ok(z)
    }

    /// Sampler recorded on the tape so that gradients reach the field weights.
    pub fn sample_on_tape(
        &self,
        tape: &mut Tape,
        theta: Var,
        offset: usize,
        z0: Var,
        context: Var,
        nfe: usize,
    ) -> Var {
        let rows = tape.shape(z0).0;
        let h = 1.0 / nfe as f64;
        let mut z = z0;
        for step in 0..nfe {
            let t = vec![step as f64 * h; rows];
            let v = self.field.eval_on_tape(tape, theta, offset, z, &t, context);
            let dz = tape.scale(v, h);
            z = tape.add(z, dz);
        }
        z
    }

    /// Per-datum squared error `‖v(z_t, t | c) − u‖²` as a `B×1` column,
    /// averaged over dimensions.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        theta: Var,
        offset: usize,
        x1: &Array2<f64>,
        z0: &Array2<f64>,
        t: &[f64],
        context: Var,
    ) -> Var {
        let (zt, u) = cfm_training_batch(x1, z0, t, self.sigma_min);
        let zt = tape.leaf(zt);
        let u = tape.leaf(u);
        let v = self.field.eval_on_tape(tape, theta, offset, zt, t, context);
        let d = tape.sub(v, u);
        let sq = tape.square(d);
        let s = tape.sum_cols(sq);
        tape.scale(s, 1.0 / x1.ncols() as f64)
    }
}
