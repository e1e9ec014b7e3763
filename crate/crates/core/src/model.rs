//! The interface every dynamics model exposes to evaluation and planning.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::error::Result;
use crate::state::{ContextBatch, FeatureMap, State};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Stride,
    Onn,
    Delan,
    LnnDiffusion,
    PureDiffusion,
    Oracle,
    Frozen,
}

impl ModelKind {
    pub fn cli_name(self) -> &'static str {
        match self {
            ModelKind::Stride => "stride",
            ModelKind::Onn => "onn",
            ModelKind::Delan => "delan",
            ModelKind::LnnDiffusion => "lnn-diffusion",
            ModelKind::PureDiffusion => "pure-diffusion",
            ModelKind::Oracle => "oracle",
            ModelKind::Frozen => "frozen",
        }
    }

    pub fn from_cli_name(s: &str) -> Option<Self> {
        [
            ModelKind::Stride,
            ModelKind::Onn,
            ModelKind::Delan,
            ModelKind::LnnDiffusion,
            ModelKind::PureDiffusion,
            ModelKind::Oracle,
            ModelKind::Frozen,
        ]
        .into_iter()
        .find(|k| k.cli_name() == s)
    }
}

/// How stochastic models draw their latent noise.
pub enum Latent<'a> {
    /// All latent draws are zero.
    Zero,
    Sampled(&'a mut ChaCha8Rng),
}

impl Latent<'_> {
    pub fn normal(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        match self {
            Latent::Zero => Array2::zeros((rows, cols)),
            Latent::Sampled(rng) => Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(*rng)),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Latent::Zero)
    }
}

/// A batch of model inputs: the context and the matching observation rows.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub batch: ContextBatch,
    /// `(features(q), q̇)` rows; observation-space models step these directly.
    pub obs: Array2<f64>,
}

impl ModelInput {
    pub fn from_batch(batch: ContextBatch, features: &FeatureMap) -> Self {
        let obs = observations(&batch.q, &batch.qdot, features);
        Self { batch, obs }
    }
}

pub fn observations(q: &Array2<f64>, qdot: &Array2<f64>, features: &FeatureMap) -> Array2<f64> {
    let f = features.features_batch(q);
    ndarray::concatenate(ndarray::Axis(1), &[f.view(), qdot.view()]).unwrap()
}

/// Inverse of [`observations`] for a single row; angles unwrap toward `near`.
pub fn state_from_obs(obs: &[f64], features: &FeatureMap, near: Option<&[f64]>) -> State {
    let fd = features.dim();
    State::new(features.coords(&obs[..fd], near), obs[fd..].to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Accel {
        accel: Array2<f64>,
        /// Sampled residual generalized force, when the model has one.
        residual_force: Option<Array2<f64>>,
        /// The residual's share of `accel`.
        residual_accel: Option<Array2<f64>>,
    },
    NextObs(Array2<f64>),
}

pub trait DynamicsModel: Send + Sync {
    fn kind(&self) -> ModelKind;

    fn dof(&self) -> usize;

    fn feature_map(&self) -> FeatureMap;

    /// `nfe` overrides the sampler's step count where the model has one.
    fn predict(&self, input: &ModelInput, latent: &mut Latent<'_>, nfe: Option<usize>) -> Result<Prediction>;

    /// Sampler step count used when `nfe` is not given.
    fn default_nfe(&self) -> Option<usize> {
        None
    }

    fn has_force_stream(&self) -> bool {
        false
    }

    /// Logging period of the training data, s.
    fn data_dt(&self) -> Option<f64> {
        None
    }

    /// Runs only the residual or next-state sampler on `input`, for
    /// throughput measurements. `None` when the model has no sampler.
    fn run_sampler(&self, _input: &ModelInput, _nfe: usize, _latent: &mut Latent<'_>) -> Option<Result<()>> {
        None
    }

    /// Learned mass matrix for models with a Lagrangian prior.
    fn mass_matrix(&self, _q: &[f64]) -> Option<Array2<f64>> {
        None
    }

    /// Learned total energy for models with a Lagrangian prior.
    fn learned_energy(&self, _state: &State) -> Option<f64> {
        None
    }

    /// Learned potential for models with a Lagrangian prior.
    fn learned_potential(&self, _q: &[f64]) -> Option<f64> {
        None
    }
}

/// The analytic simulator viewed as a model; its residual is the true
/// external force.
#[derive(Debug, Clone)]
pub struct OracleModel {
    pub env: EnvSpec,
}

impl DynamicsModel for OracleModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Oracle
    }

    fn dof(&self) -> usize {
        self.env.dof()
    }

    fn feature_map(&self) -> FeatureMap {
        self.env.feature_map()
    }

    fn predict(&self, input: &ModelInput, _latent: &mut Latent<'_>, _nfe: Option<usize>) -> Result<Prediction> {
        let b = &input.batch;
        let (rows, n) = b.q.dim();
        let mut accel = Array2::zeros((rows, n));
        let mut force = Array2::zeros((rows, n));
        let mut res = Array2::zeros((rows, n));
        for r in 0..rows {
            let q = b.q.row(r).to_vec();
            let qd = b.qdot.row(r).to_vec();
            let tau = b.tau.row(r).to_vec();
            let (a, f) = self.env.true_dynamics(&q, &qd, &tau);
            let m = self.env.mass_matrix(&q);
            let ra = solve_small(&m, &f);
            for j in 0..n {
                accel[[r, j]] = a[j];
                force[[r, j]] = f[j];
                res[[r, j]] = ra[j];
            }
        }
        Ok(Prediction::Accel {
            accel,
            residual_force: Some(force),
            residual_accel: Some(res),
        })
    }

    fn has_force_stream(&self) -> bool {
        true
    }

    fn data_dt(&self) -> Option<f64> {
        Some(self.env.record_dt())
    }

    fn mass_matrix(&self, q: &[f64]) -> Option<Array2<f64>> {
        Some(self.env.mass_matrix(q))
    }

    fn learned_energy(&self, state: &State) -> Option<f64> {
        Some(self.env.energy(&state.q, &state.qdot))
    }

    fn learned_potential(&self, q: &[f64]) -> Option<f64> {
        let zero = vec![0.0; q.len()];
        Some(self.env.energy(q, &zero))
    }
}

/// Predicts zero acceleration everywhere.
#[derive(Debug, Clone)]
pub struct FrozenModel {
    pub features: FeatureMap,
}

impl DynamicsModel for FrozenModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Frozen
    }

    fn dof(&self) -> usize {
        self.features.dof()
    }

    fn feature_map(&self) -> FeatureMap {
        self.features.clone()
    }

    fn predict(&self, input: &ModelInput, _latent: &mut Latent<'_>, _nfe: Option<usize>) -> Result<Prediction> {
        Ok(Prediction::Accel {
            accel: Array2::zeros(input.batch.q.raw_dim()),
            residual_force: None,
            residual_accel: None,
        })
    }
}

/// Solves `m x = b` for the 1×1 and 2×2 systems used here, falling back to
/// Gaussian elimination with partial pivoting.
pub fn solve_small(m: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    match n {
        1 => vec![b[0] / m[[0, 0]]],
        2 => {
            let det = m[[0, 0]] * m[[1, 1]] - m[[0, 1]] * m[[1, 0]];
            vec![
                (m[[1, 1]] * b[0] - m[[0, 1]] * b[1]) / det,
                (m[[0, 0]] * b[1] - m[[1, 0]] * b[0]) / det,
            ]
        }
        _ => {
            let mut a = m.clone();
            let mut x = b.to_vec();
            for c in 0..n {
                let p = (c..n)
                    .max_by(|&i, &j| a[[i, c]].abs().total_cmp(&a[[j, c]].abs()))
                    .unwrap();
                for k in 0..n {
                    a.swap([c, k], [p, k]);
                }
                x.swap(c, p);
                for r in c + 1..n {
                    let f = a[[r, c]] / a[[c, c]];
                    for k in c..n {
                        a[[r, k]] -= f * a[[c, k]];
                    }
                    x[r] -= f * x[c];
                }
            }
            for c in (0..n).rev() {
                for k in c + 1..n {
                    x[c] -= a[[c, k]] * x[k];
                }
                x[c] /= a[[c, c]];
            }
            x
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_small_matches_product() {
        let m = Array2::from_shape_vec((3, 3), vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]).unwrap();
        let x = solve_small(&m, &[1.0, 2.0, 3.0]);
        let back = m.dot(&ndarray::Array1::from(x));
        for (a, b) in back.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ["stride", "onn", "delan", "lnn-diffusion", "pure-diffusion"] {
            assert_eq!(ModelKind::from_cli_name(k).unwrap().cli_name(), k);
        }
    }
}
