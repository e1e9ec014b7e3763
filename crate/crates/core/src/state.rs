//! States, contexts and the input encoding shared by every learned model.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Generalized coordinates and velocities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
}

impl State {
    pub fn new(q: Vec<f64>, qdot: Vec<f64>) -> Self {
        assert_eq!(q.len(), qdot.len(), "q and qdot lengths differ");
        Self { q, qdot }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.qdot).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub tau: Vec<f64>,
}

/// Conditioning tuple `(q, qdot, tau)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub state: State,
    pub tau: ControlInput,
}

impl Context {
    pub fn new(q: Vec<f64>, qdot: Vec<f64>, tau: Vec<f64>) -> Self {
        assert_eq!(q.len(), tau.len(), "tau length differs from dof");
        Self {
            state: State::new(q, qdot),
            tau: ControlInput { tau },
        }
    }
}

/// Row-batched contexts, each array `B×n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBatch {
    pub q: Array2<f64>,
    pub qdot: Array2<f64>,
    pub tau: Array2<f64>,
}

impl ContextBatch {
    pub fn len(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.nrows() == 0
    }

    pub fn dof(&self) -> usize {
        self.q.ncols()
    }

    pub fn from_contexts(ctxs: &[Context]) -> Self {
        let n = ctxs.first().map_or(0, |c| c.state.dof());
        let rows = |f: &dyn Fn(&Context) -> &Vec<f64>| {
            Array2::from_shape_fn((ctxs.len(), n), |(i, j)| f(&ctxs[i])[j])
        };
        Self {
            q: rows(&|c| &c.state.q),
            qdot: rows(&|c| &c.state.qdot),
            tau: rows(&|c| &c.tau.tau),
        }
    }

    pub fn single(ctx: &Context) -> Self {
        Self::from_contexts(std::slice::from_ref(ctx))
    }
}

/// Maps coordinates to network features: angles become `(sin, cos)` pairs,
/// other coordinates pass through.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub angle_mask: Vec<bool>,
}

impl FeatureMap {
    pub fn new(angle_mask: Vec<bool>) -> Self {
        Self { angle_mask }
    }

    pub fn dof(&self) -> usize {
        self.angle_mask.len()
    }

    pub fn dim(&self) -> usize {
        self.angle_mask.iter().map(|&a| if a { 2 } else { 1 }).sum()
    }

    pub fn features(&self, q: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for (&x, &angle) in q.iter().zip(&self.angle_mask) {
            if angle {
                out.push(x.sin());
                out.push(x.cos());
            } else {
                out.push(x);
            }
        }
        out
    }

    /// Derivative of the feature vector with respect to `q[j]`.
    pub fn tangent(&self, q: &[f64], j: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for (i, (&x, &angle)) in q.iter().zip(&self.angle_mask).enumerate() {
            let on = if i == j { 1.0 } else { 0.0 };
            if angle {
                out.push(on * x.cos());
                out.push(-on * x.sin());
            } else {
                out.push(on);
            }
        }
        out
    }

    /// Inverse of [`FeatureMap::features`]; angles are unwrapped toward `near`.
    pub fn coords(&self, feats: &[f64], near: Option<&[f64]>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dof());
        let mut k = 0;
        for (i, &angle) in self.angle_mask.iter().enumerate() {
            if angle {
                let a = feats[k].atan2(feats[k + 1]);
                let a = match near {
                    Some(r) => r[i] + wrap_angle(a - r[i]),
                    None => a,
                };
                out.push(a);
                k += 2;
            } else {
                out.push(feats[k]);
                k += 1;
            }
        }
        out
    }

    pub fn features_batch(&self, q: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((q.nrows(), self.dim()));
        for (i, row) in q.rows().into_iter().enumerate() {
            let f = self.features(row.as_slice().expect("contiguous rows"));
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&f));
        }
        out
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Per-dimension affine standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Column statistics of `x`; standard deviations are floored at `min_std`.
    pub fn fit(x: &Array2<f64>, min_std: f64) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut mean = vec![0.0; x.ncols()];
        let mut std = vec![0.0; x.ncols()];
        for (j, col) in x.columns().into_iter().enumerate() {
            let m = col.sum() / n;
            let v = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            mean[j] = m;
            std[j] = v.sqrt().max(min_std);
        }
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[j], self.std[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    /// Scales a tangent (no shift).
    pub fn apply_tangent(&self, t: &Array2<f64>) -> Array2<f64> {
        let mut out = t.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let s = self.std[j];
            col.mapv_inplace(|v| v / s);
        }
        out
    }

    pub fn invert(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut out = z.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[j], self.std[j]);
            col.mapv_inplace(|v| v * s + m);
        }
        out
    }

    pub fn std_row(&self) -> Array2<f64> {
        Array2::from_shape_vec((1, self.dim()), self.std.clone()).unwrap()
    }
}

/// Standardized network inputs derived from a context batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEncoder {
    pub features: FeatureMap,
    pub q_feat: Standardizer,
    pub qdot: Standardizer,
    pub tau: Standardizer,
}

/// Constant inputs for one batch.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// Standardized q features, `B×F`.
    pub q_feat: Array2<f64>,
    /// `d(q_feat)/d(q_j)` for each coordinate `j`, `B×F` each.
    pub q_tangents: Vec<Array2<f64>>,
    /// Standardized `(q features, qdot, tau)`, `B×(F+2n)`.
    pub context: Array2<f64>,
}

impl ContextEncoder {
    pub fn identity(features: FeatureMap) -> Self {
        let n = features.dof();
        let f = features.dim();
        Self {
            features,
            q_feat: Standardizer::identity(f),
            qdot: Standardizer::identity(n),
            tau: Standardizer::identity(n),
        }
    }

    pub fn fit(features: FeatureMap, batch: &ContextBatch) -> Self {
        let qf = features.features_batch(&batch.q);
        Self {
            q_feat: Standardizer::fit(&qf, 1e-6),
            qdot: Standardizer::fit(&batch.qdot, 1e-6),
            tau: Standardizer::fit(&batch.tau, 1e-6),
            features,
        }
    }

    pub fn dof(&self) -> usize {
        self.features.dof()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim()
    }

    pub fn context_dim(&self) -> usize {
        self.features.dim() + 2 * self.features.dof()
    }

    pub fn encode(&self, batch: &ContextBatch, with_tangents: bool) -> EncodedBatch {
        let qf_raw = self.features.features_batch(&batch.q);
        let q_feat = self.q_feat.apply(&qf_raw);
        let q_tangents = if with_tangents {
            (0..self.dof())
                .map(|j| {
                    let mut t = Array2::zeros((batch.len(), self.feature_dim()));
                    for (i, row) in batch.q.rows().into_iter().enumerate() {
                        let v = self.features.tangent(row.as_slice().unwrap(), j);
                        t.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
                    }
                    self.q_feat.apply_tangent(&t)
                })
                .collect()
        } else {
            Vec::new()
        };
        let qd = self.qdot.apply(&batch.qdot);
        let tau = self.tau.apply(&batch.tau);
        let context = ndarray::concatenate(
            ndarray::Axis(1),
            &[q_feat.view(), qd.view(), tau.view()],
        )
        .unwrap();
        EncodedBatch {
            q_feat,
            q_tangents,
            context,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_and_inverse() {
        let fm = FeatureMap::new(vec![false, true]);
        assert_eq!(fm.dim(), 3);
        let q = [0.4, 2.0];
        let f = fm.features(&q);
        let back = fm.coords(&f, None);
        assert!((back[0] - 0.4).abs() < 1e-15 && (back[1] - 2.0).abs() < 1e-15);
        // Unwrapping keeps continuity near a reference beyond pi.
        let near = [0.0, 3.1 + 2.0 * std::f64::consts::PI];
        let q2 = [0.0, 3.2 + 2.0 * std::f64::consts::PI];
        let r = fm.coords(&fm.features(&q2), Some(&near));
        assert!((r[1] - q2[1]).abs() < 1e-12);
    }

    #[test]
    fn feature_tangent_matches_finite_difference() {
        let fm = FeatureMap::new(vec![true, false]);
        let q = [0.7, -0.3];
        for j in 0..2 {
            let t = fm.tangent(&q, j);
            let mut qp = q;
            let mut qm = q;
            qp[j] += 1e-6;
            qm[j] -= 1e-6;
            let (fp, fmn) = (fm.features(&qp), fm.features(&qm));
            for k in 0..fm.dim() {
                let fd = (fp[k] - fmn[k]) / 2e-6;
                assert!((fd - t[k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn standardizer_round_trip() {
        let x = Array2::from_shape_vec((4, 2), vec![1., 10., 2., 20., 3., 30., 4., 40.]).unwrap();
        let s = Standardizer::fit(&x, 1e-9);
        let z = s.apply(&x);
        assert!(z.column(0).sum().abs() < 1e-12);
        let back = s.invert(&z);
        assert!((&back - &x).iter().all(|v| v.abs() < 1e-12));
    }
}
