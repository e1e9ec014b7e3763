//! Lagrangian prior: a learned Cholesky factor of the mass matrix and a learned
//! potential, expanded through the Euler–Lagrange equations.
//!
//! Kinetic energy uses the `T = ½ q̇ᵀ M q̇` convention. The velocity product
//! term is assembled without Christoffel symbols:
//!
//! ```text
//! c(q, q̇) = Σ_j (∂M/∂q_j q̇) q̇_j − ½ [q̇ᵀ (∂M/∂q_i) q̇]_i
//! q̈ = M⁻¹ (τ − c − ∂V/∂q)
//! ```
//!
//! `∂M/∂q_j` and `∂V/∂q_j` come from forward-mode tangents recorded on the tape,
//! so the whole expression stays differentiable in the network weights.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::nets::{Mlp, MlpSpec};
use crate::state::{Context, ContextBatch, ContextEncoder, EncodedBatch, State};

pub const DEFAULT_DIAG_EPS: f64 = 1e-4;
const SINGULAR_PIVOT: f64 = 1e-12;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LnnError {
    #[error("Cholesky pivot {value:e} below {SINGULAR_PIVOT:e} at row {row}")]
    Singular { row: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnnParams {
    /// Outputs `n(n+1)/2` entries of `L`: the `n` diagonal pre-activations
    /// first, then the strictly lower entries row by row.
    pub chol_net: Mlp,
    pub pot_net: Mlp,
    pub diag_eps: f64,
    pub encoder: ContextEncoder,
}

impl LnnParams {
    pub fn new(encoder: ContextEncoder, hidden: &[usize], seed: u64) -> Self {
        let n = encoder.dof();
        let f = encoder.feature_dim();
        let mut chol_spec = MlpSpec::default_dynamics(f, n * (n + 1) / 2);
        chol_spec.hidden = hidden.to_vec();
        let mut pot_spec = MlpSpec::default_dynamics(f, 1);
        pot_spec.hidden = hidden.to_vec();
        Self {
            chol_net: Mlp::new(chol_spec, seed.wrapping_mul(2).wrapping_add(1)),
            pot_net: Mlp::new(pot_spec, seed.wrapping_mul(2).wrapping_add(2)),
            diag_eps: DEFAULT_DIAG_EPS,
            encoder,
        }
    }

    pub fn dof(&self) -> usize {
        self.encoder.dof()
    }

    pub fn param_count(&self) -> usize {
        self.chol_net.params.len() + self.pot_net.params.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.chol_net.params.flat.clone();
        v.extend_from_slice(&self.pot_net.params.flat);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let k = self.chol_net.params.len();
        self.chol_net.params.flat.copy_from_slice(&flat[..k]);
        let m = self.pot_net.params.len();
        self.pot_net.params.flat.copy_from_slice(&flat[k..k + m]);
    }

    /// Records the prior's forward dynamics for a batch. Parameters are read
    /// from `theta[offset..]`.
    pub fn eval_on_tape(
        &self,
        tape: &mut Tape,
        theta: Var,
        offset: usize,
        enc: &EncodedBatch,
        qdot: &Array2<f64>,
        tau: &Array2<f64>,
    ) -> LnnOnTape {
        let n = self.dof();
        let chol = self.chol_net.bind(tape, theta, offset);
        let pot = self
            .pot_net
            .bind(tape, theta, offset + self.chol_net.params.len());
        let x = tape.leaf(enc.q_feat.clone());
        let seeds: Vec<Var> = enc.q_tangents.iter().map(|t| tape.leaf(t.clone())).collect();
        let (raw, raw_t) = chol.forward_tangents(tape, x, &seeds);
        let (v, v_t) = pot.forward_tangents(tape, x, &seeds);

        // L entries and their q-tangents.
        let tri = n * (n + 1) / 2;
        let mut l: Vec<Var> = Vec::with_capacity(tri);
        let mut dl: Vec<Vec<Var>> = vec![Vec::with_capacity(tri); n];
        let mut lower_k = n;
        for i in 0..n {
            for j in 0..=i {
                let k = if i == j {
                    i
                } else {
                    let k = lower_k;
                    lower_k += 1;
                    k
                };
                let o = tape.col(raw, k);
                if i == j {
                    let sp = tape.softplus(o);
                    l.push(tape.offset(sp, self.diag_eps));
                    let s = tape.sigmoid(o);
                    for (qj, t) in raw_t.iter().enumerate() {
                        let tc = tape.col(*t, k);
                        dl[qj].push(tape.mul(s, tc));
                    }
                } else {
                    l.push(o);
                    for (qj, t) in raw_t.iter().enumerate() {
                        dl[qj].push(tape.col(*t, k));
                    }
                }
            }
        }
        // The strictly-lower entries were consumed in row-major order above, so
        // `l` is indexed by tri_index.
        let factor = CholFactor { n, entries: l };

        let qd: Vec<Var> = (0..n)
            .map(|i| tape.leaf(qdot.column(i).to_owned().insert_axis(ndarray::Axis(1))))
            .collect();
        let tq: Vec<Var> = (0..n)
            .map(|i| tape.leaf(tau.column(i).to_owned().insert_axis(ndarray::Axis(1))))
            .collect();

        // dM/dq_j entries (a, b) with b <= a.
        let dm: Vec<Vec<Vec<Var>>> = (0..n)
            .map(|j| {
                (0..n)
                    .map(|a| {
                        (0..n)
                            .map(|b| {
                                let mut acc: Option<Var> = None;
                                for k in 0..=a.min(b) {
                                    let la = factor.entry(a, k);
                                    let lb = factor.entry(b, k);
                                    let dla = dl[j][tri_index(a, k)];
                                    let dlb = dl[j][tri_index(b, k)];
                                    let t1 = tape.mul(dla, lb);
                                    let t2 = tape.mul(la, dlb);
                                    let s = tape.add(t1, t2);
                                    acc = Some(match acc {
                                        Some(p) => tape.add(p, s),
                                        None => s,
                                    });
                                }
                                acc.unwrap()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();

        let mut rhs = Vec::with_capacity(n);
        for i in 0..n {
            let mut c: Option<Var> = None;
            let add = |tape: &mut Tape, c: &mut Option<Var>, v: Var| {
                *c = Some(match *c {
                    Some(p) => tape.add(p, v),
                    None => v,
                });
            };
            for j in 0..n {
                for k in 0..n {
                    let a = tape.mul(dm[j][i][k], qd[k]);
                    let b = tape.mul(a, qd[j]);
                    add(tape, &mut c, b);
                }
            }
            for a in 0..n {
                for b in 0..n {
                    let x = tape.mul(qd[a], dm[i][a][b]);
                    let y = tape.mul(x, qd[b]);
                    let h = tape.scale(y, -0.5);
                    add(tape, &mut c, h);
                }
            }
            let g = tape.col(v_t[i], 0);
            let cg = tape.add(c.unwrap(), g);
            rhs.push(tape.sub(tq[i], cg));
        }
        let accel = factor.solve(tape, &rhs);
        LnnOnTape {
            accel,
            chol: factor,
            potential: v,
        }
    }

    fn run(&self, batch: &ContextBatch) -> (Tape, LnnOnTape) {
        let enc = self.encoder.encode(batch, true);
        let mut tape = Tape::new();
        let theta = tape.row(&self.flat());
        let out = self.eval_on_tape(&mut tape, theta, 0, &enc, &batch.qdot, &batch.tau);
        (tape, out)
    }

    /// Batched `f_LNN`, `B×n`.
    pub fn accel_batch(&self, batch: &ContextBatch) -> Result<Array2<f64>, LnnError> {
        let (tape, out) = self.run(batch);
        out.chol.check_pivots(&tape)?;
        Ok(columns(&tape, &out.accel))
    }

    pub fn forward_dynamics(&self, ctx: &Context) -> Result<Vec<f64>, LnnError> {
        if ctx.state.dof() != self.dof() {
            return Err(LnnError::Dimension {
                expected: self.dof(),
                got: ctx.state.dof(),
            });
        }
        Ok(self.accel_batch(&ContextBatch::single(ctx))?.row(0).to_vec())
    }

    /// Mass matrices for each row of `q`, row-major `n×n` each.
    pub fn mass_batch(&self, q: &Array2<f64>) -> Vec<Array2<f64>> {
        let batch = ContextBatch {
            q: q.clone(),
            qdot: Array2::zeros(q.raw_dim()),
            tau: Array2::zeros(q.raw_dim()),
        };
        let (tape, out) = self.run(&batch);
        let n = self.dof();
        (0..q.nrows())
            .map(|r| Array2::from_shape_fn((n, n), |(a, b)| out.chol.mass_value(&tape, a, b, r)))
            .collect()
    }

    pub fn mass_matrix(&self, q: &[f64]) -> Array2<f64> {
        let qa = Array2::from_shape_vec((1, q.len()), q.to_vec()).unwrap();
        self.mass_batch(&qa).remove(0)
    }

    /// Lower-triangular factor `L(q)`.
    pub fn cholesky_factor(&self, q: &[f64]) -> Array2<f64> {
        let batch = ContextBatch::single(&Context::new(q.to_vec(), vec![0.0; q.len()], vec![0.0; q.len()]));
        let (tape, out) = self.run(&batch);
        let n = self.dof();
        Array2::from_shape_fn((n, n), |(i, j)| {
            if j <= i {
                tape.value(out.chol.entry(i, j))[[0, 0]]
            } else {
                0.0
            }
        })
    }

    pub fn potential(&self, q: &[f64]) -> f64 {
        let feats = self
            .encoder
            .q_feat
            .apply(&Array2::from_shape_vec((1, self.encoder.feature_dim()), self.encoder.features.features(q)).unwrap());
        self.pot_net.forward(&feats).expect("feature dimension")[[0, 0]]
    }

    pub fn kinetic(&self, state: &State) -> f64 {
        let m = self.mass_matrix(&state.q);
        let v = ndarray::Array1::from(state.qdot.clone());
        0.5 * v.dot(&m.dot(&v))
    }

    /// `T − V`.
    pub fn lagrangian(&self, state: &State) -> f64 {
        self.kinetic(state) - self.potential(&state.q)
    }

    /// `T + V`.
    pub fn energy(&self, state: &State) -> f64 {
        self.kinetic(state) + self.potential(&state.q)
    }
}

/// Prior outputs recorded on a tape.
#[derive(Debug, Clone)]
pub struct LnnOnTape {
    /// `B×1` columns of `f_LNN`.
    pub accel: Vec<Var>,
    pub chol: CholFactor,
    /// `B×1` learned potential.
    pub potential: Var,
}

fn tri_index(i: usize, j: usize) -> usize {
    debug_assert!(j <= i);
    i * (i + 1) / 2 + j
}

/// Lower-triangular factor held as `B×1` column nodes.
#[derive(Debug, Clone)]
pub struct CholFactor {
    n: usize,
    entries: Vec<Var>,
}

impl CholFactor {
    pub fn dof(&self) -> usize {
        self.n
    }

    pub fn entry(&self, i: usize, j: usize) -> Var {
        self.entries[tri_index(i, j)]
    }

    /// Solves `L Lᵀ x = b` by forward then backward substitution.
    pub fn solve(&self, tape: &mut Tape, b: &[Var]) -> Vec<Var> {
        let n = self.n;
        let mut y: Vec<Var> = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc = b[i];
            for (k, yk) in y.iter().enumerate() {
                let p = tape.mul(self.entry(i, k), *yk);
                acc = tape.sub(acc, p);
            }
            y.push(tape.div(acc, self.entry(i, i)));
        }
        let mut x: Vec<Option<Var>> = vec![None; n];
        for i in (0..n).rev() {
            let mut acc = y[i];
            for (k, xk) in x.iter().enumerate().skip(i + 1) {
                let p = tape.mul(self.entry(k, i), xk.unwrap());
                acc = tape.sub(acc, p);
            }
            x[i] = Some(tape.div(acc, self.entry(i, i)));
        }
        x.into_iter().map(Option::unwrap).collect()
    }

    /// `M x = L (Lᵀ x)`.
    pub fn mul_mass(&self, tape: &mut Tape, x: &[Var]) -> Vec<Var> {
        let n = self.n;
        let mut u = Vec::with_capacity(n);
        for k in 0..n {
            let mut acc: Option<Var> = None;
            for (i, xi) in x.iter().enumerate().skip(k) {
                let p = tape.mul(self.entry(i, k), *xi);
                acc = Some(match acc {
                    Some(a) => tape.add(a, p),
                    None => p,
                });
            }
            u.push(acc.unwrap());
        }
        (0..n)
            .map(|i| {
                let mut acc = tape.mul(self.entry(i, 0), u[0]);
                for (k, uk) in u.iter().enumerate().take(i + 1).skip(1) {
                    let p = tape.mul(self.entry(i, k), *uk);
                    acc = tape.add(acc, p);
                }
                acc
            })
            .collect()
    }

    pub fn mass_value(&self, tape: &Tape, a: usize, b: usize, row: usize) -> f64 {
        let mut s = 0.0;
        for k in 0..=a.min(b) {
            s += tape.value(self.entry(a, k))[[row, 0]] * tape.value(self.entry(b, k))[[row, 0]];
        }
        s
    }

    pub fn check_pivots(&self, tape: &Tape) -> Result<(), LnnError> {
        for i in 0..self.n {
            if let Some(&value) = tape
                .value(self.entry(i, i))
                .iter()
                .find(|v| !(v.abs() >= SINGULAR_PIVOT))
            {
                return Err(LnnError::Singular { row: i, value });
            }
        }
        Ok(())
    }
}

/// Stacks `B×1` column nodes into a `B×n` array.
pub fn columns(tape: &Tape, cols: &[Var]) -> Array2<f64> {
    let b = tape.value(cols[0]).nrows();
    Array2::from_shape_fn((b, cols.len()), |(i, j)| tape.value(cols[j])[[i, 0]])
}
