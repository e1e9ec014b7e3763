//! Trajectory generation and the JSON-lines dataset format.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::envs::{EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::state::{ContextBatch, State};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    RandomTorque,
    SineSweep,
    MppiExpert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub t: f64,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub tau: Vec<f64>,
    pub qddot: Vec<f64>,
    pub f_ext: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub env: EnvSpec,
    pub policy: Policy,
    /// Standard deviation of the Gaussian noise on logged q, q̇ and τ.
    pub noise: f64,
    pub seed: u64,
    pub records: Vec<Record>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    env: EnvSpec,
    policy: Policy,
    noise: f64,
    seed: u64,
    n: usize,
    dt: f64,
    records: usize,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn initial_state(env: &EnvSpec, rng: &mut ChaCha8Rng) -> State {
    match env.kind {
        EnvKind::Pendulum => State::new(vec![rng.random_range(-0.5..0.5)], vec![rng.random_range(-0.5..0.5)]),
        EnvKind::BouncingPendulum => State::new(
            vec![rng.random_range(-0.5..env.wall_angle.min(0.5) - 0.05)],
            vec![rng.random_range(-0.5..0.5)],
        ),
        EnvKind::CartpoleFriction => State::new(vec![0.0, rng.random_range(-0.5..0.5)], vec![0.0, 0.0]),
    }
}

/// Open-loop excitation sequence, one torque vector per record.
pub fn excitation(env: &EnvSpec, policy: Policy, n_records: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, 1);
    let amp = env.torque_amplitude();
    let actuated = env.actuated();
    let hold = ((env.torque_hold / env.record_dt()).round() as usize).max(1);
    let duration = n_records as f64 * env.record_dt();
    let mut current = vec![0.0; env.dof()];
    (0..n_records)
        .map(|k| {
            match policy {
                Policy::RandomTorque | Policy::MppiExpert => {
                    if k % hold == 0 {
                        for (c, &a) in current.iter_mut().zip(&actuated) {
                            *c = if a { rng.random_range(-amp..=amp) } else { 0.0 };
                        }
                    }
                }
                Policy::SineSweep => {
                    let t = k as f64 * env.record_dt();
                    let (f0, f1) = (0.1, 2.0);
                    let rate = (f1 - f0) / duration.max(1e-9);
                    let phase = 2.0 * std::f64::consts::PI * (f0 * t + 0.5 * rate * t * t);
                    for (c, &a) in current.iter_mut().zip(&actuated) {
                        *c = if a { amp * phase.sin() } else { 0.0 };
                    }
                }
            }
            current.clone()
        })
        .collect()
}

/// Simulates `n_records` logged steps. Recorded `qddot` and `f_ext` are the
/// noise-free values at the logged state; noise is added to `q`, `qdot` and
/// `tau` only.
pub fn generate_dataset(env: &EnvSpec, policy: Policy, n_records: usize, noise: f64, seed: u64) -> Result<TrajectoryDataset> {
    env.validate().map_err(|e| Error::Usage(e.to_string()))?;
    if n_records == 0 {
        return Err(Error::Usage("dataset needs at least one step".into()));
    }
    if !(noise >= 0.0) {
        return Err(Error::Usage(format!("noise must be non-negative, got {noise}")));
    }
    let mut init_rng = stream_rng(seed, 0);
    let s0 = initial_state(env, &mut init_rng);
    let taus = match policy {
        Policy::MppiExpert => crate::mppi::expert_torques(env, &s0, n_records, seed)?,
        _ => excitation(env, policy, n_records, seed),
    };
    let mut noise_rng = stream_rng(seed, 2);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut jitter = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|x| if noise > 0.0 { x + noise * normal.sample(&mut noise_rng) } else { *x })
            .collect()
    };
    let (mut q, mut qd) = (s0.q, s0.qdot);
    let mut records = Vec::with_capacity(n_records);
    for (k, tau) in taus.iter().enumerate() {
        let (qdd, f) = env.true_dynamics(&q, &qd, tau);
        records.push(Record {
            t: k as f64 * env.record_dt(),
            q: jitter(&q),
            qdot: jitter(&qd),
            tau: jitter(tau),
            qddot: qdd,
            f_ext: f,
        });
        env.advance_record(&mut q, &mut qd, tau);
        if !q.iter().chain(&qd).all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("simulation diverged at record {k}")));
        }
    }
    Ok(TrajectoryDataset {
        env: env.clone(),
        policy,
        noise,
        seed,
        records,
    })
}

/// Re-simulates from `initial` under the given torques; element `k` is the
/// state at record `k`.
pub fn replay(env: &EnvSpec, initial: &State, taus: &[Vec<f64>]) -> Vec<State> {
    let mut s = initial.clone();
    let mut out = Vec::with_capacity(taus.len() + 1);
    out.push(s.clone());
    for tau in taus {
        env.advance_record(&mut s.q, &mut s.qdot, tau);
        out.push(s.clone());
    }
    out
}

/// Number of separate penetration episodes in the logged states.
pub fn count_contact_events(ds: &TrajectoryDataset) -> usize {
    let mut events = 0;
    let mut inside = false;
    for r in &ds.records {
        let now = ds.env.in_contact(&r.q, &r.qdot);
        if now && !inside {
            events += 1;
        }
        inside = now;
    }
    events
}

fn fmt_f64(out: &mut String, v: f64) {
    if v.is_finite() {
        write!(out, "{v:.16e}").unwrap();
    } else {
        out.push_str("null");
    }
}

fn fmt_vec(out: &mut String, v: &[f64]) {
    out.push('[');
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        fmt_f64(out, *x);
    }
    out.push(']');
}

/// Compact JSON with floats written at 17 significant digits. Object keys come
/// out in the map's own (sorted) order.
pub fn write_json_value(out: &mut String, v: &serde_json::Value) {
    use serde_json::Value;
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                fmt_f64(out, n.as_f64().unwrap());
            } else {
                write!(out, "{n}").unwrap();
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).unwrap()),
        Value::Array(a) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_json_value(out, x);
            }
            out.push(']');
        }
        Value::Object(m) => {
            out.push('{');
            for (i, (k, x)) in m.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).unwrap());
                out.push(':');
                write_json_value(out, x);
            }
            out.push('}');
        }
    }
}

/// Byte offset of a serde_json error within `text`.
pub fn error_offset(text: &str, e: &serde_json::Error) -> usize {
    let (line, col) = (e.line(), e.column());
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + col.saturating_sub(1)).min(text.len())
}

impl TrajectoryDataset {
    pub fn dof(&self) -> usize {
        self.env.dof()
    }

    pub fn dt(&self) -> f64 {
        self.env.record_dt()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            schema_version: DATASET_SCHEMA_VERSION,
            env: self.env.clone(),
            policy: self.policy,
            noise: self.noise,
            seed: self.seed,
            n: self.dof(),
            dt: self.dt(),
            records: self.records.len(),
        };
        let mut out = String::new();
        write_json_value(&mut out, &serde_json::to_value(&header).unwrap());
        out.push('\n');
        for r in &self.records {
            out.push_str("{\"t\":");
            fmt_f64(&mut out, r.t);
            for (key, v) in [
                ("q", &r.q),
                ("qdot", &r.qdot),
                ("tau", &r.tau),
                ("qddot", &r.qddot),
                ("f_ext", &r.f_ext),
            ] {
                write!(out, ",\"{key}\":").unwrap();
                fmt_vec(&mut out, v);
            }
            out.push_str("}\n");
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut offset = 0usize;
        let mut lines = text.split_inclusive('\n');
        let first = lines.next().ok_or(Error::Corrupt {
            offset: 0,
            message: "empty dataset file".into(),
        })?;
        let header: Header = serde_json::from_str(first.trim_end()).map_err(|e| Error::Corrupt {
            offset: error_offset(first, &e),
            message: format!("dataset header: {e}"),
        })?;
        if header.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "dataset schema_version {} (expected {DATASET_SCHEMA_VERSION})",
                header.schema_version
            )));
        }
        header.env.validate().map_err(|e| Error::Schema(e.to_string()))?;
        offset += first.len();
        let n = header.env.dof();
        let mut records = Vec::with_capacity(header.records);
        for (i, line) in lines.enumerate() {
            let body = line.trim_end();
            if body.is_empty() {
                offset += line.len();
                continue;
            }
            let r: Record = serde_json::from_str(body).map_err(|e| Error::Corrupt {
                offset: offset + error_offset(body, &e),
                message: format!("record {i}: {e}"),
            })?;
            if [&r.q, &r.qdot, &r.tau, &r.qddot, &r.f_ext].iter().any(|v| v.len() != n) {
                return Err(Error::Corrupt {
                    offset,
                    message: format!("record {i}: vector length differs from n = {n}"),
                });
            }
            if !line.ends_with('\n') {
                return Err(Error::Corrupt {
                    offset: offset + line.len(),
                    message: format!("record {i}: truncated line"),
                });
            }
            offset += line.len();
            records.push(r);
        }
        if records.len() != header.records {
            return Err(Error::Corrupt {
                offset: text.len(),
                message: format!("expected {} records, found {}", header.records, records.len()),
            });
        }
        if header.n != n {
            return Err(Error::Schema(format!("header n = {} but env has {n} coordinates", header.n)));
        }
        Ok(Self {
            env: header.env,
            policy: header.policy,
            noise: header.noise,
            seed: header.seed,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    fn column(&self, range: std::ops::Range<usize>, pick: impl Fn(&Record) -> &[f64]) -> Array2<f64> {
        let n = self.dof();
        let mut out = Array2::zeros((range.len(), n));
        for (r, k) in range.enumerate() {
            for (j, v) in pick(&self.records[k]).iter().enumerate() {
                out[[r, j]] = *v;
            }
        }
        out
    }

    /// Contexts for records in `range`.
    pub fn contexts(&self, range: std::ops::Range<usize>) -> ContextBatch {
        ContextBatch {
            q: self.column(range.clone(), |r| &r.q),
            qdot: self.column(range.clone(), |r| &r.qdot),
            tau: self.column(range, |r| &r.tau),
        }
    }

    pub fn qddot(&self, range: std::ops::Range<usize>) -> Array2<f64> {
        self.column(range, |r| &r.qddot)
    }

    pub fn f_ext(&self, range: std::ops::Range<usize>) -> Array2<f64> {
        self.column(range, |r| &r.f_ext)
    }

    /// Observations `(features(q), q̇)` for records in `range`.
    pub fn observations(&self, range: std::ops::Range<usize>) -> Array2<f64> {
        let fm = self.env.feature_map();
        let n = self.dof();
        let mut out = Array2::zeros((range.len(), fm.dim() + n));
        for (r, k) in range.enumerate() {
            let rec = &self.records[k];
            let f = fm.features(&rec.q);
            for (j, v) in f.iter().chain(&rec.qdot).enumerate() {
                out[[r, j]] = *v;
            }
        }
        out
    }

    /// Training tensors over every record that has a successor.
    pub fn train_set(&self) -> TrainSet {
        let m = self.len().saturating_sub(1);
        TrainSet {
            contexts: self.contexts(0..m),
            qddot: self.qddot(0..m),
            f_ext: self.f_ext(0..m),
            obs: self.observations(0..m),
            next_obs: self.observations(1..m + 1),
        }
    }

    /// Records strictly inside a contact episode and strictly outside one.
    pub fn contact_split(&self) -> (Vec<usize>, Vec<usize>) {
        let mut contact = Vec::new();
        let mut flight = Vec::new();
        for (k, r) in self.records.iter().enumerate() {
            if self.env.in_contact(&r.q, &r.qdot) {
                contact.push(k);
            } else {
                flight.push(k);
            }
        }
        (contact, flight)
    }
}

/// Supervision tensors derived from a dataset; row `k` pairs record `k` with
/// record `k + 1`.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub contexts: ContextBatch,
    pub qddot: Array2<f64>,
    pub f_ext: Array2<f64>,
    pub obs: Array2<f64>,
    pub next_obs: Array2<f64>,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.qddot.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> TrainSet {
        let pick = |a: &Array2<f64>| a.select(ndarray::Axis(0), idx);
        TrainSet {
            contexts: ContextBatch {
                q: pick(&self.contexts.q),
                qdot: pick(&self.contexts.qdot),
                tau: pick(&self.contexts.tau),
            },
            qddot: pick(&self.qddot),
            f_ext: pick(&self.f_ext),
            obs: pick(&self.obs),
            next_obs: pick(&self.next_obs),
        }
    }
}
