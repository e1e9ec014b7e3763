//! Analytic ground-truth systems and their integrators.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::state::{FeatureMap, State};

pub const GRAVITY: f64 = 9.81;
/// Velocity scale of the smoothed Coulomb friction on the cart.
const COULOMB_SMOOTHING: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Pendulum,
    BouncingPendulum,
    CartpoleFriction,
}

impl EnvKind {
    pub fn cli_name(self) -> &'static str {
        match self {
            EnvKind::Pendulum => "pendulum",
            EnvKind::BouncingPendulum => "bouncing-pendulum",
            EnvKind::CartpoleFriction => "cartpole",
        }
    }

    pub fn from_cli_name(s: &str) -> Option<Self> {
        match s {
            "pendulum" => Some(EnvKind::Pendulum),
            "bouncing-pendulum" | "bouncing_pendulum" => Some(EnvKind::BouncingPendulum),
            "cartpole" | "cartpole_friction" => Some(EnvKind::CartpoleFriction),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Rk4,
    SemiImplicitEuler,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
#[error("invalid environment: {0}")]
pub struct EnvError(pub String);

/// Physical parameters and integration settings of a ground-truth system.
///
/// Angles are measured from the hanging-down position. For the cartpole the
/// pendulum link parameters are `mass`/`length` and the cart adds
/// `cart_mass`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    /// kg
    pub mass: f64,
    /// m
    pub length: f64,
    /// m/s²
    pub gravity: f64,
    /// Joint viscous damping, N·m·s/rad.
    pub joint_damping: f64,
    /// rad
    pub wall_angle: f64,
    /// N·m/rad
    pub contact_stiffness: f64,
    /// N·m·s/rad
    pub contact_damping: f64,
    /// kg
    pub cart_mass: f64,
    /// Coulomb coefficient on the cart (dimensionless).
    pub coulomb: f64,
    /// Viscous friction on the cart, N·s/m.
    pub cart_viscous: f64,
    /// Simulation step, s.
    pub dt: f64,
    /// Simulation steps per logged record.
    pub record_every: usize,
    pub integrator: Integrator,
    /// Seconds between torque changes for random excitation.
    pub torque_hold: f64,
    /// Excitation amplitude as a multiple of the gravity torque.
    pub torque_scale: f64,
}

impl EnvSpec {
    fn base(kind: EnvKind) -> Self {
        Self {
            kind,
            mass: 1.0,
            length: 1.0,
            gravity: GRAVITY,
            joint_damping: 0.0,
            wall_angle: 0.0,
            contact_stiffness: 0.0,
            contact_damping: 0.0,
            cart_mass: 0.0,
            coulomb: 0.0,
            cart_viscous: 0.0,
            dt: 2e-3,
            record_every: 5,
            integrator: Integrator::Rk4,
            torque_hold: 0.2,
            torque_scale: 2.0,
        }
    }

    pub fn pendulum() -> Self {
        Self::base(EnvKind::Pendulum)
    }

    /// Pendulum with a stiff penalty wall on the positive side.
    pub fn bouncing_pendulum() -> Self {
        Self {
            wall_angle: 0.4,
            contact_stiffness: 500.0,
            contact_damping: 5.0,
            torque_scale: 0.6,
            ..Self::base(EnvKind::BouncingPendulum)
        }
    }

    pub fn cartpole() -> Self {
        Self {
            mass: 0.2,
            length: 0.5,
            cart_mass: 1.0,
            coulomb: 0.1,
            cart_viscous: 0.5,
            torque_scale: 3.0,
            ..Self::base(EnvKind::CartpoleFriction)
        }
    }

    pub fn of_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Pendulum => Self::pendulum(),
            EnvKind::BouncingPendulum => Self::bouncing_pendulum(),
            EnvKind::CartpoleFriction => Self::cartpole(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let positive = [("mass", self.mass), ("length", self.length), ("gravity", self.gravity)];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(EnvError(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("joint_damping", self.joint_damping),
            ("contact_stiffness", self.contact_stiffness),
            ("contact_damping", self.contact_damping),
            ("coulomb", self.coulomb),
            ("cart_viscous", self.cart_viscous),
            ("torque_scale", self.torque_scale),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) {
                return Err(EnvError(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.kind == EnvKind::CartpoleFriction && !(self.cart_mass > 0.0) {
            return Err(EnvError("cart_mass must be positive".into()));
        }
        if self.kind == EnvKind::BouncingPendulum && !(self.contact_stiffness > 0.0) {
            return Err(EnvError("contact_stiffness must be positive".into()));
        }
        if !(self.dt > 0.0 && self.dt <= 0.05) {
            return Err(EnvError(format!("dt must lie in (0, 0.05], got {}", self.dt)));
        }
        if self.record_every == 0 {
            return Err(EnvError("record_every must be at least 1".into()));
        }
        if !(self.torque_hold > 0.0) {
            return Err(EnvError("torque_hold must be positive".into()));
        }
        Ok(())
    }

    pub fn dof(&self) -> usize {
        match self.kind {
            EnvKind::CartpoleFriction => 2,
            _ => 1,
        }
    }

    pub fn angle_mask(&self) -> Vec<bool> {
        match self.kind {
            EnvKind::CartpoleFriction => vec![false, true],
            _ => vec![true],
        }
    }

    pub fn feature_map(&self) -> FeatureMap {
        FeatureMap::new(self.angle_mask())
    }

    /// Index of the pendulum angle among the coordinates.
    pub fn pole_index(&self) -> usize {
        match self.kind {
            EnvKind::CartpoleFriction => 1,
            _ => 0,
        }
    }

    /// Which coordinates receive actuation.
    pub fn actuated(&self) -> Vec<bool> {
        match self.kind {
            EnvKind::CartpoleFriction => vec![true, false],
            _ => vec![true],
        }
    }

    pub fn record_dt(&self) -> f64 {
        self.dt * self.record_every as f64
    }

    /// Amplitude of random excitation on each actuated coordinate.
    pub fn torque_amplitude(&self) -> f64 {
        let gravity_torque = match self.kind {
            EnvKind::CartpoleFriction => self.mass * self.gravity,
            _ => self.mass * self.gravity * self.length,
        };
        self.torque_scale * gravity_torque
    }

    pub fn mass_matrix(&self, q: &[f64]) -> Array2<f64> {
        let (m, l) = (self.mass, self.length);
        match self.kind {
            EnvKind::CartpoleFriction => {
                let c = q[1].cos();
                Array2::from_shape_vec(
                    (2, 2),
                    vec![self.cart_mass + m, m * l * c, m * l * c, m * l * l],
                )
                .unwrap()
            }
            _ => Array2::from_elem((1, 1), m * l * l),
        }
    }

    /// `C(q, q̇) q̇ + g(q)`.
    pub fn bias(&self, q: &[f64], qdot: &[f64], out: &mut [f64]) {
        let (m, l, g) = (self.mass, self.length, self.gravity);
        match self.kind {
            EnvKind::CartpoleFriction => {
                let (s, th_dot) = (q[1].sin(), qdot[1]);
                out[0] = -m * l * s * th_dot * th_dot;
                out[1] = m * g * l * s;
            }
            _ => out[0] = m * g * l * q[0].sin(),
        }
    }

    /// Gravity torque `∂V/∂q`.
    pub fn gravity_torque(&self, q: &[f64], out: &mut [f64]) {
        let (m, l, g) = (self.mass, self.length, self.gravity);
        match self.kind {
            EnvKind::CartpoleFriction => {
                out[0] = 0.0;
                out[1] = m * g * l * q[1].sin();
            }
            _ => out[0] = m * g * l * q[0].sin(),
        }
    }

    /// Non-conservative generalized force.
    pub fn external_force(&self, q: &[f64], qdot: &[f64], out: &mut [f64]) {
        match self.kind {
            EnvKind::Pendulum => out[0] = -self.joint_damping * qdot[0],
            EnvKind::BouncingPendulum => {
                let pen = q[0] - self.wall_angle;
                out[0] = -self.joint_damping * qdot[0];
                if pen > 0.0 {
                    out[0] += -self.contact_stiffness * pen - self.contact_damping * qdot[0];
                }
            }
            EnvKind::CartpoleFriction => {
                let normal = (self.cart_mass + self.mass) * self.gravity;
                out[0] = -self.coulomb * normal * (qdot[0] / COULOMB_SMOOTHING).tanh()
                    - self.cart_viscous * qdot[0];
                out[1] = -self.joint_damping * qdot[1];
            }
        }
    }

    /// Whether the contact or friction channel is active.
    pub fn in_contact(&self, q: &[f64], qdot: &[f64]) -> bool {
        match self.kind {
            EnvKind::Pendulum => self.joint_damping > 0.0 && qdot[0] != 0.0,
            EnvKind::BouncingPendulum => q[0] > self.wall_angle,
            EnvKind::CartpoleFriction => qdot[0] != 0.0 && (self.coulomb > 0.0 || self.cart_viscous > 0.0),
        }
    }

    /// `(q̈, f_ext)` from `M q̈ + C q̇ + g = τ + f_ext`.
    pub fn true_dynamics(&self, q: &[f64], qdot: &[f64], tau: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.dof();
        let mut f = vec![0.0; n];
        let mut qdd = vec![0.0; n];
        self.accel_into(q, qdot, tau, &mut qdd, &mut f);
        (qdd, f)
    }

    fn accel_into(&self, q: &[f64], qdot: &[f64], tau: &[f64], qdd: &mut [f64], f: &mut [f64]) {
        let mut b = [0.0; 2];
        self.bias(q, qdot, &mut b);
        self.external_force(q, qdot, f);
        match self.kind {
            EnvKind::CartpoleFriction => {
                let r0 = tau[0] + f[0] - b[0];
                let r1 = tau[1] + f[1] - b[1];
                let (m, l) = (self.mass, self.length);
                let a = self.cart_mass + m;
                let off = m * l * q[1].cos();
                let d = m * l * l;
                let det = a * d - off * off;
                qdd[0] = (d * r0 - off * r1) / det;
                qdd[1] = (a * r1 - off * r0) / det;
            }
            _ => {
                let m = self.mass * self.length * self.length;
                qdd[0] = (tau[0] + f[0] - b[0]) / m;
            }
        }
    }

    /// Kinetic plus potential energy; potential is zero hanging down.
    pub fn energy(&self, q: &[f64], qdot: &[f64]) -> f64 {
        let (m, l, g) = (self.mass, self.length, self.gravity);
        let th = q[self.pole_index()];
        let potential = m * g * l * (1.0 - th.cos());
        let mm = self.mass_matrix(q);
        let v = ndarray::ArrayView1::from(qdot);
        0.5 * v.dot(&mm.dot(&v)) + potential
    }

    /// One simulation step of `dt` in place.
    pub fn step_in_place(&self, q: &mut [f64], qdot: &mut [f64], tau: &[f64]) {
        integrate(self.integrator, self.dt, q, qdot, |q, qd, out| {
            let mut f = [0.0; 2];
            self.accel_into(q, qd, tau, out, &mut f[..q.len()]);
        });
    }

    pub fn step(&self, state: &State, tau: &[f64]) -> State {
        let mut s = state.clone();
        self.step_in_place(&mut s.q, &mut s.qdot, tau);
        s
    }

    /// Advances one logged record (`record_every` simulation steps).
    pub fn advance_record(&self, q: &mut [f64], qdot: &mut [f64], tau: &[f64]) {
        for _ in 0..self.record_every {
            self.step_in_place(q, qdot, tau);
        }
    }
}

/// One step of `dt` for `q̈ = accel(q, q̇)`; `accel` writes into its last
/// argument. Works for any dimension.
pub fn integrate<F>(integrator: Integrator, dt: f64, q: &mut [f64], qdot: &mut [f64], mut accel: F)
where
    F: FnMut(&[f64], &[f64], &mut [f64]),
{
    let n = q.len();
    match integrator {
        Integrator::SemiImplicitEuler => {
            let mut a = vec![0.0; n];
            accel(q, qdot, &mut a);
            for i in 0..n {
                qdot[i] += a[i] * dt;
                q[i] += qdot[i] * dt;
            }
        }
        Integrator::Rk4 => {
            let mut k1a = vec![0.0; n];
            let mut k2a = vec![0.0; n];
            let mut k3a = vec![0.0; n];
            let mut k4a = vec![0.0; n];
            let mut tq = vec![0.0; n];
            let mut tv = vec![0.0; n];
            accel(q, qdot, &mut k1a);
            for i in 0..n {
                tq[i] = q[i] + 0.5 * dt * qdot[i];
                tv[i] = qdot[i] + 0.5 * dt * k1a[i];
            }
            let k2q = tv.clone();
            accel(&tq, &tv, &mut k2a);
            for i in 0..n {
                tq[i] = q[i] + 0.5 * dt * k2q[i];
                tv[i] = qdot[i] + 0.5 * dt * k2a[i];
            }
            let k3q = tv.clone();
            accel(&tq, &tv, &mut k3a);
            for i in 0..n {
                tq[i] = q[i] + dt * k3q[i];
                tv[i] = qdot[i] + dt * k3a[i];
            }
            let k4q = tv.clone();
            accel(&tq, &tv, &mut k4a);
            for i in 0..n {
                q[i] += dt / 6.0 * (qdot[i] + 2.0 * k2q[i] + 2.0 * k3q[i] + k4q[i]);
                qdot[i] += dt / 6.0 * (k1a[i] + 2.0 * k2a[i] + 2.0 * k3a[i] + k4a[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn pendulum_horizontal_acceleration() {
        let env = EnvSpec::pendulum();
        let (a, f) = env.true_dynamics(&[PI / 2.0], &[0.0], &[0.0]);
        assert!((a[0] + 9.81).abs() < 1e-12);
        assert_eq!(f[0], 0.0);
        let (a, f) = env.true_dynamics(&[0.0], &[0.0], &[0.0]);
        assert_eq!((a[0], f[0]), (0.0, 0.0));
    }

    #[test]
    fn wall_penalty_law() {
        let env = EnvSpec::bouncing_pendulum();
        let mut f = [0.0];
        env.external_force(&[env.wall_angle + 0.01], &[0.0], &mut f);
        assert!((f[0] + 5.0).abs() < 1e-9);
        env.external_force(&[env.wall_angle + 0.01], &[1.0], &mut f);
        assert!((f[0] + 10.0).abs() < 1e-9);
        env.external_force(&[env.wall_angle - 0.01], &[1.0], &mut f);
        assert_eq!(f[0], 0.0);
    }

    #[test]
    fn free_particle_advances() {
        let env = EnvSpec {
            gravity: 1e-300,
            dt: 0.01,
            ..EnvSpec::pendulum()
        };
        let s = env.step(&State::new(vec![0.0], vec![1.0]), &[0.0]);
        assert!((s.q[0] - 0.01).abs() < 1e-15);
    }

    fn energy_drift(dt: f64, steps: usize) -> f64 {
        let env = EnvSpec {
            dt,
            ..EnvSpec::pendulum()
        };
        let (mut q, mut v) = (vec![1.0], vec![0.0]);
        let e0 = env.energy(&q, &v);
        let mut worst: f64 = 0.0;
        for _ in 0..steps {
            env.step_in_place(&mut q, &mut v, &[0.0]);
            worst = worst.max((env.energy(&q, &v) - e0).abs());
        }
        worst
    }

    #[test]
    fn rk4_energy_drift_and_order() {
        let d1 = energy_drift(1e-3, 10_000);
        assert!(d1 < 1e-6, "drift {d1}");
        let coarse = energy_drift(4e-2, 250);
        let fine = energy_drift(2e-2, 500);
        let ratio = coarse / fine;
        assert!(ratio > 10.0 && ratio < 40.0, "ratio {ratio}");
    }

    #[test]
    fn cartpole_matches_lagrangian_identity() {
        let env = EnvSpec::cartpole();
        let q = [0.3, 1.1];
        let qd = [0.4, -0.7];
        let tau = [1.5, 0.0];
        let (a, f) = env.true_dynamics(&q, &qd, &tau);
        let m = env.mass_matrix(&q);
        let mut b = [0.0; 2];
        env.bias(&q, &qd, &mut b);
        for i in 0..2 {
            let lhs = m[[i, 0]] * a[0] + m[[i, 1]] * a[1] + b[i];
            assert!((lhs - tau[i] - f[i]).abs() < 1e-12);
        }
        // Power balance: dE/dt = q̇·(τ + f_ext).
        let h = 1e-6;
        let e = |s: f64| {
            let qq = [q[0] + s * qd[0], q[1] + s * qd[1]];
            let vv = [qd[0] + s * a[0], qd[1] + s * a[1]];
            env.energy(&qq, &vv)
        };
        let de = (e(h) - e(-h)) / (2.0 * h);
        let power = qd[0] * (tau[0] + f[0]) + qd[1] * (tau[1] + f[1]);
        assert!((de - power).abs() < 1e-6, "{de} vs {power}");
    }

    #[test]
    fn validation() {
        assert!(EnvSpec::pendulum().validate().is_ok());
        let bad = EnvSpec {
            dt: 0.1,
            ..EnvSpec::pendulum()
        };
        assert!(bad.validate().is_err());
        let bad = EnvSpec {
            mass: -1.0,
            ..EnvSpec::cartpole()
        };
        assert!(bad.validate().is_err());
    }
}
