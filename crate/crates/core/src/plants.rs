//! Case-study plants and their reference generators.
//!
//! * Inverted pendulum, `x = [θ, θ̇]`, `u = τ`, with `θ` measured from the
//!   upright position and left unwrapped.
//! * Quadrotor, `x = [r, ṙ, q, ω] ∈ R¹³` with a scalar-first unit quaternion
//!   and `u = [η, τ] ∈ R⁴` (collective thrust and body moments).

use nalgebra::{DVector, Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ode::DynamicsFn;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
}

impl PendulumParams {
    pub fn new(mass: f64, length: f64, gravity: f64) -> Self {
        assert!(mass > 0.0 && length > 0.0, "pendulum mass and length must be positive");
        Self { mass, length, gravity }
    }

    /// The simulated "real" pendulum: 0.55 kg.
    pub fn true_plant() -> Self {
        Self::new(0.55, 1.0, GRAVITY)
    }

    /// The first-principles model the controller starts from: 1 kg.
    pub fn nominal() -> Self {
        Self::new(1.0, 1.0, GRAVITY)
    }
}

/// `θ̈ = 3g·sin θ/(2l) + 3τ/(m l²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pendulum {
    pub params: PendulumParams,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Self {
        Self { params }
    }

    pub fn acceleration(&self, theta: f64, torque: f64) -> f64 {
        let PendulumParams { mass, length, gravity } = self.params;
        3.0 * gravity * theta.sin() / (2.0 * length) + 3.0 * torque / (mass * length * length)
    }

    /// Kinetic plus potential energy, with the upright position at height `l/2`.
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        let PendulumParams { mass, length, gravity } = self.params;
        let inertia = mass * length * length / 3.0;
        0.5 * inertia * x[1] * x[1] + mass * gravity * 0.5 * length * x[0].cos()
    }
}

impl DynamicsFn for Pendulum {
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>, _t: f64) -> DVector<f64> {
        DVector::from_vec(vec![x[1], self.acceleration(x[0], u[0])])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrotorParams {
    pub mass: f64,
    /// Diagonal of the body inertia matrix.
    pub inertia: [f64; 3],
    /// Gravity vector in the world frame.
    pub gravity: [f64; 3],
    /// Diagonal of the linear drag acting on the velocity.
    pub drag: [f64; 3],
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            mass: 0.03,
            inertia: [1.43e-5, 1.43e-5, 2.17e-5],
            gravity: [0.0, 0.0, -GRAVITY],
            drag: [0.02, 0.02, 0.04],
        }
    }
}

impl QuadrotorParams {
    pub fn hover_thrust(&self) -> f64 {
        self.mass * Vector3::from(self.gravity).norm()
    }

    /// `[η_hover, 0, 0, 0]`.
    pub fn hover_input(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.hover_thrust(), 0.0, 0.0, 0.0])
    }
}

/// Rigid-body quadrotor. With `disturbed` set, the velocity-dependent drag
/// acts on the translational dynamics; otherwise the field is the nominal
/// model.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrotor {
    pub params: QuadrotorParams,
    pub disturbed: bool,
    inertia: Matrix3<f64>,
    inertia_inv: Matrix3<f64>,
}

pub const QUAT: std::ops::Range<usize> = 6..10;

impl Quadrotor {
    pub fn new(params: QuadrotorParams, disturbed: bool) -> Self {
        assert!(params.mass > 0.0, "quadrotor mass must be positive");
        assert!(params.inertia.iter().all(|v| *v > 0.0), "inertia must be positive definite");
        let inertia = Matrix3::from_diagonal(&Vector3::from(params.inertia));
        let inertia_inv = Matrix3::from_diagonal(&Vector3::from(params.inertia.map(|v| 1.0 / v)));
        Self {
            params,
            disturbed,
            inertia,
            inertia_inv,
        }
    }

    /// State at position `r` and velocity `v`, level attitude, zero body rates.
    pub fn level_state(r: Vector3<f64>, v: Vector3<f64>) -> DVector<f64> {
        let mut x = DVector::zeros(13);
        x.rows_mut(0, 3).copy_from(&r);
        x.rows_mut(3, 3).copy_from(&v);
        x[6] = 1.0;
        x
    }
}

fn quaternion_of(x: &DVector<f64>) -> Quaternion<f64> {
    Quaternion::new(x[6], x[7], x[8], x[9])
}

impl DynamicsFn for Quadrotor {
    fn state_dim(&self) -> usize {
        13
    }
    fn input_dim(&self) -> usize {
        4
    }
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>, _t: f64) -> DVector<f64> {
        let p = &self.params;
        let vel = Vector3::new(x[3], x[4], x[5]);
        let q = quaternion_of(x);
        let omega = Vector3::new(x[10], x[11], x[12]);
        let thrust = Vector3::new(0.0, 0.0, u[0]);
        let torque = Vector3::new(u[1], u[2], u[3]);

        // Rotation of the (not necessarily unit) quaternion, normalized here so
        // that intermediate RK stages stay consistent.
        let rot = UnitQuaternion::from_quaternion(q);
        let mut acc = Vector3::from(p.gravity) + rot * thrust / p.mass;
        if self.disturbed {
            acc -= Matrix3::from_diagonal(&Vector3::from(p.drag)) * vel / p.mass;
        }
        let qdot = q * Quaternion::new(0.0, omega.x, omega.y, omega.z) * 0.5;
        let omega_dot = self.inertia_inv * (torque - omega.cross(&(self.inertia * omega)));

        let mut dx = DVector::zeros(13);
        dx.rows_mut(0, 3).copy_from(&vel);
        dx.rows_mut(3, 3).copy_from(&acc);
        dx[6] = qdot.w;
        dx[7] = qdot.i;
        dx[8] = qdot.j;
        dx[9] = qdot.k;
        dx.rows_mut(10, 3).copy_from(&omega_dot);
        dx
    }

    fn project_state(&self, x: &mut DVector<f64>) {
        let norm = x.rows(QUAT.start, 4).norm();
        if norm > 0.0 && norm.is_finite() {
            x.rows_mut(QUAT.start, 4).unscale_mut(norm);
        }
    }
}

/// Piecewise-constant angle commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReferenceConfig {
    /// Step magnitudes are uniform in `[−max_magnitude, max_magnitude]`.
    pub max_magnitude: f64,
    /// Hold times are uniform in `[min_hold, max_hold]` seconds.
    pub min_hold: f64,
    pub max_hold: f64,
}

impl Default for StepReferenceConfig {
    fn default() -> Self {
        Self {
            max_magnitude: 0.4,
            min_hold: 2.0,
            max_hold: 5.0,
        }
    }
}

/// Angle reference `θ_ref(t_k)` for `k = 0..round(duration/dt)`; `θ̇_ref = 0`.
pub fn step_reference(seed: u64, duration: f64, dt: f64, cfg: &StepReferenceConfig) -> Vec<f64> {
    assert!(duration > 0.0 && dt > 0.0, "duration and dt must be positive");
    let count = (duration / dt).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let level = if cfg.max_magnitude > 0.0 {
            rng.random_range(-cfg.max_magnitude..=cfg.max_magnitude)
        } else {
            0.0
        };
        let hold = if cfg.max_hold > cfg.min_hold {
            rng.random_range(cfg.min_hold..cfg.max_hold)
        } else {
            cfg.min_hold
        };
        let samples = ((hold / dt).round() as usize).max(1);
        out.extend(std::iter::repeat(level).take(samples.min(count - out.len())));
    }
    out
}

/// Indices at which the step reference changes value.
pub fn step_change_indices(reference: &[f64]) -> Vec<usize> {
    (1..reference.len()).filter(|&k| reference[k] != reference[k - 1]).collect()
}

/// Horizontal circle at altitude `z0` traversed counter-clockwise from
/// `(radius, 0, z0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleReference {
    pub radius: f64,
    pub speed: f64,
    pub altitude: f64,
}

impl CircleReference {
    pub fn new(radius: f64, speed: f64, altitude: f64) -> Self {
        assert!(radius > 0.0 && speed >= 0.0, "radius must be positive and speed nonnegative");
        Self { radius, speed, altitude }
    }

    /// Radius and speed drawn uniformly from the given ranges.
    pub fn random(seed: u64, radius: (f64, f64), speed: (f64, f64), altitude: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = if radius.1 > radius.0 { rng.random_range(radius.0..radius.1) } else { radius.0 };
        let s = if speed.1 > speed.0 { rng.random_range(speed.0..speed.1) } else { speed.0 };
        Self::new(r, s, altitude)
    }

    pub fn angular_rate(&self) -> f64 {
        self.speed / self.radius
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        let w = self.angular_rate();
        Vector3::new(self.radius * (w * t).cos(), self.radius * (w * t).sin(), self.altitude)
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        let w = self.angular_rate();
        Vector3::new(-self.radius * w * (w * t).sin(), self.radius * w * (w * t).cos(), 0.0)
    }

    /// Full 13-dimensional reference: level attitude, zero body rates.
    pub fn state(&self, t: f64) -> DVector<f64> {
        Quadrotor::level_state(self.position(t), self.velocity(t))
    }
}

/// Reference states at `t_k = k·dt`, `k = 0..round(duration/dt)`.
pub fn circle_reference(circle: &CircleReference, duration: f64, dt: f64) -> Vec<DVector<f64>> {
    let count = (duration / dt).round() as usize;
    (0..count).map(|k| circle.state(k as f64 * dt)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{integrate_interval, rk4_step};
    use nalgebra::dvector;

    #[test]
    fn pendulum_values() {
        let p = Pendulum::new(PendulumParams::new(1.0, 1.0, 9.81));
        let f = p.eval(&dvector![std::f64::consts::FRAC_PI_2, 0.3], &dvector![0.0], 0.0);
        assert!((f[1] - 14.715).abs() < 1e-12);
        assert_eq!(f[0], 0.3);
        assert_eq!(p.eval(&dvector![0.0, 0.0], &dvector![0.0], 0.0), dvector![0.0, 0.0]);
        // torque term 3τ/(m l²)
        let t = Pendulum::new(PendulumParams::true_plant());
        assert!((t.acceleration(0.0, 1.1) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn pendulum_energy_is_conserved() {
        let p = Pendulum::new(PendulumParams::true_plant());
        let mut x = dvector![0.3, 0.0];
        let e0 = p.energy(&x);
        for k in 0..1000 {
            x = rk4_step(&p, &x, &dvector![0.0], k as f64 * 0.01, 0.01).unwrap();
        }
        assert!(((p.energy(&x) - e0) / e0).abs() < 1e-6);
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let params = QuadrotorParams::default();
        assert!((params.hover_thrust() - 0.2943).abs() < 1e-12);
        let quad = Quadrotor::new(params.clone(), false);
        let x = Quadrotor::level_state(Vector3::new(0.5, -0.2, 1.0), Vector3::zeros());
        let f = quad.eval(&x, &params.hover_input(), 0.0);
        assert!(f.amax() < 1e-15);
    }

    #[test]
    fn torque_about_x() {
        let params = QuadrotorParams::default();
        let quad = Quadrotor::new(params.clone(), false);
        let x = Quadrotor::level_state(Vector3::zeros(), Vector3::zeros());
        let f = quad.eval(&x, &dvector![params.hover_thrust(), 0.001, 0.0, 0.0], 0.0);
        assert!((f[10] - 0.001 / 1.43e-5).abs() < 1e-9);
        assert_eq!(f[11], 0.0);
        assert_eq!(f[12], 0.0);
    }

    #[test]
    fn drag_only_when_disturbed() {
        let params = QuadrotorParams::default();
        let x = Quadrotor::level_state(Vector3::zeros(), Vector3::new(1.0, 0.0, -0.5));
        let u = params.hover_input();
        let nominal = Quadrotor::new(params.clone(), false).eval(&x, &u, 0.0);
        let real = Quadrotor::new(params.clone(), true).eval(&x, &u, 0.0);
        assert!(nominal.rows(3, 3).amax() < 1e-15);
        assert!((real[3] + 0.02 / 0.03).abs() < 1e-12);
        assert!((real[5] - 0.04 * 0.5 / 0.03).abs() < 1e-12);
    }

    #[test]
    fn quaternion_stays_unit() {
        let params = QuadrotorParams::default();
        let quad = Quadrotor::new(params.clone(), true);
        let mut x = Quadrotor::level_state(Vector3::zeros(), Vector3::zeros());
        x[10] = 3.0;
        x[11] = -2.0;
        x[12] = 1.0;
        let u = dvector![0.3, 1e-4, -2e-4, 5e-5];
        for k in 0..2000 {
            x = integrate_interval(&quad, &x, &u, k as f64 * 0.01, (k + 1) as f64 * 0.01, 1).unwrap();
            quad.project_state(&mut x);
            assert!((x.rows(6, 4).norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn step_reference_properties() {
        let cfg = StepReferenceConfig::default();
        let a = step_reference(5, 20.0, 0.01, &cfg);
        assert_eq!(a.len(), 2000);
        assert_eq!(a, step_reference(5, 20.0, 0.01, &cfg));
        assert!(a.iter().all(|v| v.abs() <= 0.4));
        assert_ne!(a, step_reference(6, 20.0, 0.01, &cfg));
        let flat = StepReferenceConfig {
            max_magnitude: 0.0,
            ..cfg
        };
        assert!(step_reference(5, 3.0, 0.01, &flat).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn circle_velocity_is_position_derivative() {
        let c = CircleReference::new(1.5, 2.0, 1.0);
        let h = 1e-3;
        for k in 0..20 {
            let t = 0.37 * k as f64;
            let fd = (c.position(t + h) - c.position(t - h)) / (2.0 * h);
            assert!((fd - c.velocity(t)).amax() < 2.0 * h * h * c.speed.powi(3) / c.radius.powi(2));
        }
        let still = CircleReference::new(1.0, 0.0, 1.0);
        assert_eq!(still.position(0.0), still.position(7.0));
        assert_eq!(circle_reference(&c, 20.0, 0.005).len(), 4000);
    }
}
