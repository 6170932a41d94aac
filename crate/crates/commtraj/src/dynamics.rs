//! Quadrotor model: physical parameters, the linearized planar state-space
//! description, closed-form matrix exponentials for its nilpotent state
//! matrices, and a nonlinear closed-loop simulation that validates the
//! linearization on a planned control.

use nalgebra::{Matrix2, Matrix4, RowVector4, SVector, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// State dimension of the full nonlinear model.
const NL_DIM: usize = 12;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid quadrotor parameters: {0}")]
    InvalidParams(String),
    #[error("matrix is not nilpotent (|A^4| = {residual:.3e})")]
    NotNilpotent { residual: f64 },
    #[error("attitude safety bound exceeded at t = {time:.4} s (roll {roll:.4} rad, pitch {pitch:.4} rad)")]
    AngleBoundExceeded { time: f64, roll: f64, pitch: f64 },
    #[error("state became non-finite at t = {time:.4} s")]
    NonFiniteState { time: f64 },
}

/// Physical constants of the quadrotor and the gains of the pre-stabilizing
/// altitude/yaw feedback.
///
/// The shipped defaults are representative small-quadrotor magnitudes, not
/// the parameters of any particular airframe.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadrotorParams {
    /// Total mass (kg).
    pub mass: f64,
    /// Gravitational acceleration (m/s^2).
    pub gravity: f64,
    /// Distance from the center to each motor (m).
    pub arm_length: f64,
    /// Roll/pitch inertia, identical by symmetry (kg m^2).
    pub inertia: f64,
    /// Yaw inertia (kg m^2).
    pub inertia_yaw: f64,
    /// Total rotor inertia (kg m^2).
    pub rotor_inertia: f64,
    /// Propeller thrust factor.
    pub thrust_factor: f64,
    /// Propeller aerodynamic drag factor.
    pub drag_factor: f64,
    /// Altitude loop damping gain (multiplies the vertical rate).
    pub alt_damping: f64,
    /// Altitude loop stiffness gain (multiplies the altitude error).
    pub alt_stiffness: f64,
    /// Yaw loop damping gain.
    pub yaw_damping: f64,
    /// Yaw loop stiffness gain.
    pub yaw_stiffness: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            mass: 0.5,
            gravity: 9.81,
            arm_length: 0.2,
            inertia: 5e-3,
            inertia_yaw: 9e-3,
            rotor_inertia: 3.4e-5,
            thrust_factor: 3e-5,
            drag_factor: 7.5e-7,
            alt_damping: 4.0,
            alt_stiffness: 4.0,
            yaw_damping: 4.0,
            yaw_stiffness: 4.0,
        }
    }
}

impl QuadrotorParams {
    /// Checks positivity of the physical constants and that both stabilized
    /// loops `s^2 + a1 s + a2` are Hurwitz (`a1 > 0`, `a2 > 0`).
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = [
            ("mass", self.mass),
            ("gravity", self.gravity),
            ("arm_length", self.arm_length),
            ("inertia", self.inertia),
            ("inertia_yaw", self.inertia_yaw),
            ("rotor_inertia", self.rotor_inertia),
            ("thrust_factor", self.thrust_factor),
            ("drag_factor", self.drag_factor),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(DynamicsError::InvalidParams(format!(
                    "{name} must be strictly positive, got {value}"
                )));
            }
        }
        let hurwitz = [
            ("altitude", self.alt_damping, self.alt_stiffness),
            ("yaw", self.yaw_damping, self.yaw_stiffness),
        ];
        for (loop_name, a1, a2) in hurwitz {
            if !(a1 > 0.0 && a2 > 0.0) {
                return Err(DynamicsError::InvalidParams(format!(
                    "{loop_name} loop gains must be positive for a Hurwitz polynomial (a1 = {a1}, a2 = {a2})"
                )));
            }
        }
        Ok(())
    }
}

/// Planar axis selector for the two decoupled 4-state subsystems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

/// The linearized drone: two decoupled controllable 4-state chains for the
/// planar position and two stable 2-state loops for altitude and yaw.
#[derive(Debug, Clone)]
pub struct LinearPlanarModel {
    pub a_x: Matrix4<f64>,
    pub a_y: Matrix4<f64>,
    pub b_x: Vector4<f64>,
    pub b_y: Vector4<f64>,
    pub c_x: RowVector4<f64>,
    pub c_y: RowVector4<f64>,
    pub a_alt: Matrix2<f64>,
    pub a_yaw: Matrix2<f64>,
}

impl LinearPlanarModel {
    pub fn axis_matrices(&self, axis: Axis) -> (&Matrix4<f64>, &Vector4<f64>) {
        match axis {
            Axis::X => (&self.a_x, &self.b_x),
            Axis::Y => (&self.a_y, &self.b_y),
        }
    }
}

/// Assembles the linear model from the physical parameters.
pub fn build_linear_model(params: &QuadrotorParams) -> Result<LinearPlanarModel, DynamicsError> {
    params.validate()?;
    let g = params.gravity;
    let gain = params.arm_length / params.inertia;
    let a_x = Matrix4::new(
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, g, 0.0, //
        0.0, 0.0, 0.0, 1.0, //
        0.0, 0.0, 0.0, 0.0,
    );
    let a_y = Matrix4::new(
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, -g, 0.0, //
        0.0, 0.0, 0.0, 1.0, //
        0.0, 0.0, 0.0, 0.0,
    );
    let b = Vector4::new(0.0, 0.0, 0.0, gain);
    let c = RowVector4::new(1.0, 0.0, 0.0, 0.0);
    let a_alt = Matrix2::new(0.0, 1.0, -params.alt_stiffness, -params.alt_damping);
    let a_yaw = Matrix2::new(0.0, 1.0, -params.yaw_stiffness, -params.yaw_damping);
    Ok(LinearPlanarModel {
        a_x,
        a_y,
        b_x: b,
        b_y: b,
        c_x: c,
        c_y: c,
        a_alt,
        a_yaw,
    })
}

/// State of both planar subsystems; `x` and `y` each hold
/// (position, velocity, tilt-like, tilt-rate-like) coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarState {
    pub x: Vector4<f64>,
    pub y: Vector4<f64>,
}

impl PlanarState {
    pub fn zero() -> Self {
        Self {
            x: Vector4::zeros(),
            y: Vector4::zeros(),
        }
    }

    /// State at rest at a planar position (zero velocity, tilt and rate).
    pub fn at_rest(position: Vector2<f64>) -> Self {
        Self {
            x: Vector4::new(position.x, 0.0, 0.0, 0.0),
            y: Vector4::new(position.y, 0.0, 0.0, 0.0),
        }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x[0], self.y[0])
    }

    pub fn velocity(&self) -> Vector2<f64> {
        Vector2::new(self.x[1], self.y[1])
    }

    pub fn axis(&self, axis: Axis) -> &Vector4<f64> {
        match axis {
            Axis::X => &self.x,
            Axis::Y => &self.y,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.y.iter()).all(|v| v.is_finite())
    }
}

/// Exact exponential of a nilpotent 4x4 matrix times `t`: the series
/// terminates after the cubic term.
pub fn expm_planar(a: &Matrix4<f64>, t: f64) -> Result<Matrix4<f64>, DynamicsError> {
    let a2 = a * a;
    let a4 = a2 * a2;
    let residual = a4.amax();
    let scale = a.amax().powi(4).max(1.0);
    if residual > 1e-12 * scale {
        return Err(DynamicsError::NotNilpotent { residual });
    }
    let a3 = a2 * a;
    Ok(Matrix4::identity() + a * t + a2 * (t * t / 2.0) + a3 * (t * t * t / 6.0))
}

/// Fixed-step RK4 integration of both planar subsystems under a control
/// signal `u(t) = (u_x, u_y)`. Returns the state at every step including
/// both endpoints.
pub fn simulate_linear<F>(
    model: &LinearPlanarModel,
    zeta0: &PlanarState,
    control: F,
    t_span: (f64, f64),
    dt: f64,
) -> Vec<(f64, PlanarState)>
where
    F: Fn(f64) -> Vector2<f64>,
{
    assert!(dt > 0.0, "step size must be positive");
    let (t0, t1) = t_span;
    assert!(t1 >= t0, "time span must be forward");
    let deriv = |t: f64, s: &PlanarState| -> (Vector4<f64>, Vector4<f64>) {
        let u = control(t);
        (
            model.a_x * s.x + model.b_x * u.x,
            model.a_y * s.y + model.b_y * u.y,
        )
    };
    let mut out = Vec::with_capacity(((t1 - t0) / dt).ceil() as usize + 2);
    let mut state = *zeta0;
    let mut t = t0;
    out.push((t, state));
    while t < t1 - 1e-12 {
        let h = dt.min(t1 - t);
        let (k1x, k1y) = deriv(t, &state);
        let s2 = PlanarState {
            x: state.x + k1x * (h / 2.0),
            y: state.y + k1y * (h / 2.0),
        };
        let (k2x, k2y) = deriv(t + h / 2.0, &s2);
        let s3 = PlanarState {
            x: state.x + k2x * (h / 2.0),
            y: state.y + k2y * (h / 2.0),
        };
        let (k3x, k3y) = deriv(t + h / 2.0, &s3);
        let s4 = PlanarState {
            x: state.x + k3x * h,
            y: state.y + k3y * h,
        };
        let (k4x, k4y) = deriv(t + h, &s4);
        state.x += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0);
        state.y += (k1y + k2y * 2.0 + k3y * 2.0 + k4y) * (h / 6.0);
        t += h;
        out.push((t, state));
    }
    out
}

/// Full rigid-body state of the drone.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FullNonlinearState {
    /// Position in the fixed frame (m); `z` is the altitude offset from the
    /// regulated hover height.
    pub position: Vector3<f64>,
    /// Translational velocity (m/s).
    pub velocity: Vector3<f64>,
    /// Euler angles (roll, pitch, yaw) (rad).
    pub angles: Vector3<f64>,
    /// Euler angle rates (rad/s).
    pub rates: Vector3<f64>,
}

impl FullNonlinearState {
    pub fn at_rest(planar: Vector2<f64>) -> Self {
        Self {
            position: Vector3::new(planar.x, planar.y, 0.0),
            velocity: Vector3::zeros(),
            angles: Vector3::zeros(),
            rates: Vector3::zeros(),
        }
    }

    fn to_vector(self) -> SVector<f64, NL_DIM> {
        let mut v = SVector::<f64, NL_DIM>::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.position);
        v.fixed_rows_mut::<3>(3).copy_from(&self.velocity);
        v.fixed_rows_mut::<3>(6).copy_from(&self.angles);
        v.fixed_rows_mut::<3>(9).copy_from(&self.rates);
        v
    }

    fn from_vector(v: &SVector<f64, NL_DIM>) -> Self {
        Self {
            position: v.fixed_rows::<3>(0).into(),
            velocity: v.fixed_rows::<3>(3).into(),
            angles: v.fixed_rows::<3>(6).into(),
            rates: v.fixed_rows::<3>(9).into(),
        }
    }
}

/// Options for the nonlinear validation run.
#[derive(Debug, Clone, Copy)]
pub struct NonlinearOptions {
    /// Fixed integration step (s).
    pub dt: f64,
    /// Hard bound on |roll| and |pitch| during the run (rad).
    pub angle_bound: f64,
}

impl Default for NonlinearOptions {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            angle_bound: std::f64::consts::FRAC_PI_3,
        }
    }
}

/// Outcome of a nonlinear validation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonlinearValidation {
    /// Largest planar distance between the nonlinear and linear trajectories (m).
    pub max_planar_deviation: f64,
    /// Arc length of the linear reference path (m).
    pub path_length: f64,
    /// `max_planar_deviation / path_length` (0 when the path is degenerate).
    pub deviation_fraction: f64,
    pub max_abs_roll: f64,
    pub max_abs_pitch: f64,
    /// Smallest squared rotor speed demanded anywhere along the run; negative
    /// values mean the plan is not realizable by spinning rotors.
    pub min_rotor_speed_sq: f64,
    pub realizable: bool,
    /// Downsampled nonlinear trajectory, one entry per `sample_stride` steps.
    pub samples: Vec<(f64, FullNonlinearState)>,
}

/// Recovers the squared rotor speeds from a control vector
/// `(u_x, u_y, u_z, u_yaw)` by inverting the mixing matrix.
pub fn rotor_speeds_squared(params: &QuadrotorParams, u: &Vector4<f64>) -> Vector4<f64> {
    let kb = params.thrust_factor;
    let kt = params.drag_factor;
    // Mixer rows map squared speeds to (u_x, u_y, u_z, u_yaw).
    let mixer = Matrix4::new(
        -kb, 0.0, kb, 0.0, //
        0.0, kb, 0.0, -kb, //
        kb, kb, kb, kb, //
        kt, -kt, kt, -kt,
    );
    mixer
        .try_inverse()
        .expect("mixer matrix is invertible for positive factors")
        * u
}

/// Net rotor gyroscopic speed `w1 - w2 + w3 - w4` given squared speeds;
/// negative squared entries are clamped to zero.
pub fn gyro_residual(omega_sq: &Vector4<f64>) -> f64 {
    let w = omega_sq.map(|s| s.max(0.0).sqrt());
    w[0] - w[1] + w[2] - w[3]
}

/// The planar perturbation signals of the stabilized model as functions of
/// the full state. Both vanish (with vanishing Jacobian) at the origin.
pub fn planar_perturbation(params: &QuadrotorParams, state: &FullNonlinearState) -> (f64, f64) {
    let (roll, pitch, yaw) = (state.angles[0], state.angles[1], state.angles[2]);
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    // Normalized vertical thrust (g - a2 z - a1 z_dot) / g after the
    // altitude feedback.
    let thrust = (params.gravity
        - params.alt_stiffness * state.position[2]
        - params.alt_damping * state.velocity[2])
        / params.gravity;
    let q_x = (sr * sy / (cr * cp) + sp * cy / cp) * thrust - pitch;
    let q_y = (sr * cy / (cr * cp) - sp * sy / cp) * thrust - roll;
    (q_x, q_y)
}

struct NonlinearPlant {
    params: QuadrotorParams,
    mixer_inv: Matrix4<f64>,
    min_rotor_speed_sq: f64,
}

impl NonlinearPlant {
    fn new(params: QuadrotorParams) -> Self {
        let kb = params.thrust_factor;
        let kt = params.drag_factor;
        let mixer = Matrix4::new(
            -kb, 0.0, kb, 0.0, //
            0.0, kb, 0.0, -kb, //
            kb, kb, kb, kb, //
            kt, -kt, kt, -kt,
        );
        Self {
            params,
            mixer_inv: mixer.try_inverse().expect("mixer matrix invertible"),
            min_rotor_speed_sq: f64::INFINITY,
        }
    }

    /// Closed-loop state derivative under the outer planar control `u_bar`
    /// and the held estimate of the second derivatives of the planar
    /// perturbations used for their cancellation.
    fn derivative(
        &mut self,
        v: &SVector<f64, NL_DIM>,
        u_bar: Vector2<f64>,
        qddot_est: Vector2<f64>,
    ) -> SVector<f64, NL_DIM> {
        let p = &self.params;
        let state = FullNonlinearState::from_vector(v);
        let (roll, pitch, _yaw) = (state.angles[0], state.angles[1], state.angles[2]);
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (sy, cy) = (state.angles[2].sin(), state.angles[2].cos());
        let (roll_rate, pitch_rate, yaw_rate) = (state.rates[0], state.rates[1], state.rates[2]);

        // Altitude and yaw pre-feedback.
        let u_z = p.mass
            * (p.gravity - p.alt_stiffness * state.position[2] - p.alt_damping * state.velocity[2])
            / (cr * cp);
        let u_yaw =
            p.inertia_yaw * (-p.yaw_stiffness * state.angles[2] - p.yaw_damping * state.rates[2]);

        // The gyroscopic term couples the control to the rotor speeds it
        // commands; resolve the loop by a short fixed-point iteration.
        let inertia_ratio = p.inertia_yaw / p.inertia - 1.0;
        let gyro_gain = p.rotor_inertia / p.inertia;
        let cancel_gain = p.inertia / p.arm_length;
        let mut q_w = 0.0;
        let mut u_x = 0.0;
        let mut u_y = 0.0;
        let mut omega_sq = Vector4::zeros();
        for _ in 0..3 {
            let q_pitch = inertia_ratio * roll_rate * yaw_rate + gyro_gain * roll_rate * q_w;
            let q_roll = -inertia_ratio * pitch_rate * yaw_rate - gyro_gain * pitch_rate * q_w;
            u_x = u_bar.x - cancel_gain * (qddot_est.x + q_pitch);
            u_y = u_bar.y - cancel_gain * (qddot_est.y + q_roll);
            omega_sq = self.mixer_inv * Vector4::new(u_x, u_y, u_z, u_yaw);
            q_w = gyro_residual(&omega_sq);
        }
        self.min_rotor_speed_sq = self.min_rotor_speed_sq.min(omega_sq.min());

        let thrust_accel = u_z / p.mass;
        let mut dv = SVector::<f64, NL_DIM>::zeros();
        dv.fixed_rows_mut::<3>(0).copy_from(&state.velocity);
        dv[3] = (cr * sp * cy + sr * sy) * thrust_accel;
        dv[4] = (cr * sp * sy - sr * cy) * thrust_accel;
        dv[5] = cr * cp * thrust_accel - p.gravity;
        dv.fixed_rows_mut::<3>(6).copy_from(&state.rates);
        dv[9] = -inertia_ratio * pitch_rate * yaw_rate - gyro_gain * pitch_rate * q_w
            + p.arm_length * u_y / p.inertia;
        dv[10] = inertia_ratio * roll_rate * yaw_rate + gyro_gain * roll_rate * q_w
            + p.arm_length * u_x / p.inertia;
        dv[11] = u_yaw / p.inertia_yaw;
        dv
    }
}

/// Integrates the full nonlinear closed-loop model under a planned planar
/// control and reports how far its planar track strays from the linear
/// model's under the same control.
///
/// The cancellation of the planar perturbation signals needs their second
/// time derivatives; these are estimated with a 5-point central finite
/// difference over the history of the integrated trajectory, so the estimate
/// trails the current step by two samples.
pub fn simulate_nonlinear_validated<F>(
    params: &QuadrotorParams,
    model: &LinearPlanarModel,
    control: F,
    t_span: (f64, f64),
    initial: FullNonlinearState,
    opts: NonlinearOptions,
) -> Result<NonlinearValidation, DynamicsError>
where
    F: Fn(f64) -> Vector2<f64>,
{
    params.validate()?;
    assert!(opts.dt > 0.0, "step size must be positive");
    let (t0, t1) = t_span;
    let n_steps = ((t1 - t0) / opts.dt).round().max(1.0) as usize;
    let dt = (t1 - t0) / n_steps as f64;
    let sample_stride = (n_steps / 2000).max(1);

    let mut plant = NonlinearPlant::new(*params);
    let mut v = initial.to_vector();

    // Linear reference integrated in lockstep from the matching planar state.
    let mut lin = PlanarState {
        x: Vector4::new(
            initial.position[0],
            initial.velocity[0],
            initial.angles[1],
            initial.rates[1],
        ),
        y: Vector4::new(
            initial.position[1],
            initial.velocity[1],
            initial.angles[0],
            initial.rates[0],
        ),
    };

    let mut q_history: Vec<Vector2<f64>> = Vec::with_capacity(5);
    let (q_x0, q_y0) = planar_perturbation(params, &initial);
    q_history.push(Vector2::new(q_x0, q_y0));

    let mut max_dev: f64 = 0.0;
    let mut path_length = 0.0;
    let mut max_roll: f64 = initial.angles[0].abs();
    let mut max_pitch: f64 = initial.angles[1].abs();
    let mut samples = Vec::with_capacity(n_steps / sample_stride + 2);
    samples.push((t0, initial));
    let mut prev_lin_pos = lin.position();

    for step in 0..n_steps {
        let t = t0 + step as f64 * dt;
        let qddot = if q_history.len() >= 5 {
            let h = &q_history[q_history.len() - 5..];
            (-h[0] + h[1] * 16.0 - h[2] * 30.0 + h[3] * 16.0 - h[4]) / (12.0 * dt * dt)
        } else {
            Vector2::zeros()
        };

        // Nonlinear step (RK4, control and cancellation held over the step).
        let u_bar = control(t);
        let k1 = plant.derivative(&v, u_bar, qddot);
        let k2 = plant.derivative(&(v + k1 * (dt / 2.0)), u_bar, qddot);
        let k3 = plant.derivative(&(v + k2 * (dt / 2.0)), u_bar, qddot);
        let k4 = plant.derivative(&(v + k3 * dt), u_bar, qddot);
        v += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);

        // Linear step under the identical zero-order-held control.
        let lderiv = |s: &PlanarState| {
            (
                model.a_x * s.x + model.b_x * u_bar.x,
                model.a_y * s.y + model.b_y * u_bar.y,
            )
        };
        let (l1x, l1y) = lderiv(&lin);
        let mid1 = PlanarState {
            x: lin.x + l1x * (dt / 2.0),
            y: lin.y + l1y * (dt / 2.0),
        };
        let (l2x, l2y) = lderiv(&mid1);
        let mid2 = PlanarState {
            x: lin.x + l2x * (dt / 2.0),
            y: lin.y + l2y * (dt / 2.0),
        };
        let (l3x, l3y) = lderiv(&mid2);
        let end = PlanarState {
            x: lin.x + l3x * dt,
            y: lin.y + l3y * dt,
        };
        let (l4x, l4y) = lderiv(&end);
        lin.x += (l1x + l2x * 2.0 + l3x * 2.0 + l4x) * (dt / 6.0);
        lin.y += (l1y + l2y * 2.0 + l3y * 2.0 + l4y) * (dt / 6.0);

        let t_next = t0 + (step + 1) as f64 * dt;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(DynamicsError::NonFiniteState { time: t_next });
        }
        let state = FullNonlinearState::from_vector(&v);
        let (roll, pitch) = (state.angles[0], state.angles[1]);
        max_roll = max_roll.max(roll.abs());
        max_pitch = max_pitch.max(pitch.abs());
        if roll.abs() > opts.angle_bound || pitch.abs() > opts.angle_bound {
            return Err(DynamicsError::AngleBoundExceeded {
                time: t_next,
                roll,
                pitch,
            });
        }

        let (q_x, q_y) = planar_perturbation(params, &state);
        q_history.push(Vector2::new(q_x, q_y));
        if q_history.len() > 5 {
            q_history.remove(0);
        }

        let lin_pos = lin.position();
        path_length += (lin_pos - prev_lin_pos).norm();
        prev_lin_pos = lin_pos;
        let planar = Vector2::new(state.position[0], state.position[1]);
        max_dev = max_dev.max((planar - lin_pos).norm());

        if (step + 1) % sample_stride == 0 || step + 1 == n_steps {
            samples.push((t_next, state));
        }
    }

    let deviation_fraction = if path_length > 0.0 {
        max_dev / path_length
    } else {
        0.0
    };
    Ok(NonlinearValidation {
        max_planar_deviation: max_dev,
        path_length,
        deviation_fraction,
        max_abs_roll: max_roll,
        max_abs_pitch: max_pitch,
        min_rotor_speed_sq: plant.min_rotor_speed_sq,
        realizable: plant.min_rotor_speed_sq >= -1e-9,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn model() -> LinearPlanarModel {
        build_linear_model(&QuadrotorParams::default()).unwrap()
    }

    #[test]
    fn model_entries_match_construction() {
        let m = model();
        assert_relative_eq!(m.a_x[(1, 2)], 9.81);
        assert_relative_eq!(m.a_y[(1, 2)], -9.81);
        assert_relative_eq!(m.b_x[3], 0.2 / 5e-3);
        // Default params differ from the doc example; rebuild with its numbers.
        let p = QuadrotorParams {
            arm_length: 0.2,
            inertia: 0.01,
            ..QuadrotorParams::default()
        };
        let m = build_linear_model(&p).unwrap();
        assert_relative_eq!(m.b_x[3], 20.0);
    }

    #[test]
    fn planar_matrices_are_nilpotent() {
        let m = model();
        for a in [&m.a_x, &m.a_y] {
            let a4 = a * a * a * a;
            assert_eq!(a4, Matrix4::zeros());
        }
    }

    #[test]
    fn controllability_matrix_has_full_rank() {
        let m = model();
        for (a, b) in [(&m.a_x, &m.b_x), (&m.a_y, &m.b_y)] {
            let cols = [*b, a * b, a * a * b, a * a * a * b];
            let ctrb = Matrix4::from_columns(&cols);
            assert_eq!(ctrb.rank(1e-9), 4);
        }
    }

    #[test]
    fn mirror_structure_between_axes() {
        let m = model();
        let mut mirrored = m.a_y;
        mirrored[(1, 2)] = -mirrored[(1, 2)];
        assert_eq!(m.a_x, mirrored);
    }

    #[test]
    fn invalid_params_rejected() {
        let p = QuadrotorParams {
            mass: -1.0,
            ..QuadrotorParams::default()
        };
        assert!(build_linear_model(&p).is_err());
        let p = QuadrotorParams {
            alt_stiffness: 0.0,
            ..QuadrotorParams::default()
        };
        assert!(build_linear_model(&p).is_err());
    }

    #[test]
    fn expm_identity_at_zero_and_known_entry() {
        let m = model();
        assert_eq!(expm_planar(&m.a_x, 0.0).unwrap(), Matrix4::identity());
        let e = expm_planar(&m.a_x, 2.0).unwrap();
        // Position responds to the tilt state through g t^2 / 2.
        assert_relative_eq!(e[(0, 3)], 9.81 * 8.0 / 6.0, epsilon = 1e-12);
        assert_relative_eq!(e[(0, 2)], 9.81 * 2.0, epsilon = 1e-12);
        assert_relative_eq!(e[(1, 3)], 9.81 * 4.0 / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn expm_rejects_non_nilpotent() {
        let a = Matrix4::identity();
        assert!(matches!(
            expm_planar(&a, 1.0),
            Err(DynamicsError::NotNilpotent { .. })
        ));
    }

    #[test]
    fn expm_matches_series_oracle_on_random_nilpotent() {
        // Strictly upper-triangular matrices are nilpotent; compare against a
        // long truncated series evaluated with scaling.
        let mut rng = 0x1234_5678_u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for _ in 0..20 {
            let mut a = Matrix4::zeros();
            for r in 0..4 {
                for c in (r + 1)..4 {
                    a[(r, c)] = next() * 3.0;
                }
            }
            let t = 1.3;
            let exact = expm_planar(&a, t).unwrap();
            // Scaling and squaring with a plain truncated series.
            let n = 1 << 10;
            let at = a * (t / n as f64);
            let mut base = Matrix4::identity();
            let mut term = Matrix4::identity();
            for k in 1..12 {
                term = term * at / k as f64;
                base += term;
            }
            let mut sq = base;
            for _ in 0..10 {
                sq = sq * sq;
            }
            assert_relative_eq!(exact, sq, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn expm_semigroup_property() {
        let m = model();
        let e1 = expm_planar(&m.a_x, 0.7).unwrap();
        let e2 = expm_planar(&m.a_x, 1.8).unwrap();
        let e12 = expm_planar(&m.a_x, 2.5).unwrap();
        assert_relative_eq!(e1 * e2, e12, epsilon = 1e-12);
    }

    #[test]
    fn zero_control_keeps_rest_state() {
        let m = model();
        let traj = simulate_linear(
            &m,
            &PlanarState::zero(),
            |_| Vector2::zeros(),
            (0.0, 1.0),
            1e-2,
        );
        for (_, s) in traj {
            assert_eq!(s.x, Vector4::zeros());
            assert_eq!(s.y, Vector4::zeros());
        }
    }

    #[test]
    fn zero_control_holds_position_offset() {
        let m = model();
        let z0 = PlanarState::at_rest(Vector2::new(1.0, -2.0));
        let traj = simulate_linear(&m, &z0, |_| Vector2::zeros(), (0.0, 2.0), 1e-2);
        let (_, last) = traj.last().unwrap();
        assert_relative_eq!(last.position().x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(last.position().y, -2.0, epsilon = 1e-12);
    }

    #[test]
    fn rk4_order_check_on_smooth_control() {
        let m = model();
        let ctrl = |t: f64| Vector2::new((0.8 * t).sin(), (0.5 * t).cos());
        let z0 = PlanarState::zero();
        let end = |dt: f64| {
            simulate_linear(&m, &z0, ctrl, (0.0, 2.0), dt)
                .last()
                .unwrap()
                .1
        };
        let e_coarse = end(4e-2);
        let e_mid = end(2e-2);
        let e_fine = end(1e-2);
        let d1 = (e_coarse.x - e_mid.x).norm() + (e_coarse.y - e_mid.y).norm();
        let d2 = (e_mid.x - e_fine.x).norm() + (e_mid.y - e_fine.y).norm();
        // Halving the step should shrink the error by about 2^4.
        assert!(d2 < d1 / 8.0, "d1 = {d1:.3e}, d2 = {d2:.3e}");
    }

    #[test]
    fn hover_is_an_equilibrium_with_zero_gyro_residual() {
        let p = QuadrotorParams::default();
        let u_hover = Vector4::new(0.0, 0.0, p.mass * p.gravity, 0.0);
        let w_sq = rotor_speeds_squared(&p, &u_hover);
        for i in 0..4 {
            assert_relative_eq!(
                w_sq[i],
                p.mass * p.gravity / (4.0 * p.thrust_factor),
                max_relative = 1e-12
            );
        }
        assert_relative_eq!(gyro_residual(&w_sq), 0.0, epsilon = 1e-12);

        let origin = FullNonlinearState::at_rest(Vector2::zeros());
        let (q_x, q_y) = planar_perturbation(&p, &origin);
        assert_eq!((q_x, q_y), (0.0, 0.0));

        let m = build_linear_model(&p).unwrap();
        let report = simulate_nonlinear_validated(
            &p,
            &m,
            |_| Vector2::zeros(),
            (0.0, 2.0),
            origin,
            NonlinearOptions::default(),
        )
        .unwrap();
        assert!(report.max_planar_deviation < 1e-12);
        let (_, last) = report.samples.last().unwrap();
        assert!(last.position.norm() < 1e-12);
        assert!(report.realizable);
    }

    #[test]
    fn perturbation_jacobian_vanishes_at_origin() {
        let p = QuadrotorParams::default();
        let eps = 1e-6;
        for i in 0..NL_DIM {
            let mut fwd = SVector::<f64, NL_DIM>::zeros();
            fwd[i] = eps;
            let mut bwd = SVector::<f64, NL_DIM>::zeros();
            bwd[i] = -eps;
            let sf = FullNonlinearState::from_vector(&fwd);
            let sb = FullNonlinearState::from_vector(&bwd);
            let (fx, fy) = planar_perturbation(&p, &sf);
            let (bx, by) = planar_perturbation(&p, &sb);
            assert!(((fx - bx) / (2.0 * eps)).abs() < 1e-6, "dq_x/dx_{i}");
            assert!(((fy - by) / (2.0 * eps)).abs() < 1e-6, "dq_y/dx_{i}");
        }
    }

    #[test]
    fn altitude_subsystem_decays_from_offset() {
        let p = QuadrotorParams::default();
        let m = build_linear_model(&p).unwrap();
        let mut init = FullNonlinearState::at_rest(Vector2::zeros());
        init.position[2] = 0.5;
        let report = simulate_nonlinear_validated(
            &p,
            &m,
            |_| Vector2::zeros(),
            (0.0, 8.0),
            init,
            NonlinearOptions::default(),
        )
        .unwrap();
        let (_, last) = report.samples.last().unwrap();
        assert!(last.position[2].abs() < 1e-3, "z = {}", last.position[2]);
    }

    #[test]
    fn aggressive_maneuver_trips_angle_bound() {
        let p = QuadrotorParams::default();
        let m = build_linear_model(&p).unwrap();
        // Large constant tilt command quickly exceeds the safety bound.
        let res = simulate_nonlinear_validated(
            &p,
            &m,
            |_| Vector2::new(50.0, 0.0),
            (0.0, 5.0),
            FullNonlinearState::at_rest(Vector2::zeros()),
            NonlinearOptions::default(),
        );
        assert!(matches!(
            res,
            Err(DynamicsError::AngleBoundExceeded { .. })
        ));
    }
}
