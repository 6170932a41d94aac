//! Minimum-energy control between two full boundary states in fixed time.
//!
//! For each planar axis the optimal transfer is closed-form: the control is
//! the impulse response of the adjoint system weighted by the inverse of the
//! finite-horizon controllability Gramian, and the transfer energy is the
//! Gramian-inverse quadratic form of the boundary residual. Because the state
//! matrices are nilpotent every Gramian entry is an exact polynomial in the
//! segment duration.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{Cholesky, Matrix4, Vector2, Vector4, U4};
use thiserror::Error;

use crate::dynamics::{expm_planar, Axis, DynamicsError, LinearPlanarModel, PlanarState};

#[derive(Debug, Error)]
pub enum MinControlError {
    #[error("segment duration {tau:.4} s is below the minimum {tau_min:.4} s")]
    DegenerateSegment { tau: f64, tau_min: f64 },
    #[error("Gramian for axis {axis:?} at tau = {tau:.4} s is ill-conditioned (cond = {condition:.3e})")]
    IllConditioned {
        axis: Axis,
        tau: f64,
        condition: f64,
    },
    #[error("time {t:.6} s outside the segment window [0, {tau:.6}]")]
    TimeOutOfWindow { t: f64, tau: f64 },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Numerical guards for segment construction.
#[derive(Debug, Clone, Copy)]
pub struct MinControlConfig {
    /// Shortest admissible segment duration (s); the Gramian degenerates as
    /// the duration shrinks.
    pub tau_min: f64,
    /// Largest admissible Gramian condition number.
    pub condition_cap: f64,
}

impl Default for MinControlConfig {
    fn default() -> Self {
        Self {
            tau_min: 0.25,
            // The spread grows like tau^6 on long horizons; this cap admits
            // flights up to roughly 150 s while still rejecting degenerate
            // short legs.
            condition_cap: 1e14,
        }
    }
}

/// Finite-horizon controllability Gramian of one planar axis together with
/// its factorization and spectral summary.
#[derive(Debug, Clone)]
pub struct Gramian {
    pub matrix: Matrix4<f64>,
    pub tau: f64,
    pub eig_min: f64,
    pub eig_max: f64,
    chol: Cholesky<f64, U4>,
}

impl Gramian {
    pub fn condition(&self) -> f64 {
        self.eig_max / self.eig_min
    }

    /// Solves `W x = rhs` using the cached factorization.
    pub fn solve(&self, rhs: &Vector4<f64>) -> Vector4<f64> {
        self.chol.solve(rhs)
    }

    /// Solves `W X = rhs` column-wise (e.g. for the explicit inverse).
    pub fn solve_matrix(&self, rhs: &Matrix4<f64>) -> Matrix4<f64> {
        self.chol.solve(rhs)
    }
}

/// Integral of the anti-causal impulse-response outer product,
/// `int_0^t exp(-A s) B B^T exp(-A^T s) ds`, expanded as the exact
/// polynomial the nilpotency of `A` permits (degree seven at most).
pub fn impulse_response_integral(a: &Matrix4<f64>, b: &Vector4<f64>, t: f64) -> Matrix4<f64> {
    let powers = [*b, a * b, a * (a * b), a * (a * (a * b))];
    let factorial = [1.0, 1.0, 2.0, 6.0];
    let mut acc = Matrix4::zeros();
    for (i, pi) in powers.iter().enumerate() {
        for (k, pk) in powers.iter().enumerate() {
            let degree = (i + k + 1) as i32;
            let sign = if (i + k) % 2 == 0 { 1.0 } else { -1.0 };
            let coeff = sign / (factorial[i] * factorial[k] * degree as f64);
            acc += pi * pk.transpose() * (coeff * t.powi(degree));
        }
    }
    acc
}

/// Closed-form Gramian `int_0^tau exp(A(tau-s)) B B^T exp(A^T(tau-s)) ds`.
pub fn gramian_closed_form(
    a: &Matrix4<f64>,
    b: &Vector4<f64>,
    tau: f64,
    axis: Axis,
    config: &MinControlConfig,
) -> Result<Gramian, MinControlError> {
    if !(tau >= config.tau_min) {
        return Err(MinControlError::DegenerateSegment {
            tau,
            tau_min: config.tau_min,
        });
    }
    let e = expm_planar(a, tau)?;
    let m = impulse_response_integral(a, b, tau);
    let w = e * m * e.transpose();
    let w = (w + w.transpose()) * 0.5;
    let eigs = w.symmetric_eigenvalues();
    let eig_min = eigs.min();
    let eig_max = eigs.max();
    let condition = eig_max / eig_min;
    if !(eig_min > 0.0) || condition > config.condition_cap {
        return Err(MinControlError::IllConditioned {
            axis,
            tau,
            condition,
        });
    }
    let chol = w
        .cholesky()
        .ok_or(MinControlError::IllConditioned {
            axis,
            tau,
            condition,
        })?;
    Ok(Gramian {
        matrix: w,
        tau,
        eig_min,
        eig_max,
        chol,
    })
}

/// Shared, thread-safe store of factored Gramians keyed by axis and duration
/// (durations quantized at a nanosecond so annealing proposals that share leg
/// durations reuse the factorization).
pub struct GramianCache {
    model: LinearPlanarModel,
    config: MinControlConfig,
    store: Mutex<HashMap<(Axis, u64), Arc<Gramian>>>,
}

impl GramianCache {
    pub fn new(model: LinearPlanarModel, config: MinControlConfig) -> Self {
        Self {
            model,
            config,
            store: Mutex::new(HashMap::new()),
        }
    }

    pub fn model(&self) -> &LinearPlanarModel {
        &self.model
    }

    pub fn config(&self) -> &MinControlConfig {
        &self.config
    }

    pub fn gramian(&self, axis: Axis, tau: f64) -> Result<Arc<Gramian>, MinControlError> {
        let key = (axis, (tau * 1e9).round() as u64);
        if let Some(hit) = self.store.lock().unwrap().get(&key) {
            return Ok(Arc::clone(hit));
        }
        let (a, b) = self.model.axis_matrices(axis);
        let gramian = Arc::new(gramian_closed_form(a, b, tau, axis, &self.config)?);
        self.store
            .lock()
            .unwrap()
            .entry(key)
            .or_insert_with(|| Arc::clone(&gramian));
        Ok(gramian)
    }
}

/// Boundary-value problem for one segment: transfer the full planar state
/// from `start` to `end` in `tau` seconds.
#[derive(Debug, Clone, Copy)]
pub struct SegmentSpec {
    pub start: PlanarState,
    pub end: PlanarState,
    pub tau: f64,
}

/// The minimum-norm control law of one segment, with everything needed to
/// evaluate the control and the closed-form state anywhere in its window.
#[derive(Debug, Clone)]
pub struct SegmentControlLaw {
    pub tau: f64,
    pub start: PlanarState,
    pub end: PlanarState,
    beta_x: Vector4<f64>,
    beta_y: Vector4<f64>,
    kernel_x: Vector4<f64>,
    kernel_y: Vector4<f64>,
    energy: f64,
    a_x: Matrix4<f64>,
    a_y: Matrix4<f64>,
    b_x: Vector4<f64>,
    b_y: Vector4<f64>,
}

/// Builds the minimum-norm law for a segment.
pub fn min_norm_segment(
    cache: &GramianCache,
    spec: &SegmentSpec,
) -> Result<SegmentControlLaw, MinControlError> {
    let model = cache.model();
    let w_x = cache.gramian(Axis::X, spec.tau)?;
    let w_y = cache.gramian(Axis::Y, spec.tau)?;
    let e_x = expm_planar(&model.a_x, spec.tau)?;
    let e_y = expm_planar(&model.a_y, spec.tau)?;
    let residual_x = spec.end.x - e_x * spec.start.x;
    let residual_y = spec.end.y - e_y * spec.start.y;
    let beta_x = w_x.solve(&residual_x);
    let beta_y = w_y.solve(&residual_y);
    let energy = residual_x.dot(&beta_x) + residual_y.dot(&beta_y);
    Ok(SegmentControlLaw {
        tau: spec.tau,
        start: spec.start,
        end: spec.end,
        beta_x,
        beta_y,
        kernel_x: e_x.transpose() * beta_x,
        kernel_y: e_y.transpose() * beta_y,
        energy,
        a_x: model.a_x,
        a_y: model.a_y,
        b_x: model.b_x,
        b_y: model.b_y,
    })
}

impl SegmentControlLaw {
    /// Transfer energy `int ||u||^2 dt`, equal to the Gramian-inverse
    /// quadratic form of the boundary residuals.
    pub fn energy(&self) -> f64 {
        self.energy
    }

    /// Control at segment-local time, `u_i(t) = B^T exp(A^T (tau - t)) beta_i`.
    /// Evaluation outside the window is clamped to the window edge.
    pub fn control_at(&self, t: f64) -> Vector2<f64> {
        let t = t.clamp(0.0, self.tau);
        let remaining = self.tau - t;
        let ex = expm_planar(&self.a_x, remaining).expect("model matrix nilpotent");
        let ey = expm_planar(&self.a_y, remaining).expect("model matrix nilpotent");
        Vector2::new(
            self.b_x.dot(&(ex.transpose() * self.beta_x)),
            self.b_y.dot(&(ey.transpose() * self.beta_y)),
        )
    }

    /// Closed-form state at segment-local time.
    pub fn state_at(&self, t: f64) -> Result<PlanarState, MinControlError> {
        if t < -1e-9 || t > self.tau + 1e-9 {
            return Err(MinControlError::TimeOutOfWindow { t, tau: self.tau });
        }
        let t = t.clamp(0.0, self.tau);
        let ex = expm_planar(&self.a_x, t).expect("model matrix nilpotent");
        let ey = expm_planar(&self.a_y, t).expect("model matrix nilpotent");
        let mx = impulse_response_integral(&self.a_x, &self.b_x, t);
        let my = impulse_response_integral(&self.a_y, &self.b_y, t);
        Ok(PlanarState {
            x: ex * (mx * self.kernel_x + self.start.x),
            y: ey * (my * self.kernel_y + self.start.y),
        })
    }
}

/// A sequence of segments laid head to tail on the global time axis.
#[derive(Debug, Clone)]
pub struct PiecewiseLaw {
    segments: Vec<SegmentControlLaw>,
    starts: Vec<f64>,
    duration: f64,
}

impl PiecewiseLaw {
    pub fn new(segments: Vec<SegmentControlLaw>) -> Self {
        assert!(!segments.is_empty(), "need at least one segment");
        let mut starts = Vec::with_capacity(segments.len());
        let mut t = 0.0;
        for seg in &segments {
            starts.push(t);
            t += seg.tau;
        }
        Self {
            segments,
            starts,
            duration: t,
        }
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn segments(&self) -> &[SegmentControlLaw] {
        &self.segments
    }

    pub fn total_energy(&self) -> f64 {
        self.segments.iter().map(|s| s.energy()).sum()
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let t = t.clamp(0.0, self.duration);
        let idx = match self
            .starts
            .binary_search_by(|s| s.partial_cmp(&t).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        let idx = idx.min(self.segments.len() - 1);
        (idx, t - self.starts[idx])
    }

    /// Control at global time (clamped to the plan window).
    pub fn control_at(&self, t: f64) -> Vector2<f64> {
        let (idx, local) = self.locate(t);
        self.segments[idx].control_at(local)
    }

    /// Closed-form state at global time (clamped to the plan window).
    pub fn state_at(&self, t: f64) -> PlanarState {
        let (idx, local) = self.locate(t);
        self.segments[idx]
            .state_at(local)
            .expect("local time within the segment window")
    }

    /// States sampled every `dt` from 0 through the full duration.
    pub fn sample_states(&self, dt: f64) -> Vec<(f64, PlanarState)> {
        assert!(dt > 0.0);
        let n = (self.duration / dt).ceil() as usize;
        let mut out = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let t = (k as f64 * dt).min(self.duration);
            out.push((t, self.state_at(t)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{build_linear_model, simulate_linear, QuadrotorParams};
    use approx::assert_relative_eq;
    use nalgebra::Vector2;

    fn cache() -> GramianCache {
        let model = build_linear_model(&QuadrotorParams::default()).unwrap();
        GramianCache::new(model, MinControlConfig::default())
    }

    /// Adaptive Simpson quadrature of the Gramian integrand, the independent
    /// oracle for the closed form.
    fn gramian_quadrature(a: &Matrix4<f64>, b: &Vector4<f64>, tau: f64) -> Matrix4<f64> {
        fn integrand(a: &Matrix4<f64>, b: &Vector4<f64>, tau: f64, s: f64) -> Matrix4<f64> {
            let e = expm_planar(a, tau - s).unwrap();
            let v = e * b;
            v * v.transpose()
        }
        fn simpson(
            a: &Matrix4<f64>,
            b: &Vector4<f64>,
            tau: f64,
            lo: f64,
            hi: f64,
            f_lo: Matrix4<f64>,
            f_hi: Matrix4<f64>,
            whole: Matrix4<f64>,
            depth: u32,
        ) -> Matrix4<f64> {
            let mid = 0.5 * (lo + hi);
            let f_mid = integrand(a, b, tau, mid);
            let f_ql = integrand(a, b, tau, 0.5 * (lo + mid));
            let f_qr = integrand(a, b, tau, 0.5 * (mid + hi));
            let left = (f_lo + f_ql * 4.0 + f_mid) * ((mid - lo) / 6.0);
            let right = (f_mid + f_qr * 4.0 + f_hi) * ((hi - mid) / 6.0);
            let refined = left + right;
            let err = (refined - whole).amax();
            if depth == 0 || err < 1e-13 * refined.amax().max(1.0) {
                refined
            } else {
                simpson(a, b, tau, lo, mid, f_lo, f_mid, left, depth - 1)
                    + simpson(a, b, tau, mid, hi, f_mid, f_hi, right, depth - 1)
            }
        }
        let f_lo = integrand(a, b, tau, 0.0);
        let f_hi = integrand(a, b, tau, tau);
        let f_mid = integrand(a, b, tau, tau / 2.0);
        let whole = (f_lo + f_mid * 4.0 + f_hi) * (tau / 6.0);
        simpson(a, b, tau, 0.0, tau, f_lo, f_hi, whole, 24)
    }

    #[test]
    fn closed_form_matches_quadrature() {
        let c = cache();
        for tau in [0.5, 1.0, 3.7, 10.0, 20.0] {
            for axis in [Axis::X, Axis::Y] {
                let (a, b) = c.model().axis_matrices(axis);
                let w = gramian_closed_form(a, b, tau, axis, c.config()).unwrap();
                let oracle = gramian_quadrature(a, b, tau);
                let rel = (w.matrix - oracle).norm() / oracle.norm();
                assert!(rel < 1e-10, "tau = {tau}, axis {axis:?}, rel = {rel:.3e}");
            }
        }
    }

    #[test]
    fn gramian_leading_term_for_pure_input_row() {
        // With A = 0 the integral collapses to B B^T t.
        let a = Matrix4::zeros();
        let b = Vector4::new(0.0, 0.0, 0.0, 2.0);
        let m = impulse_response_integral(&a, &b, 1.0);
        assert_relative_eq!(m[(3, 3)], 4.0, epsilon = 1e-12);
        assert_relative_eq!(m[(0, 0)], 0.0, epsilon = 1e-12);
        // The in-model Gramian keeps exactly that leading term in its input
        // slot because the state matrix's last row is zero.
        let c = cache();
        let (ax, bx) = c.model().axis_matrices(Axis::X);
        let w = gramian_closed_form(ax, bx, 1.0, Axis::X, c.config()).unwrap();
        assert_relative_eq!(w.matrix[(3, 3)], bx[3] * bx[3], max_relative = 1e-12);
    }

    #[test]
    fn gramian_positive_definite_over_duration_range() {
        let c = cache();
        let mut tau = 0.5;
        while tau <= 20.0 {
            let w = c.gramian(Axis::X, tau).unwrap();
            assert!(w.eig_min > 0.0, "tau = {tau}");
            let sym_err = (w.matrix - w.matrix.transpose()).amax();
            assert!(sym_err < 1e-12 * w.matrix.amax());
            tau += 1.3;
        }
    }

    #[test]
    fn degenerate_duration_rejected() {
        let c = cache();
        assert!(matches!(
            c.gramian(Axis::X, 0.1),
            Err(MinControlError::DegenerateSegment { .. })
        ));
    }

    #[test]
    fn zero_residual_gives_zero_law() {
        let c = cache();
        let state = PlanarState::at_rest(Vector2::new(3.0, -1.0));
        let law = min_norm_segment(
            &c,
            &SegmentSpec {
                start: state,
                end: state,
                tau: 2.0,
            },
        )
        .unwrap();
        assert_eq!(law.energy(), 0.0);
        for t in [0.0, 0.7, 2.0] {
            assert_eq!(law.control_at(t), Vector2::zeros());
        }
    }

    #[test]
    fn rest_to_rest_transfer_reaches_target_under_rk4() {
        let c = cache();
        let d = 5.0;
        let spec = SegmentSpec {
            start: PlanarState::at_rest(Vector2::new(0.0, 0.0)),
            end: PlanarState::at_rest(Vector2::new(d, 0.0)),
            tau: 4.0,
        };
        let law = min_norm_segment(&c, &spec).unwrap();
        let traj = simulate_linear(
            c.model(),
            &spec.start,
            |t| law.control_at(t),
            (0.0, spec.tau),
            1e-3,
        );
        let (_, last) = traj.last().unwrap();
        let err = (last.x - spec.end.x).norm() + (last.y - spec.end.y).norm();
        assert!(err < 1e-6 * d, "endpoint error {err:.3e}");
    }

    #[test]
    fn energy_scales_quadratically_with_distance() {
        let c = cache();
        let energy = |d: f64| {
            min_norm_segment(
                &c,
                &SegmentSpec {
                    start: PlanarState::at_rest(Vector2::zeros()),
                    end: PlanarState::at_rest(Vector2::new(d, 0.0)),
                    tau: 3.0,
                },
            )
            .unwrap()
            .energy()
        };
        assert_relative_eq!(energy(2.0), 4.0 * energy(1.0), max_relative = 1e-10);
    }

    #[test]
    fn energy_matches_control_quadrature() {
        let c = cache();
        let spec = SegmentSpec {
            start: PlanarState::at_rest(Vector2::new(1.0, 2.0)),
            end: PlanarState {
                x: Vector4::new(4.0, 0.5, 0.01, 0.0),
                y: Vector4::new(-2.0, -0.3, 0.0, 0.02),
            },
            tau: 5.0,
        };
        let law = min_norm_segment(&c, &spec).unwrap();
        // Composite Simpson over the squared control norm.
        let n = 20_000;
        let h = spec.tau / n as f64;
        let mut acc = 0.0;
        for k in 0..=n {
            let u = law.control_at(k as f64 * h);
            let f = u.norm_squared();
            let w = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * f;
        }
        let quad = acc * h / 3.0;
        assert_relative_eq!(quad, law.energy(), max_relative = 1e-8);
    }

    #[test]
    fn energy_invariant_under_translation() {
        let c = cache();
        let energy = |offset: f64| {
            min_norm_segment(
                &c,
                &SegmentSpec {
                    start: PlanarState::at_rest(Vector2::new(offset, 0.0)),
                    end: PlanarState::at_rest(Vector2::new(offset + 3.0, 0.0)),
                    tau: 2.0,
                },
            )
            .unwrap()
            .energy()
        };
        assert_relative_eq!(energy(0.0), energy(17.5), max_relative = 1e-9);
    }

    #[test]
    fn rayleigh_bounds_hold() {
        let c = cache();
        let spec = SegmentSpec {
            start: PlanarState::zero(),
            end: PlanarState {
                x: Vector4::new(2.0, 1.0, 0.05, -0.01),
                y: Vector4::zeros(),
            },
            tau: 3.0,
        };
        let law = min_norm_segment(&c, &spec).unwrap();
        let w = c.gramian(Axis::X, spec.tau).unwrap();
        let ratio = law.energy() / spec.end.x.norm_squared();
        assert!(ratio >= 1.0 / w.eig_max - 1e-12);
        assert!(ratio <= 1.0 / w.eig_min + 1e-12);
    }

    #[test]
    fn propagation_hits_both_boundary_states() {
        let c = cache();
        let spec = SegmentSpec {
            start: PlanarState {
                x: Vector4::new(1.0, -0.2, 0.01, 0.0),
                y: Vector4::new(0.5, 0.1, 0.0, 0.005),
            },
            end: PlanarState {
                x: Vector4::new(6.0, 0.0, 0.0, 0.0),
                y: Vector4::new(-1.0, 0.4, -0.01, 0.0),
            },
            tau: 4.0,
        };
        let law = min_norm_segment(&c, &spec).unwrap();
        let s0 = law.state_at(0.0).unwrap();
        assert_relative_eq!(s0.x, spec.start.x, epsilon = 1e-12);
        assert_relative_eq!(s0.y, spec.start.y, epsilon = 1e-12);
        let s1 = law.state_at(spec.tau).unwrap();
        assert!((s1.x - spec.end.x).norm() < 1e-9);
        assert!((s1.y - spec.end.y).norm() < 1e-9);
        assert!(matches!(
            law.state_at(spec.tau + 1.0),
            Err(MinControlError::TimeOutOfWindow { .. })
        ));
    }

    #[test]
    fn midpoint_state_matches_rk4() {
        let c = cache();
        let spec = SegmentSpec {
            start: PlanarState::at_rest(Vector2::new(0.0, 0.0)),
            end: PlanarState::at_rest(Vector2::new(4.0, -3.0)),
            tau: 5.0,
        };
        let law = min_norm_segment(&c, &spec).unwrap();
        let t_mid = 2.3;
        let traj = simulate_linear(
            c.model(),
            &spec.start,
            |t| law.control_at(t),
            (0.0, t_mid),
            1e-4,
        );
        let (_, rk4) = traj.last().unwrap();
        let closed = law.state_at(t_mid).unwrap();
        assert!((rk4.x - closed.x).norm() < 1e-7);
        assert!((rk4.y - closed.y).norm() < 1e-7);
    }

    #[test]
    fn splitting_preserves_total_energy() {
        let c = cache();
        let spec = SegmentSpec {
            start: PlanarState::at_rest(Vector2::new(0.0, 1.0)),
            end: PlanarState::at_rest(Vector2::new(7.0, -2.0)),
            tau: 6.0,
        };
        let law = min_norm_segment(&c, &spec).unwrap();
        for t_split in [1.0, 2.5, 4.8] {
            let mid = law.state_at(t_split).unwrap();
            let first = min_norm_segment(
                &c,
                &SegmentSpec {
                    start: spec.start,
                    end: mid,
                    tau: t_split,
                },
            )
            .unwrap();
            let second = min_norm_segment(
                &c,
                &SegmentSpec {
                    start: mid,
                    end: spec.end,
                    tau: spec.tau - t_split,
                },
            )
            .unwrap();
            assert_relative_eq!(
                first.energy() + second.energy(),
                law.energy(),
                max_relative = 1e-8
            );
        }
    }

    #[test]
    fn piecewise_law_concatenates_cleanly() {
        let c = cache();
        let mid = PlanarState::at_rest(Vector2::new(2.0, 2.0));
        let s0 = SegmentSpec {
            start: PlanarState::at_rest(Vector2::zeros()),
            end: mid,
            tau: 2.0,
        };
        let s1 = SegmentSpec {
            start: mid,
            end: PlanarState::at_rest(Vector2::new(5.0, 0.0)),
            tau: 3.0,
        };
        let law = PiecewiseLaw::new(vec![
            min_norm_segment(&c, &s0).unwrap(),
            min_norm_segment(&c, &s1).unwrap(),
        ]);
        assert_relative_eq!(law.duration(), 5.0);
        assert_relative_eq!(law.state_at(2.0).x, mid.x, epsilon = 1e-9);
        let end = law.state_at(5.0);
        assert_relative_eq!(end.position().x, 5.0, epsilon = 1e-9);
        let energy_sum = law.total_energy();
        assert!(energy_sum > 0.0);
        let samples = law.sample_states(0.5);
        assert_eq!(samples.len(), 11);
    }
}
