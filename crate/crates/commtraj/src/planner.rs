//! Trajectory optimizer. For each candidate region depth the planner places
//! crossing points on the quantization borders, solves the convex inner
//! problem over the free boundary states at interior waypoints, and anneals
//! over crossing angles and leg durations against the composite cost
//! (normalized energy, communications term, obstacle penalty). Sweeping the
//! depth and keeping the cheapest outcome yields the plan.

use nalgebra::{DMatrix, DVector, Matrix4, SMatrix, Vector2, Vector3, Vector4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelError, QuantizedRateMap, RateLadder};
use crate::dynamics::{Axis, PlanarState};
use crate::mincontrol::{
    min_norm_segment, GramianCache, MinControlError, PiecewiseLaw, SegmentSpec,
};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid plan problem: {0}")]
    InvalidProblem(String),
    #[error("start and goal coincide; the baseline energy is undefined")]
    DegenerateBaseline,
    #[error("flight time {t_f} s cannot fit {legs} legs of at least {tau_min} s")]
    InfeasibleDurations { t_f: f64, legs: usize, tau_min: f64 },
    #[error("inner problem is numerically singular: {0}")]
    Conditioning(String),
    #[error("no feasible depth produced a plan: {reasons:?}")]
    AllDepthsInfeasible { reasons: Vec<String> },
    #[error(transparent)]
    MinControl(#[from] MinControlError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Dynamics(#[from] crate::dynamics::DynamicsError),
}

/// Shape of the communications term in the cost.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CommsObjective {
    /// Maximize expected bits: the term is the feasible supremum divided by
    /// the expected bits.
    MaxData,
    /// Meet an average transmission quota: an exponential penalty on the
    /// shortfall below `bits`.
    Quota { bits: f64, steepness: f64 },
}

/// Circular no-fly zone with its barrier gains.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: Vector2<f64>,
    pub radius: f64,
    /// Barrier magnitude at the obstacle boundary.
    pub gain: f64,
    /// Barrier decay rate, in units of the obstacle radius.
    pub steepness: f64,
}

/// The planning instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanProblem {
    pub start: Vector2<f64>,
    pub goal: Vector2<f64>,
    /// Total flight time (s).
    pub flight_time: f64,
    /// Energy weight in [0, 1]; the communications term gets `1 - lambda`.
    pub lambda: f64,
    pub objective: CommsObjective,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
}

impl PlanProblem {
    pub fn validate(&self) -> Result<(), PlanError> {
        if !(self.lambda >= 0.0 && self.lambda <= 1.0) {
            return Err(PlanError::InvalidProblem(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.flight_time > 0.0) {
            return Err(PlanError::InvalidProblem(format!(
                "flight time must be positive, got {}",
                self.flight_time
            )));
        }
        if let CommsObjective::Quota { bits, steepness } = self.objective {
            if !(bits > 0.0 && steepness > 0.0) {
                return Err(PlanError::InvalidProblem(format!(
                    "quota mode needs positive quota and steepness, got {bits} and {steepness}"
                )));
            }
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.radius > 0.0 && o.gain > 0.0 && o.steepness > 0.0) {
                return Err(PlanError::InvalidProblem(format!(
                    "obstacle {i} needs positive radius and gains"
                )));
            }
        }
        Ok(())
    }
}

/// Annealer settings for the outer problem over crossing angles and leg
/// durations.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaConfig {
    /// Metropolis iterations per depth.
    pub iterations: usize,
    /// Random probes used to pick the chain start and the initial
    /// temperature (their interquartile cost range).
    pub probes: usize,
    /// Geometric cooling factor per iteration.
    pub cooling: f64,
    /// Proposal spread for one crossing angle (rad).
    pub sigma_angle: f64,
    /// Relative proposal spread for one duration weight.
    pub sigma_weight: f64,
    /// Master seed; each depth derives its own stream.
    pub seed: u64,
}

impl Default for SaConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            probes: 50,
            cooling: 0.995,
            sigma_angle: 0.15,
            sigma_weight: 0.10,
            seed: 0,
        }
    }
}

/// Shortest admissible leg duration (s); annealing proposals are projected
/// onto the feasible duration simplex.
pub const TAU_MIN: f64 = 0.25;

/// Cost per meter of time-averaged excursion outside a leg's assigned
/// region. Steep enough that the annealer treats excursions as infeasible
/// but graded so it can walk back into the feasible set.
const REGION_VIOLATION_WEIGHT: f64 = 100.0;

/// Crossing structure of one depth: which borders are crossed in and out,
/// and which quantization level each leg flies in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossingTemplate {
    pub depth: usize,
    /// Radius of each crossing circle, in path order.
    pub crossing_radii: Vec<f64>,
    /// Quantization level index (0 = outermost) of each leg; one more entry
    /// than crossings.
    pub leg_levels: Vec<usize>,
}

impl CrossingTemplate {
    pub fn crossings(&self) -> usize {
        self.crossing_radii.len()
    }

    pub fn legs(&self) -> usize {
        self.leg_levels.len()
    }
}

/// Builds the crossing structure for a depth, shrinking the crossing set when
/// the start or goal already sits inside some borders. Returns `None` when
/// the depth cannot be reached from the endpoint regions.
pub fn crossing_template(
    map: &QuantizedRateMap,
    start: Vector2<f64>,
    goal: Vector2<f64>,
    depth: usize,
) -> Option<CrossingTemplate> {
    let borders = map.radii.len();
    if depth > borders {
        return None;
    }
    let d_start = (start - map.ap_position).norm();
    let d_goal = (goal - map.ap_position).norm();
    let inside_start = map.radii.iter().filter(|&&r| r > d_start).count();
    let inside_goal = map.radii.iter().filter(|&&r| r > d_goal).count();
    if depth < inside_start.max(inside_goal) {
        return None;
    }
    let mut crossing_radii = Vec::new();
    let mut crossing_moves: Vec<(usize, bool)> = Vec::new(); // (border, inbound)
    for border in (inside_start + 1)..=depth {
        crossing_radii.push(map.radii[border - 1]);
        crossing_moves.push((border, true));
    }
    for border in ((inside_goal + 1)..=depth).rev() {
        crossing_radii.push(map.radii[border - 1]);
        crossing_moves.push((border, false));
    }
    let mut leg_levels = Vec::with_capacity(crossing_moves.len() + 1);
    let mut level = inside_start;
    for (border, inbound) in &crossing_moves {
        leg_levels.push(level);
        level = if *inbound { *border } else { *border - 1 };
    }
    leg_levels.push(level);
    debug_assert_eq!(level, inside_goal);
    Some(CrossingTemplate {
        depth,
        crossing_radii,
        leg_levels,
    })
}

/// Expected bits transmitted under the one-region-per-leg approximation:
/// the duty-cycled sum of each leg's duration times its region rate.
pub fn approx_bits(durations: &[f64], leg_rates: &[f64], ladder: &RateLadder) -> f64 {
    debug_assert_eq!(durations.len(), leg_rates.len());
    let duty = ladder.tx_duration / ladder.duplex_period;
    duty * durations
        .iter()
        .zip(leg_rates)
        .map(|(tau, rate)| tau * rate)
        .sum::<f64>()
}

/// Closest point to `target` on the segment from `a` to `b`.
pub fn closest_point_on_segment(
    a: Vector2<f64>,
    b: Vector2<f64>,
    target: Vector2<f64>,
) -> Vector2<f64> {
    let len_sq = (b - a).norm_squared();
    if len_sq < 1e-18 {
        return b;
    }
    let theta = ((a - b).dot(&(target - b)) / len_sq).clamp(0.0, 1.0);
    a * theta + b * (1.0 - theta)
}

/// Barrier penalty of the waypoint polyline against every obstacle: large
/// inside an obstacle, decaying once the closest approach clears its radius.
pub fn obstacle_penalty(points: &[Vector2<f64>], obstacles: &[Obstacle]) -> f64 {
    let mut acc = 0.0;
    for o in obstacles {
        for pair in points.windows(2) {
            let closest = closest_point_on_segment(pair[0], pair[1], o.center);
            let dist = (o.center - closest).norm();
            acc += o.gain * (-o.steepness * (dist - o.radius) / o.radius).exp();
        }
    }
    acc
}

/// Smallest distance from the obstacle center to the waypoint polyline.
pub fn polyline_clearance(points: &[Vector2<f64>], obstacle: &Obstacle) -> f64 {
    points
        .windows(2)
        .map(|pair| {
            let closest = closest_point_on_segment(pair[0], pair[1], obstacle.center);
            (obstacle.center - closest).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Solution of the inner convex problem for fixed waypoints and durations.
#[derive(Debug, Clone)]
pub struct AlphaSolution {
    /// Full boundary state at every waypoint (endpoint states at rest).
    pub boundary_states: Vec<PlanarState>,
    /// Minimized transfer energy summed over legs and axes.
    pub energy: f64,
}

/// JSON has no infinity; trace entries round-trip through null.
mod nullable_floats {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mapped: Vec<Option<f64>> = v
            .iter()
            .map(|x| if x.is_finite() { Some(*x) } else { None })
            .collect();
        mapped.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(v.into_iter()
            .map(|x| x.unwrap_or(f64::INFINITY))
            .collect())
    }
}

/// Per-depth annealing diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaDiagnostics {
    pub depth: usize,
    pub iterations: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    pub initial_temperature: f64,
    /// Best cost so far, sampled every 50 iterations.
    #[serde(with = "nullable_floats")]
    pub best_cost_trace: Vec<f64>,
    pub failure: Option<String>,
}

/// The optimized waypoint set of the winning depth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaypointPlan {
    pub depth: usize,
    /// Crossing angles (rad), one per crossing point.
    pub angles: Vec<f64>,
    /// Leg durations (s), summing to the flight time.
    pub durations: Vec<f64>,
    pub crossing_radii: Vec<f64>,
    pub leg_levels: Vec<usize>,
    /// Quantized rate of each leg's region (bits/s).
    pub leg_rates: Vec<f64>,
    /// Waypoints including start and goal.
    pub points: Vec<Vector2<f64>>,
    /// Optimized interior boundary parameters, one triple per interior
    /// waypoint per axis (velocity-like, tilt-like, tilt-rate-like).
    pub alphas_x: Vec<Vector3<f64>>,
    pub alphas_y: Vec<Vector3<f64>>,
    /// Full boundary state at every waypoint.
    pub boundary_states: Vec<PlanarState>,
}

/// A finished plan with its score and per-depth diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanResult {
    pub waypoints: WaypointPlan,
    pub cost: f64,
    pub energy: f64,
    pub baseline_energy: f64,
    pub energy_ratio: f64,
    pub bits_approx: f64,
    pub obstacle_penalty: f64,
    pub diagnostics: Vec<SaDiagnostics>,
}

impl PlanResult {
    /// Rebuilds the concatenated minimum-norm control law from the stored
    /// boundary states.
    pub fn build_law(&self, cache: &GramianCache) -> Result<PiecewiseLaw, PlanError> {
        build_law(
            cache,
            &self.waypoints.boundary_states,
            &self.waypoints.durations,
        )
    }
}

fn build_law(
    cache: &GramianCache,
    boundary_states: &[PlanarState],
    durations: &[f64],
) -> Result<PiecewiseLaw, PlanError> {
    let mut segments = Vec::with_capacity(durations.len());
    for (n, &tau) in durations.iter().enumerate() {
        segments.push(min_norm_segment(
            cache,
            &SegmentSpec {
                start: boundary_states[n],
                end: boundary_states[n + 1],
                tau,
            },
        )?);
    }
    Ok(PiecewiseLaw::new(segments))
}

/// Scores of one candidate during annealing.
#[derive(Debug, Clone, Copy)]
pub struct CandidateEval {
    pub cost: f64,
    pub energy: f64,
    pub bits: f64,
    pub penalty: f64,
}

/// Computes the minimum-energy baseline transfer (straight path, single
/// rest-to-rest segment) and its energy, the cost normalization constant.
pub fn met_baseline(
    cache: &GramianCache,
    start: Vector2<f64>,
    goal: Vector2<f64>,
    flight_time: f64,
) -> Result<(PiecewiseLaw, f64), PlanError> {
    if (goal - start).norm() == 0.0 {
        return Err(PlanError::DegenerateBaseline);
    }
    let law = min_norm_segment(
        cache,
        &SegmentSpec {
            start: PlanarState::at_rest(start),
            end: PlanarState::at_rest(goal),
            tau: flight_time,
        },
    )?;
    let energy = law.energy();
    Ok((PiecewiseLaw::new(vec![law]), energy))
}

/// Projects raw positive weights onto the duration simplex
/// `{tau_i >= TAU_MIN, sum = t_f}`.
fn project_durations(raw: &[f64], t_f: f64) -> Option<Vec<f64>> {
    let n = raw.len();
    if t_f < n as f64 * TAU_MIN {
        return None;
    }
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut tau: Vec<f64> = raw.iter().map(|w| w / total * t_f).collect();
    for _ in 0..n {
        let deficit: f64 = tau
            .iter()
            .filter(|&&t| t < TAU_MIN)
            .map(|&t| TAU_MIN - t)
            .sum();
        if deficit == 0.0 {
            break;
        }
        let free_sum: f64 = tau.iter().filter(|&&t| t >= TAU_MIN).sum();
        let scale = (free_sum - deficit) / free_sum;
        for t in tau.iter_mut() {
            *t = if *t < TAU_MIN { TAU_MIN } else { *t * scale };
        }
    }
    let sum: f64 = tau.iter().sum();
    let last = tau.len() - 1;
    tau[last] += t_f - sum;
    if tau[last] < TAU_MIN - 1e-9 {
        return None;
    }
    Some(tau)
}

/// The planning engine bound to one problem instance.
pub struct Planner<'a> {
    problem: &'a PlanProblem,
    cache: &'a GramianCache,
    map: &'a QuantizedRateMap,
    ladder: &'a RateLadder,
    baseline_energy: f64,
    /// Feasible supremum of the expected bits within the flight time.
    w0: f64,
}

impl<'a> Planner<'a> {
    pub fn new(
        problem: &'a PlanProblem,
        cache: &'a GramianCache,
        map: &'a QuantizedRateMap,
        ladder: &'a RateLadder,
    ) -> Result<Self, PlanError> {
        problem.validate()?;
        let (_, baseline_energy) =
            met_baseline(cache, problem.start, problem.goal, problem.flight_time)?;
        let periods = (problem.flight_time / ladder.duplex_period).floor() + 1.0;
        let w0 = ladder.tx_duration * ladder.max_rate() * periods;
        Ok(Self {
            problem,
            cache,
            map,
            ladder,
            baseline_energy,
            w0,
        })
    }

    pub fn baseline_energy(&self) -> f64 {
        self.baseline_energy
    }

    pub fn bits_normalization(&self) -> f64 {
        self.w0
    }

    /// Communications term of the cost for an expected bit count.
    fn comms_term(&self, bits: f64) -> f64 {
        match self.problem.objective {
            CommsObjective::MaxData => {
                if bits <= 0.0 {
                    f64::INFINITY
                } else {
                    self.w0 / bits
                }
            }
            CommsObjective::Quota { bits: quota, steepness } => (steepness * (quota - bits)).exp(),
        }
    }

    /// Waypoint positions of a candidate (start, crossings, goal).
    pub fn candidate_points(
        &self,
        template: &CrossingTemplate,
        angles: &[f64],
    ) -> Vec<Vector2<f64>> {
        let mut points = Vec::with_capacity(angles.len() + 2);
        points.push(self.problem.start);
        for (angle, radius) in angles.iter().zip(&template.crossing_radii) {
            points
                .push(self.map.ap_position + Vector2::new(radius * angle.cos(), radius * angle.sin()));
        }
        points.push(self.problem.goal);
        points
    }

    /// Solves the convex inner problem: minimum total transfer energy over
    /// the free boundary parameters at interior waypoints, endpoints pinned
    /// at rest. The stationarity system is block tridiagonal because each
    /// leg couples only adjacent waypoints.
    pub fn solve_alpha(
        &self,
        points: &[Vector2<f64>],
        durations: &[f64],
    ) -> Result<AlphaSolution, PlanError> {
        debug_assert_eq!(points.len(), durations.len() + 1);
        let n_pts = points.len();
        let n_int = n_pts - 2;
        let model = self.cache.model();

        let mut boundary_states: Vec<PlanarState> =
            points.iter().map(|p| PlanarState::at_rest(*p)).collect();

        for axis in [Axis::X, Axis::Y] {
            let (a, _) = model.axis_matrices(axis);
            let positions: Vec<f64> = points
                .iter()
                .map(|p| match axis {
                    Axis::X => p.x,
                    Axis::Y => p.y,
                })
                .collect();

            let mut exps = Vec::with_capacity(durations.len());
            let mut invs = Vec::with_capacity(durations.len());
            for &tau in durations {
                let w = self.cache.gramian(axis, tau)?;
                invs.push(w.solve_matrix(&Matrix4::identity()));
                exps.push(crate::dynamics::expm_planar(a, tau)?);
            }

            // Selector embedding the three free parameters into the state.
            let sel = SMatrix::<f64, 4, 3>::new(
                0.0, 0.0, 0.0, //
                1.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0,
            );
            let e1 = Vector4::new(1.0, 0.0, 0.0, 0.0);

            if n_int > 0 {
                let dim = 3 * n_int;
                let mut h = DMatrix::<f64>::zeros(dim, dim);
                let mut f = DVector::<f64>::zeros(dim);
                for seg in 0..durations.len() {
                    let g = &invs[seg];
                    let e = &exps[seg];
                    let konst = e1 * positions[seg + 1] - e * (e1 * positions[seg]);
                    let left_free = seg >= 1; // alpha at waypoint `seg`
                    let right_free = seg + 1 <= n_int; // alpha at waypoint `seg + 1`
                    if right_free {
                        let idx = 3 * seg;
                        let block = sel.transpose() * g * sel;
                        let rhs = sel.transpose() * (g * konst);
                        for r in 0..3 {
                            for c in 0..3 {
                                h[(idx + r, idx + c)] += block[(r, c)];
                            }
                            f[idx + r] += rhs[r];
                        }
                    }
                    if left_free {
                        let idx = 3 * (seg - 1);
                        let block = sel.transpose() * (e.transpose() * g * e) * sel;
                        let rhs = sel.transpose() * (e.transpose() * (g * konst));
                        for r in 0..3 {
                            for c in 0..3 {
                                h[(idx + r, idx + c)] += block[(r, c)];
                            }
                            f[idx + r] -= rhs[r];
                        }
                    }
                    if left_free && right_free {
                        let idx_l = 3 * (seg - 1);
                        let idx_r = 3 * seg;
                        let cross = sel.transpose() * (g * e) * sel;
                        for r in 0..3 {
                            for c in 0..3 {
                                h[(idx_r + r, idx_l + c)] -= cross[(r, c)];
                                h[(idx_l + c, idx_r + r)] -= cross[(r, c)];
                            }
                        }
                    }
                }
                let chol = h.cholesky().ok_or_else(|| {
                    PlanError::Conditioning(format!(
                        "normal matrix for axis {axis:?} is not positive definite"
                    ))
                })?;
                let solution = chol.solve(&(-f));
                for i in 0..n_int {
                    let state = match axis {
                        Axis::X => &mut boundary_states[i + 1].x,
                        Axis::Y => &mut boundary_states[i + 1].y,
                    };
                    state[1] = solution[3 * i];
                    state[2] = solution[3 * i + 1];
                    state[3] = solution[3 * i + 2];
                }
            }
        }

        // Achieved energy from the realized residuals.
        let mut energy = 0.0;
        for axis in [Axis::X, Axis::Y] {
            let (a, _) = self.cache.model().axis_matrices(axis);
            for (seg, &tau) in durations.iter().enumerate() {
                let w = self.cache.gramian(axis, tau)?;
                let e = crate::dynamics::expm_planar(a, tau)?;
                let residual =
                    boundary_states[seg + 1].axis(axis) - e * boundary_states[seg].axis(axis);
                energy += residual.dot(&w.solve(&residual));
            }
        }
        Ok(AlphaSolution {
            boundary_states,
            energy,
        })
    }

    /// Measures how far the realized trajectory strays from the one-region
    /// -per-leg assumption: the time-averaged radial excursion (m) of each
    /// leg outside the annulus of its assigned level. Samples within one
    /// duplexing period of a crossing are exempt (the bit-count
    /// approximation already concedes one period per border crossing).
    /// `None` means the legs could not be evaluated at all.
    pub fn region_violation(
        &self,
        template: &CrossingTemplate,
        boundary_states: &[PlanarState],
        durations: &[f64],
    ) -> Option<f64> {
        let radii = &self.map.radii;
        let slack = self.ladder.duplex_period;
        let t_f: f64 = durations.iter().sum();
        let mut acc = 0.0;
        for (leg, &tau) in durations.iter().enumerate() {
            let level = template.leg_levels[leg];
            let inner = if level < radii.len() {
                Some(radii[level])
            } else {
                None
            };
            let outer = if level > 0 { Some(radii[level - 1]) } else { None };
            if inner.is_none() && outer.is_none() {
                continue;
            }
            let law = min_norm_segment(
                self.cache,
                &SegmentSpec {
                    start: boundary_states[leg],
                    end: boundary_states[leg + 1],
                    tau,
                },
            )
            .ok()?;
            let steps = (tau / self.ladder.duplex_period).ceil().max(2.0) as usize;
            let dt = tau / steps as f64;
            for k in 0..=steps {
                let t = k as f64 * dt;
                if t < slack || t > tau - slack {
                    continue;
                }
                let state = law.state_at(t).ok()?;
                let d = (state.position() - self.map.ap_position).norm();
                let mut excursion = 0.0;
                if let Some(inner) = inner {
                    excursion += (inner - d).max(0.0);
                }
                if let Some(outer) = outer {
                    excursion += (d - outer).max(0.0);
                }
                acc += excursion * dt;
            }
        }
        Some(acc / t_f)
    }

    /// Full cost of one candidate; numerical failures and broken region
    /// assumptions surface as infinite cost so the annealer rejects the
    /// proposal.
    pub fn evaluate_candidate(
        &self,
        template: &CrossingTemplate,
        angles: &[f64],
        durations: &[f64],
    ) -> CandidateEval {
        let points = self.candidate_points(template, angles);
        let leg_rates: Vec<f64> = template
            .leg_levels
            .iter()
            .map(|&l| self.map.levels[l])
            .collect();
        let bits = approx_bits(durations, &leg_rates, self.ladder);
        let penalty = obstacle_penalty(&points, &self.problem.obstacles);
        match self.solve_alpha(&points, durations) {
            Ok(sol) => {
                let violation =
                    match self.region_violation(template, &sol.boundary_states, durations) {
                        Some(v) => v,
                        None => {
                            return CandidateEval {
                                cost: f64::INFINITY,
                                energy: sol.energy,
                                bits,
                                penalty,
                            }
                        }
                    };
                let lambda = self.problem.lambda;
                let mut cost = penalty + REGION_VIOLATION_WEIGHT * violation;
                if lambda > 0.0 {
                    cost += lambda * sol.energy / self.baseline_energy;
                }
                if lambda < 1.0 {
                    cost += (1.0 - lambda) * self.comms_term(bits);
                }
                CandidateEval {
                    cost,
                    energy: sol.energy,
                    bits,
                    penalty,
                }
            }
            Err(_) => CandidateEval {
                cost: f64::INFINITY,
                energy: f64::INFINITY,
                bits,
                penalty,
            },
        }
    }

    /// Anneals crossing angles and duration weights for one depth. Always
    /// returns the best candidate found; the diagnostics carry a failure
    /// note when none was finite.
    pub fn anneal(
        &self,
        template: &CrossingTemplate,
        sa: &SaConfig,
    ) -> Result<(WaypointPlan, CandidateEval, SaDiagnostics), PlanError> {
        let n_cross = template.crossings();
        let n_legs = template.legs();
        let t_f = self.problem.flight_time;
        if t_f < n_legs as f64 * TAU_MIN {
            return Err(PlanError::InfeasibleDurations {
                t_f,
                legs: n_legs,
                tau_min: TAU_MIN,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sa.seed);
        rng.set_stream(template.depth as u64 + 1);

        if n_cross == 0 {
            // Single leg; nothing to anneal.
            let durations = vec![t_f];
            let eval = self.evaluate_candidate(template, &[], &durations);
            let plan = self.assemble(template, &[], &durations)?;
            let diag = SaDiagnostics {
                depth: template.depth,
                iterations: 0,
                accepted: 0,
                acceptance_rate: 0.0,
                initial_temperature: 0.0,
                best_cost_trace: vec![eval.cost],
                failure: if eval.cost.is_finite() {
                    None
                } else {
                    Some("single-leg candidate has infinite cost".into())
                },
            };
            return Ok((plan, eval, diag));
        }

        // Heuristic start: angles fanned between the endpoint azimuths.
        let azimuth = |p: Vector2<f64>| {
            let rel = p - self.map.ap_position;
            rel.y.atan2(rel.x)
        };
        let az_s = azimuth(self.problem.start);
        let az_g = azimuth(self.problem.goal);
        let mut sweep = az_g - az_s;
        if sweep > std::f64::consts::PI {
            sweep -= 2.0 * std::f64::consts::PI;
        }
        if sweep < -std::f64::consts::PI {
            sweep += 2.0 * std::f64::consts::PI;
        }
        // Deterministic probes: azimuth fans of several widths, with either
        // uniform durations or most of the flight parked in the highest-rate
        // leg (the winning shape when communications dominate).
        let top_level = *template.leg_levels.iter().max().unwrap();
        let parked_weights: Vec<f64> = template
            .leg_levels
            .iter()
            .map(|&l| if l == top_level { 8.0 } else { 1.0 })
            .collect();
        let mid = az_s + 0.5 * sweep;
        let fan = |width: f64| -> Vec<f64> {
            (0..n_cross)
                .map(|i| {
                    let frac = (i + 1) as f64 / (n_cross + 1) as f64 - 0.5;
                    (mid + width * sweep * frac).rem_euclid(std::f64::consts::TAU)
                })
                .collect()
        };
        let mut seeds: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for width in [1.0, 0.55, 0.3, 0.15] {
            seeds.push((fan(width), vec![1.0; n_legs]));
            seeds.push((fan(width), parked_weights.clone()));
        }
        // Radial dive: inbound crossings bunched near the start azimuth,
        // outbound bunched near the goal azimuth.
        let dive: Vec<f64> = (0..n_cross)
            .map(|i| {
                let inbound = template.leg_levels[i] < template.leg_levels[i + 1];
                let a = if inbound {
                    az_s + 0.15 * sweep
                } else {
                    az_g - 0.15 * sweep
                };
                a.rem_euclid(std::f64::consts::TAU)
            })
            .collect();
        seeds.push((dive.clone(), vec![1.0; n_legs]));
        seeds.push((dive, parked_weights.clone()));

        // Probe class: balanced durations vs parked in the top-rate leg.
        // The two shapes are separate cost basins, so one chain starts in
        // each.
        let mut probes: Vec<(Vec<f64>, Vec<f64>, f64, bool)> =
            Vec::with_capacity(sa.probes + 7);
        for p in 0..(seeds.len() + sa.probes.max(1)) {
            let (angles, weights, parked) = if p < seeds.len() {
                let (a, w) = seeds[p].clone();
                (a, w, p % 2 == 1)
            } else {
                let angles: Vec<f64> = (0..n_cross)
                    .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
                    .collect();
                let weights: Vec<f64> = (0..n_legs).map(|_| rng.gen_range(0.5..1.5)).collect();
                (angles, weights, false)
            };
            let durations = match project_durations(&weights, t_f) {
                Some(d) => d,
                None => continue,
            };
            let eval = self.evaluate_candidate(template, &angles, &durations);
            probes.push((angles, weights, eval.cost, parked));
        }
        let mut finite_costs: Vec<f64> =
            probes.iter().map(|p| p.2).filter(|c| c.is_finite()).collect();
        finite_costs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let temp0 = if finite_costs.len() >= 4 {
            let q1 = finite_costs[finite_costs.len() / 4];
            let q3 = finite_costs[3 * finite_costs.len() / 4];
            (q3 - q1).max(1e-6)
        } else {
            1.0
        };

        // One chain from the best probe of each class; the iteration budget
        // grows with the search dimension and is split between them.
        let best_of = |parked: bool| -> Option<usize> {
            (0..probes.len())
                .filter(|&i| probes[i].3 == parked)
                .min_by(|&a, &b| probes[a].2.partial_cmp(&probes[b].2).unwrap())
        };
        let mut starts = Vec::new();
        if let Some(i) = best_of(false) {
            starts.push(i);
        }
        if let Some(i) = best_of(true) {
            starts.push(i);
        }
        let order: Vec<usize> = {
            let mut o: Vec<usize> = (0..probes.len()).collect();
            o.sort_by(|&a, &b| probes[a].2.partial_cmp(&probes[b].2).unwrap());
            o
        };
        if starts.is_empty() {
            starts.push(order[0]);
        }
        let iterations = sa.iterations * (1 + n_cross);
        let per_chain = iterations / starts.len();
        let refine_after = per_chain - per_chain / 4;
        let angle_step = Normal::new(0.0, sa.sigma_angle).expect("positive spread");
        let weight_step = Normal::new(0.0, sa.sigma_weight).expect("positive spread");

        let mut best_angles = probes[order[0]].0.clone();
        let mut best_weights = probes[order[0]].1.clone();
        let mut best_cost = probes[order[0]].2;
        let mut accepted = 0usize;
        let mut trace = Vec::with_capacity(iterations / 50 + 4);
        for &start in &starts {
            let mut cur_angles = probes[start].0.clone();
            let mut cur_weights = probes[start].1.clone();
            let mut cur_cost = probes[start].2;
            let mut chain_best_angles = cur_angles.clone();
            let mut chain_best_weights = cur_weights.clone();
            let mut chain_best = cur_cost;
            let mut temp = temp0;
            for it in 0..per_chain {
                let scale = if it >= refine_after { 0.2 } else { 1.0 };
                let mut cand_angles = cur_angles.clone();
                let mut cand_weights = cur_weights.clone();
                // Mostly single-coordinate moves, plus occasional group moves
                // that rotate or stretch the whole crossing pattern (single
                // -angle steps stall on the ridges the region term creates).
                let kind = rng.gen_range(0..10u32);
                match kind {
                    0..=6 => {
                        let coord = rng.gen_range(0..n_cross + n_legs);
                        if coord < n_cross {
                            let step: f64 = angle_step.sample(&mut rng) * scale;
                            cand_angles[coord] =
                                (cand_angles[coord] + step).rem_euclid(std::f64::consts::TAU);
                        } else {
                            let idx = coord - n_cross;
                            let step: f64 = weight_step.sample(&mut rng) * scale;
                            cand_weights[idx] =
                                (cand_weights[idx] * (1.0 + step)).clamp(1e-3, 1e3);
                        }
                    }
                    7..=8 => {
                        let step: f64 = angle_step.sample(&mut rng) * scale;
                        for a in cand_angles.iter_mut() {
                            *a = (*a + step).rem_euclid(std::f64::consts::TAU);
                        }
                    }
                    _ => {
                        // Stretch the pattern about its circular mean.
                        let (s_sum, c_sum) = cand_angles
                            .iter()
                            .fold((0.0, 0.0), |acc, a| (acc.0 + a.sin(), acc.1 + a.cos()));
                        let mean = s_sum.atan2(c_sum);
                        let factor = (weight_step.sample(&mut rng) * 2.0 * scale).exp();
                        for a in cand_angles.iter_mut() {
                            let mut rel = *a - mean;
                            while rel > std::f64::consts::PI {
                                rel -= std::f64::consts::TAU;
                            }
                            while rel < -std::f64::consts::PI {
                                rel += std::f64::consts::TAU;
                            }
                            *a = (mean + rel * factor).rem_euclid(std::f64::consts::TAU);
                        }
                    }
                }
                let durations = match project_durations(&cand_weights, t_f) {
                    Some(d) => d,
                    None => continue,
                };
                let eval = self.evaluate_candidate(template, &cand_angles, &durations);
                let delta = eval.cost - cur_cost;
                let accept = delta <= 0.0
                    || (cur_cost.is_infinite() && eval.cost.is_finite())
                    || rng.gen_range(0.0..1.0f64) < (-delta / temp).exp();
                if accept {
                    cur_angles = cand_angles;
                    cur_weights = cand_weights;
                    cur_cost = eval.cost;
                    accepted += 1;
                    if cur_cost < chain_best {
                        chain_best = cur_cost;
                        chain_best_angles = cur_angles.clone();
                        chain_best_weights = cur_weights.clone();
                    }
                }
                temp *= sa.cooling;
                if it % 50 == 0 {
                    trace.push(chain_best.min(best_cost));
                }
            }
            // Deterministic cyclic coordinate polish of the chain incumbent.
            if chain_best.is_finite() {
                self.polish_candidate(
                    template,
                    &mut chain_best_angles,
                    &mut chain_best_weights,
                    &mut chain_best,
                );
            }
            if chain_best < best_cost {
                best_cost = chain_best;
                best_angles = chain_best_angles;
                best_weights = chain_best_weights;
            }
            trace.push(best_cost);
        }

        let durations =
            project_durations(&best_weights, t_f).ok_or(PlanError::InfeasibleDurations {
                t_f,
                legs: n_legs,
                tau_min: TAU_MIN,
            })?;
        let eval = self.evaluate_candidate(template, &best_angles, &durations);
        let plan = self.assemble(template, &best_angles, &durations)?;
        let diag = SaDiagnostics {
            depth: template.depth,
            iterations,
            accepted,
            acceptance_rate: accepted as f64 / iterations.max(1) as f64,
            initial_temperature: temp0,
            best_cost_trace: trace,
            failure: if eval.cost.is_finite() {
                None
            } else {
                Some("no finite-cost candidate found".into())
            },
        };
        Ok((plan, eval, diag))
    }

    /// Golden-section line search over each angle and weight in turn,
    /// repeated until a sweep stops improving.
    fn polish_candidate(
        &self,
        template: &CrossingTemplate,
        angles: &mut Vec<f64>,
        weights: &mut Vec<f64>,
        best_cost: &mut f64,
    ) {
        let t_f = self.problem.flight_time;
        let n_cross = angles.len();
        let n_legs = weights.len();
        let golden = 0.5 * (5f64.sqrt() - 1.0);
        let cost_of = |angles: &[f64], weights: &[f64]| -> f64 {
            match project_durations(weights, t_f) {
                Some(d) => self.evaluate_candidate(template, angles, &d).cost,
                None => f64::INFINITY,
            }
        };
        for _sweep in 0..4 {
            let before = *best_cost;
            for coord in 0..n_cross + n_legs {
                let (mut lo, mut hi, is_angle, idx) = if coord < n_cross {
                    (angles[coord] - 0.5, angles[coord] + 0.5, true, coord)
                } else {
                    let idx = coord - n_cross;
                    (
                        (weights[idx] * 0.4).max(1e-3).ln(),
                        (weights[idx] * 2.5).min(1e3).ln(),
                        false,
                        idx,
                    )
                };
                let eval_at = |v: f64, angles: &[f64], weights: &[f64]| -> f64 {
                    let mut a = angles.to_vec();
                    let mut w = weights.to_vec();
                    if is_angle {
                        a[idx] = v.rem_euclid(std::f64::consts::TAU);
                    } else {
                        w[idx] = v.exp();
                    }
                    cost_of(&a, &w)
                };
                let mut m1 = hi - golden * (hi - lo);
                let mut m2 = lo + golden * (hi - lo);
                let mut f1 = eval_at(m1, angles, weights);
                let mut f2 = eval_at(m2, angles, weights);
                for _ in 0..24 {
                    if f1 < f2 {
                        hi = m2;
                        m2 = m1;
                        f2 = f1;
                        m1 = hi - golden * (hi - lo);
                        f1 = eval_at(m1, angles, weights);
                    } else {
                        lo = m1;
                        m1 = m2;
                        f1 = f2;
                        m2 = lo + golden * (hi - lo);
                        f2 = eval_at(m2, angles, weights);
                    }
                }
                let v = 0.5 * (lo + hi);
                let f = eval_at(v, angles, weights);
                if f < *best_cost {
                    if is_angle {
                        angles[idx] = v.rem_euclid(std::f64::consts::TAU);
                    } else {
                        weights[idx] = v.exp();
                    }
                    *best_cost = f;
                }
            }
            if before - *best_cost < 1e-10 * (1.0 + best_cost.abs()) {
                break;
            }
        }
    }

    /// Builds the full waypoint plan (with solved boundary states) for a
    /// candidate.
    fn assemble(
        &self,
        template: &CrossingTemplate,
        angles: &[f64],
        durations: &[f64],
    ) -> Result<WaypointPlan, PlanError> {
        let points = self.candidate_points(template, angles);
        let sol = self.solve_alpha(&points, durations)?;
        let leg_rates: Vec<f64> = template
            .leg_levels
            .iter()
            .map(|&l| self.map.levels[l])
            .collect();
        let n_int = points.len() - 2;
        let alphas_x: Vec<Vector3<f64>> = (0..n_int)
            .map(|i| {
                let s = &sol.boundary_states[i + 1].x;
                Vector3::new(s[1], s[2], s[3])
            })
            .collect();
        let alphas_y: Vec<Vector3<f64>> = (0..n_int)
            .map(|i| {
                let s = &sol.boundary_states[i + 1].y;
                Vector3::new(s[1], s[2], s[3])
            })
            .collect();
        Ok(WaypointPlan {
            depth: template.depth,
            angles: angles.to_vec(),
            durations: durations.to_vec(),
            crossing_radii: template.crossing_radii.clone(),
            leg_levels: template.leg_levels.clone(),
            leg_rates,
            points,
            alphas_x,
            alphas_y,
            boundary_states: sol.boundary_states,
        })
    }

    /// Sweeps all reachable depths, annealing each independently (in
    /// parallel, each on its own random stream), and returns the cheapest
    /// outcome; exact ties prefer the shallower plan.
    pub fn plan(&self, sa: &SaConfig) -> Result<PlanResult, PlanError> {
        let borders = self.map.radii.len();
        let templates: Vec<CrossingTemplate> = (0..=borders)
            .filter_map(|depth| {
                crossing_template(self.map, self.problem.start, self.problem.goal, depth)
            })
            .collect();
        if templates.is_empty() {
            return Err(PlanError::AllDepthsInfeasible {
                reasons: vec!["no depth is reachable from the endpoint regions".into()],
            });
        }
        let outcomes: Vec<Result<(WaypointPlan, CandidateEval, SaDiagnostics), PlanError>> =
            templates
                .par_iter()
                .map(|template| self.anneal(template, sa))
                .collect();

        let mut diagnostics = Vec::with_capacity(outcomes.len());
        let mut best: Option<(WaypointPlan, CandidateEval)> = None;
        let mut reasons = Vec::new();
        for (template, outcome) in templates.iter().zip(outcomes) {
            match outcome {
                Ok((plan, eval, diag)) => {
                    diagnostics.push(diag);
                    if !eval.cost.is_finite() {
                        reasons.push(format!("depth {}: no finite-cost candidate", template.depth));
                        continue;
                    }
                    let better = match &best {
                        None => true,
                        Some((_, cur)) => eval.cost < cur.cost,
                    };
                    if better {
                        best = Some((plan, eval));
                    }
                }
                Err(e) => {
                    reasons.push(format!("depth {}: {e}", template.depth));
                    diagnostics.push(SaDiagnostics {
                        depth: template.depth,
                        iterations: 0,
                        accepted: 0,
                        acceptance_rate: 0.0,
                        initial_temperature: 0.0,
                        best_cost_trace: Vec::new(),
                        failure: Some(e.to_string()),
                    });
                }
            }
        }
        let (waypoints, eval) = best.ok_or(PlanError::AllDepthsInfeasible { reasons })?;
        let energy_ratio = eval.energy / self.baseline_energy;
        assert!(
            energy_ratio >= 1.0 - 1e-9,
            "plan energy {} fell below the unconstrained minimum {}",
            eval.energy,
            self.baseline_energy
        );
        Ok(PlanResult {
            waypoints,
            cost: eval.cost,
            energy: eval.energy,
            baseline_energy: self.baseline_energy,
            energy_ratio,
            bits_approx: eval.bits,
            obstacle_penalty: eval.penalty,
            diagnostics,
        })
    }
}
