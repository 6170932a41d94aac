//! Monte-Carlo execution of a finished plan against stochastic shadowing:
//! samples the closed-form trajectory once per duplexing period, draws
//! independent dB-domain shadowing per sample and trial, applies the true
//! rate ladder, and reports measured bits next to the planner's
//! approximation and the minimum-energy baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelParams, RateLadder};
use crate::mincontrol::{GramianCache, PiecewiseLaw};
use crate::planner::{met_baseline, PlanError, PlanProblem, PlanResult, Planner, SaConfig};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("plan lasts {plan:.3} s but the baseline lasts {met:.3} s")]
    MismatchedDuration { plan: f64, met: f64 },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

/// Monte-Carlo settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_trials: usize,
    pub seed: u64,
    /// Sampling step for exported trajectory series (s).
    pub dt_sample: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_trials: 10_000,
            seed: 0,
            dt_sample: 1.0,
        }
    }
}

/// Measured outcome of a plan against the minimum-energy baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub energy_plan: f64,
    pub energy_met: f64,
    pub energy_ratio: f64,
    /// Measured plan bits over measured baseline bits.
    pub transmission_ratio: f64,
    pub bits_approx: f64,
    pub bits_measured: f64,
    pub bits_stderr: f64,
    pub bits_met_measured: f64,
    /// Reports normalize bit counts by this factor (symbol rate times the
    /// transmit duty cycle).
    pub norm_factor: f64,
    pub n_trials: usize,
}

impl SimReport {
    pub fn bits_approx_norm(&self) -> f64 {
        self.bits_approx / self.norm_factor
    }

    pub fn bits_measured_norm(&self) -> f64 {
        self.bits_measured / self.norm_factor
    }

    pub fn bits_stderr_norm(&self) -> f64 {
        self.bits_stderr / self.norm_factor
    }
}

/// Trial batch size; batches are the unit of parallel work so the draw
/// streams (one per trial) and the summation order stay fixed regardless of
/// worker count.
const TRIAL_BATCH: usize = 256;

/// Mean and standard error of the bits transmitted over the duplexing
/// samples of a trajectory, across seeded shadowing trials.
fn measure_bits(
    law: &PiecewiseLaw,
    params: &ChannelParams,
    ladder: &RateLadder,
    n_trials: usize,
    seed: u64,
    stream_base: u64,
) -> (f64, f64) {
    let t_f = law.duration();
    let periods = (t_f / ladder.duplex_period).floor() as usize;
    let mean_db: Vec<f64> = (0..=periods)
        .map(|k| {
            let p = law.state_at(k as f64 * ladder.duplex_period).position();
            let d = params.distance_to_ap(p).max(params.min_standoff);
            params.mean_snr_db(d)
        })
        .collect();
    // Threshold comparison happens in dB; the zero rung always matches.
    let rungs: Vec<(f64, f64)> = ladder
        .rates
        .iter()
        .zip(&ladder.thresholds)
        .skip(1)
        .map(|(&r, &g)| (10.0 * g.log10(), r))
        .collect();
    let sigma = params.shadow_var_db.sqrt();

    if sigma == 0.0 {
        let bits: f64 = mean_db
            .iter()
            .map(|&db| {
                let mut rate = 0.0;
                for &(thr, r) in &rungs {
                    if db >= thr {
                        rate = r;
                    }
                }
                ladder.tx_duration * rate
            })
            .sum();
        return (bits, 0.0);
    }

    let shadow = Normal::new(0.0, sigma).expect("positive sigma");
    let n_batches = n_trials.div_ceil(TRIAL_BATCH);
    let partials: Vec<(f64, f64)> = (0..n_batches)
        .into_par_iter()
        .map(|batch| {
            let lo = batch * TRIAL_BATCH;
            let hi = ((batch + 1) * TRIAL_BATCH).min(n_trials);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for trial in lo..hi {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream_base + trial as u64);
                let mut bits = 0.0;
                for &db in &mean_db {
                    let snr_db = db + shadow.sample(&mut rng);
                    let mut rate = 0.0;
                    for &(thr, r) in &rungs {
                        if snr_db >= thr {
                            rate = r;
                        }
                    }
                    bits += ladder.tx_duration * rate;
                }
                sum += bits;
                sum_sq += bits * bits;
            }
            (sum, sum_sq)
        })
        .collect();
    let (sum, sum_sq) = partials
        .iter()
        .fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let mean = sum / n_trials as f64;
    let var = (sum_sq / n_trials as f64 - mean * mean).max(0.0);
    let stderr = (var / n_trials as f64).sqrt();
    (mean, stderr)
}

/// Stream offset for trial draws. The plan and the baseline share streams
/// (common random numbers), so identical trajectories measure identical bits
/// and the transmission ratio loses the shadowing noise common to both.
const SHADOW_STREAM: u64 = 1 << 32;

/// Simulates a plan and the baseline under the same config and reports the
/// measured ratios.
pub fn run_sim(
    plan: &PlanResult,
    met_law: &PiecewiseLaw,
    cache: &GramianCache,
    params: &ChannelParams,
    ladder: &RateLadder,
    cfg: &SimConfig,
) -> Result<SimReport, SimError> {
    if cfg.n_trials == 0 {
        return Err(SimError::InvalidConfig("need at least one trial".into()));
    }
    let plan_law = plan.build_law(cache)?;
    if (plan_law.duration() - met_law.duration()).abs() > 1e-9 {
        return Err(SimError::MismatchedDuration {
            plan: plan_law.duration(),
            met: met_law.duration(),
        });
    }
    let (bits_measured, bits_stderr) = measure_bits(
        &plan_law,
        params,
        ladder,
        cfg.n_trials,
        cfg.seed,
        SHADOW_STREAM,
    );
    let (bits_met, _) =
        measure_bits(met_law, params, ladder, cfg.n_trials, cfg.seed, SHADOW_STREAM);
    let energy_met = met_law.total_energy();
    Ok(SimReport {
        energy_plan: plan.energy,
        energy_met,
        energy_ratio: plan.energy / energy_met,
        transmission_ratio: if bits_met > 0.0 {
            bits_measured / bits_met
        } else if bits_measured == bits_met {
            1.0
        } else {
            f64::INFINITY
        },
        bits_approx: plan.bits_approx,
        bits_measured,
        bits_stderr,
        bits_met_measured: bits_met,
        norm_factor: ladder.symbol_rate * ladder.tx_duration / ladder.duplex_period,
        n_trials: cfg.n_trials,
    })
}

/// Speed series of a control law, sampled every `dt`.
pub fn speed_profile(law: &PiecewiseLaw, dt: f64) -> Vec<(f64, f64)> {
    law.sample_states(dt)
        .into_iter()
        .map(|(t, s)| (t, s.velocity().norm()))
        .collect()
}

/// Counts local maxima of a series with at least the given prominence:
/// each counted peak rises that far above the highest valley separating it
/// from any higher point.
pub fn count_local_maxima(series: &[f64], min_prominence: f64) -> usize {
    let n = series.len();
    if n < 3 {
        return 0;
    }
    let mut count = 0;
    for i in 1..n - 1 {
        // Plateau-aware peak test: strictly higher than the nearest
        // differing neighbors.
        let mut l = i;
        while l > 0 && series[l - 1] == series[i] {
            l -= 1;
        }
        let mut r = i;
        while r + 1 < n && series[r + 1] == series[i] {
            r += 1;
        }
        if l == 0 || r == n - 1 {
            continue;
        }
        if series[l - 1] >= series[i] || series[r + 1] >= series[i] {
            continue;
        }
        if i != (l + r) / 2 {
            continue; // count each plateau once, at its middle
        }
        // Prominence: walk out to the nearest higher ground on both sides.
        let peak = series[i];
        let mut left_min = peak;
        let mut j = i;
        loop {
            if j == 0 {
                break;
            }
            j -= 1;
            left_min = left_min.min(series[j]);
            if series[j] > peak {
                break;
            }
        }
        let mut right_min = peak;
        let mut j = i;
        loop {
            if j == n - 1 {
                break;
            }
            j += 1;
            right_min = right_min.min(series[j]);
            if series[j] > peak {
                break;
            }
        }
        if peak - left_min.max(right_min) >= min_prominence {
            count += 1;
        }
    }
    count
}

/// One row of the trade-off table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub energy_ratio: f64,
    pub transmission_ratio: f64,
    pub bits_approx_norm: f64,
    pub bits_measured_norm: f64,
    pub bits_stderr_norm: f64,
    pub error: Option<String>,
}

/// Outcome of a full trade-off sweep: the rows plus every per-lambda plan
/// that succeeded.
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub plans: Vec<(f64, PlanResult, SimReport)>,
}

/// Plans and simulates each weight in turn against a shared baseline.
/// Per-lambda failures annotate their row and the sweep continues.
#[allow(clippy::too_many_arguments)]
pub fn lambda_sweep(
    problem_template: &PlanProblem,
    lambdas: &[f64],
    cache: &GramianCache,
    params: &ChannelParams,
    map: &crate::channel::QuantizedRateMap,
    ladder: &RateLadder,
    sa: &SaConfig,
    sim_cfg: &SimConfig,
) -> Result<SweepOutcome, SimError> {
    if lambdas.is_empty() {
        return Err(SimError::InvalidConfig("empty lambda list".into()));
    }
    let (met_law, _) = met_baseline(
        cache,
        problem_template.start,
        problem_template.goal,
        problem_template.flight_time,
    )?;
    let mut rows = Vec::with_capacity(lambdas.len());
    let mut plans = Vec::new();
    for &lambda in lambdas {
        let mut problem = problem_template.clone();
        problem.lambda = lambda;
        let attempt = Planner::new(&problem, cache, map, ladder)
            .and_then(|planner| planner.plan(sa))
            .map_err(SimError::from)
            .and_then(|plan| {
                let report = run_sim(&plan, &met_law, cache, params, ladder, sim_cfg)?;
                Ok((plan, report))
            });
        match attempt {
            Ok((plan, report)) => {
                rows.push(SweepRow {
                    lambda,
                    energy_ratio: report.energy_ratio,
                    transmission_ratio: report.transmission_ratio,
                    bits_approx_norm: report.bits_approx_norm(),
                    bits_measured_norm: report.bits_measured_norm(),
                    bits_stderr_norm: report.bits_stderr_norm(),
                    error: None,
                });
                plans.push((lambda, plan, report));
            }
            Err(e) => rows.push(SweepRow {
                lambda,
                energy_ratio: f64::NAN,
                transmission_ratio: f64::NAN,
                bits_approx_norm: f64::NAN,
                bits_measured_norm: f64::NAN,
                bits_stderr_norm: f64::NAN,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(SweepOutcome { rows, plans })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{quantize_expected_rate, ChannelParams};
    use crate::dynamics::{build_linear_model, PlanarState, QuadrotorParams};
    use crate::mincontrol::{min_norm_segment, MinControlConfig, SegmentSpec};
    use crate::planner::CommsObjective;
    use approx::assert_relative_eq;
    use nalgebra::Vector2;

    fn cache() -> GramianCache {
        let model = build_linear_model(&QuadrotorParams::default()).unwrap();
        GramianCache::new(model, MinControlConfig::default())
    }

    fn hover_law(cache: &GramianCache, at: Vector2<f64>, t_f: f64) -> PiecewiseLaw {
        let state = PlanarState::at_rest(at);
        PiecewiseLaw::new(vec![min_norm_segment(
            cache,
            &SegmentSpec {
                start: state,
                end: state,
                tau: t_f,
            },
        )
        .unwrap()])
    }

    #[test]
    fn deterministic_rate_without_shadowing() {
        let c = cache();
        let params = ChannelParams {
            shadow_var_db: 0.0,
            ..ChannelParams::default()
        };
        let ladder = RateLadder::from_qam(1e-3, &[2, 4, 6], 1.0, 1.0, 0.5).unwrap();
        // Hover where the deterministic SNR selects the second rung.
        let g2_db = 10.0 * ladder.thresholds[2].log10();
        let g3_db = 10.0 * ladder.thresholds[3].log10();
        let mid_db = 0.5 * (g2_db + g3_db);
        let d = 10f64.powf((params.snr_ref_db - mid_db) / (10.0 * params.path_loss_exp));
        let t_f = 20.0;
        let law = hover_law(&c, Vector2::new(d, 0.0), t_f);
        let (bits, stderr) = measure_bits(&law, &params, &ladder, 100, 1, 0);
        let periods = (t_f / ladder.duplex_period).floor() as usize + 1;
        assert_relative_eq!(
            bits,
            periods as f64 * ladder.tx_duration * ladder.rates[2],
            epsilon = 1e-12
        );
        assert_eq!(stderr, 0.0);
    }

    #[test]
    fn measurement_is_seed_deterministic() {
        let c = cache();
        let params = ChannelParams::default();
        let ladder = RateLadder::from_qam(1e-3, &[2, 4, 6], 1.0, 1.0, 0.5).unwrap();
        let law = hover_law(&c, Vector2::new(20.0, 0.0), 30.0);
        let a = measure_bits(&law, &params, &ladder, 500, 7, 0);
        let b = measure_bits(&law, &params, &ladder, 500, 7, 0);
        assert_eq!(a, b);
        let c2 = measure_bits(&law, &params, &ladder, 500, 8, 0);
        assert_ne!(a.0, c2.0);
    }

    #[test]
    fn stderr_shrinks_with_trials() {
        let c = cache();
        let params = ChannelParams::default();
        let ladder = RateLadder::from_qam(1e-3, &[2, 4, 6], 1.0, 1.0, 0.5).unwrap();
        // Hover near a rung boundary so trials actually vary.
        let law = hover_law(&c, Vector2::new(32.0, 0.0), 30.0);
        let (_, se_small) = measure_bits(&law, &params, &ladder, 200, 3, 0);
        let (_, se_large) = measure_bits(&law, &params, &ladder, 20_000, 3, 0);
        assert!(se_large < se_small * 0.2, "{se_large} vs {se_small}");
    }

    #[test]
    fn met_against_itself_gives_unit_ratios() {
        let c = cache();
        let params = ChannelParams::default();
        let ladder = RateLadder::from_qam(1e-3, &[2, 4, 6], 1.0, 1.0, 0.5).unwrap();
        let map = quantize_expected_rate(&params, &ladder, 6, 80.0, 0).unwrap();
        let angle = 5.0 * std::f64::consts::PI / 9.0;
        let problem = PlanProblem {
            start: Vector2::new(75.0, 0.0),
            goal: Vector2::new(80.0 * angle.cos(), 80.0 * angle.sin()),
            flight_time: 100.0,
            lambda: 1.0,
            objective: CommsObjective::MaxData,
            obstacles: Vec::new(),
        };
        let planner = Planner::new(&problem, &c, &map, &ladder).unwrap();
        let sa = SaConfig {
            iterations: 200,
            ..SaConfig::default()
        };
        let plan = planner.plan(&sa).unwrap();
        let (met_law, _) = met_baseline(&c, problem.start, problem.goal, 100.0).unwrap();
        let cfg = SimConfig {
            n_trials: 400,
            seed: 5,
            dt_sample: 1.0,
        };
        let report = run_sim(&plan, &met_law, &c, &params, &ladder, &cfg).unwrap();
        assert_relative_eq!(report.energy_ratio, 1.0, epsilon = 1e-9);
        // Identical trajectory and shared draw streams: exactly equal bits.
        assert_relative_eq!(report.transmission_ratio, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn speed_profile_of_rest_to_rest_has_single_peak() {
        let c = cache();
        let seg = min_norm_segment(
            &c,
            &SegmentSpec {
                start: PlanarState::at_rest(Vector2::new(0.0, 0.0)),
                end: PlanarState::at_rest(Vector2::new(10.0, 5.0)),
                tau: 12.0,
            },
        )
        .unwrap();
        let law = PiecewiseLaw::new(vec![seg]);
        let profile = speed_profile(&law, 0.05);
        let speeds: Vec<f64> = profile.iter().map(|p| p.1).collect();
        let max_speed = speeds.iter().cloned().fold(0.0, f64::max);
        assert!(speeds[0] < 1e-9);
        assert!(speeds[speeds.len() - 1] < 1e-6);
        assert_eq!(count_local_maxima(&speeds, 0.01 * max_speed), 1);
    }

    #[test]
    fn constant_position_profile_is_zero() {
        let c = cache();
        let law = hover_law(&c, Vector2::new(5.0, 5.0), 10.0);
        for (_, v) in speed_profile(&law, 0.5) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn local_maxima_counter_handles_plateaus_and_noise() {
        let series = [0.0, 1.0, 1.0, 1.0, 0.2, 2.0, 0.0];
        assert_eq!(count_local_maxima(&series, 0.5), 2);
        // Tiny ripples below the prominence floor are ignored.
        let rippled = [0.0, 1.0, 0.999, 1.0005, 0.999, 1.0, 0.0];
        assert_eq!(count_local_maxima(&rippled, 0.05), 1);
    }

    #[test]
    fn empty_lambda_list_is_rejected() {
        let c = cache();
        let params = ChannelParams::default();
        let ladder = RateLadder::from_qam(1e-3, &[2, 4, 6], 1.0, 1.0, 0.5).unwrap();
        let map = quantize_expected_rate(&params, &ladder, 4, 80.0, 0).unwrap();
        let problem = PlanProblem {
            start: Vector2::new(75.0, 0.0),
            goal: Vector2::new(0.0, 75.0),
            flight_time: 100.0,
            lambda: 1.0,
            objective: CommsObjective::MaxData,
            obstacles: Vec::new(),
        };
        let res = lambda_sweep(
            &problem,
            &[],
            &c,
            &params,
            &map,
            &ladder,
            &SaConfig::default(),
            &SimConfig::default(),
        );
        assert!(matches!(res, Err(SimError::InvalidConfig(_))));
    }
}
