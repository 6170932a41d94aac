//! Wireless link model between the drone and the access point: distance
//! path loss with lognormal shadowing, a discrete rate ladder with QAM
//! thresholds, the closed-form expected rate under shadowing, and the
//! optimized piecewise-constant radial quantization of that curve.

use nalgebra::Vector2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("invalid channel parameters: {0}")]
    InvalidParams(String),
    #[error("point is {distance:.3} m from the AP, inside the {standoff:.3} m standoff")]
    TooCloseToAp { distance: f64, standoff: f64 },
    #[error("invalid rate ladder: {0}")]
    InvalidLadder(String),
    #[error("QAM thresholds are not monotone: {0:?}")]
    NonMonotoneThresholds(Vec<f64>),
    #[error("invalid quantization request: {0}")]
    InvalidQuantization(String),
}

/// Large-scale channel parameters. Shadowing is Gaussian in the dB domain
/// with the given variance, i.e. the squared gain is lognormal.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelParams {
    /// Power path-loss exponent.
    pub path_loss_exp: f64,
    /// Transmit power over noise power at 1 m, in dB.
    pub snr_ref_db: f64,
    /// Variance of the shadowing in dB^2.
    pub shadow_var_db: f64,
    /// Access-point position (m).
    pub ap_position: Vector2<f64>,
    /// Closest approach to the AP at which the path-loss model is evaluated (m).
    pub min_standoff: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            path_loss_exp: 2.0,
            snr_ref_db: 40.0,
            shadow_var_db: 1.0,
            ap_position: Vector2::zeros(),
            min_standoff: 1.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.path_loss_exp > 0.0) {
            return Err(ChannelError::InvalidParams(format!(
                "path loss exponent must be positive, got {}",
                self.path_loss_exp
            )));
        }
        if !(self.shadow_var_db >= 0.0) {
            return Err(ChannelError::InvalidParams(format!(
                "shadowing variance must be nonnegative, got {}",
                self.shadow_var_db
            )));
        }
        if !(self.min_standoff > 0.0) {
            return Err(ChannelError::InvalidParams(format!(
                "minimum standoff must be positive, got {}",
                self.min_standoff
            )));
        }
        Ok(())
    }

    pub fn distance_to_ap(&self, p: Vector2<f64>) -> f64 {
        (p - self.ap_position).norm()
    }

    /// Mean SNR in dB at a distance, before shadowing.
    pub fn mean_snr_db(&self, distance: f64) -> f64 {
        self.snr_ref_db - 10.0 * self.path_loss_exp * distance.log10()
    }
}

/// Instantaneous linear SNR at the AP for a shadowing amplitude gain `h`.
pub fn snr(params: &ChannelParams, p: Vector2<f64>, shadow_gain: f64) -> Result<f64, ChannelError> {
    let d = params.distance_to_ap(p);
    if d < params.min_standoff {
        return Err(ChannelError::TooCloseToAp {
            distance: d,
            standoff: params.min_standoff,
        });
    }
    Ok(shadow_gain * shadow_gain * 10f64.powf(params.snr_ref_db / 10.0)
        / d.powf(params.path_loss_exp))
}

/// Approximate bit error rate of Gray-coded square M-QAM at a linear SNR.
pub fn qam_ber(bits_per_symbol: u32, snr_linear: f64) -> f64 {
    let m = 2f64.powi(bits_per_symbol as i32);
    let coeff = (4.0 / bits_per_symbol as f64) * (1.0 - 1.0 / m.sqrt());
    coeff * gaussian_tail((3.0 * snr_linear / (m - 1.0)).sqrt())
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

fn gaussian_tail(x: f64) -> f64 {
    1.0 - std_normal().cdf(x)
}

/// Smallest linear SNR per modulation at which the approximate BER stays at
/// or below the target. Modulations are given as bits per symbol of square
/// QAM constellations (2 for 4-QAM, 4 for 16-QAM, ...).
pub fn qam_thresholds(target_ber: f64, bits_per_symbol: &[u32]) -> Result<Vec<f64>, ChannelError> {
    if !(target_ber > 0.0 && target_ber < 0.5) {
        return Err(ChannelError::InvalidParams(format!(
            "target BER must lie in (0, 0.5), got {target_ber}"
        )));
    }
    let normal = std_normal();
    let mut thresholds = Vec::with_capacity(bits_per_symbol.len());
    for &bits in bits_per_symbol {
        if bits < 2 || bits % 2 != 0 {
            return Err(ChannelError::InvalidParams(format!(
                "bits per symbol must be even and at least 2 for square QAM, got {bits}"
            )));
        }
        let m = 2f64.powi(bits as i32);
        let coeff = (4.0 / bits as f64) * (1.0 - 1.0 / m.sqrt());
        let tail_target = target_ber / coeff;
        let x = if tail_target >= 0.5 {
            0.0
        } else {
            normal.inverse_cdf(1.0 - tail_target)
        };
        thresholds.push((m - 1.0) / 3.0 * x * x);
    }
    // Near-zero ties from the clamp in the degenerate large-target regime
    // are fine; only a meaningful decrease is an inconsistency.
    if thresholds
        .windows(2)
        .any(|w| w[0] - w[1] > 1e-9 * (1.0 + w[0]))
    {
        return Err(ChannelError::NonMonotoneThresholds(thresholds));
    }
    Ok(thresholds)
}

/// Discrete transmission rates and their SNR switching thresholds, plus the
/// time-duplexing split of each period.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateLadder {
    /// Bit rates including the zero rung, strictly increasing (bits/s).
    pub rates: Vec<f64>,
    /// Linear SNR thresholds including the zero rung, strictly increasing.
    pub thresholds: Vec<f64>,
    /// Symbol rate the bit rates are multiples of (symbols/s).
    pub symbol_rate: f64,
    /// Duplexing period (s).
    pub duplex_period: f64,
    /// Transmit-phase duration within each period (s).
    pub tx_duration: f64,
}

impl RateLadder {
    pub fn new(
        rates: Vec<f64>,
        thresholds: Vec<f64>,
        symbol_rate: f64,
        duplex_period: f64,
        tx_duration: f64,
    ) -> Result<Self, ChannelError> {
        let ladder = Self {
            rates,
            thresholds,
            symbol_rate,
            duplex_period,
            tx_duration,
        };
        ladder.validate()?;
        Ok(ladder)
    }

    /// Ladder built from square-QAM modulations at a common BER target. The
    /// `bits_per_symbol` list orders the rungs; rates are `bits * symbol_rate`.
    pub fn from_qam(
        target_ber: f64,
        bits_per_symbol: &[u32],
        symbol_rate: f64,
        duplex_period: f64,
        tx_duration: f64,
    ) -> Result<Self, ChannelError> {
        let mut rates = vec![0.0];
        rates.extend(bits_per_symbol.iter().map(|&b| b as f64 * symbol_rate));
        let mut thresholds = vec![0.0];
        thresholds.extend(qam_thresholds(target_ber, bits_per_symbol)?);
        Self::new(rates, thresholds, symbol_rate, duplex_period, tx_duration)
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.rates.len() != self.thresholds.len() || self.rates.len() < 2 {
            return Err(ChannelError::InvalidLadder(format!(
                "need matching rate/threshold lists with at least one nonzero rung, got {} rates and {} thresholds",
                self.rates.len(),
                self.thresholds.len()
            )));
        }
        if self.rates[0] != 0.0 || self.thresholds[0] != 0.0 {
            return Err(ChannelError::InvalidLadder(
                "first rung must be the zero rate at zero threshold".into(),
            ));
        }
        if self.rates.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ChannelError::InvalidLadder(
                "rates must strictly increase".into(),
            ));
        }
        if self.thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ChannelError::InvalidLadder(
                "thresholds must strictly increase".into(),
            ));
        }
        if !(self.symbol_rate > 0.0) {
            return Err(ChannelError::InvalidLadder(
                "symbol rate must be positive".into(),
            ));
        }
        if !(self.duplex_period > 0.0
            && self.tx_duration > 0.0
            && self.tx_duration < self.duplex_period)
        {
            return Err(ChannelError::InvalidLadder(format!(
                "need 0 < tx duration < duplex period, got {} and {}",
                self.tx_duration, self.duplex_period
            )));
        }
        Ok(())
    }

    /// Highest rate supported.
    pub fn max_rate(&self) -> f64 {
        *self.rates.last().unwrap()
    }

    /// Rate selected at a linear SNR.
    pub fn rate_for_snr(&self, snr_linear: f64) -> f64 {
        let mut rate = 0.0;
        for (r, g) in self.rates.iter().zip(&self.thresholds) {
            if snr_linear >= *g {
                rate = *r;
            } else {
                break;
            }
        }
        rate
    }
}

/// Closed-form expected rate under shadowing at a point. The rate is a step
/// function of the SNR, so the expectation telescopes into a sum of Gaussian
/// tail probabilities in the dB domain; no quadrature is involved.
pub fn expected_rate(
    params: &ChannelParams,
    ladder: &RateLadder,
    p: Vector2<f64>,
) -> Result<f64, ChannelError> {
    let d = params.distance_to_ap(p);
    if d < params.min_standoff {
        return Err(ChannelError::TooCloseToAp {
            distance: d,
            standoff: params.min_standoff,
        });
    }
    Ok(expected_rate_at_distance(params, ladder, d))
}

/// Expected rate as a function of distance only; distances inside the
/// standoff evaluate at the standoff.
pub fn expected_rate_at_distance(
    params: &ChannelParams,
    ladder: &RateLadder,
    distance: f64,
) -> f64 {
    let d = distance.max(params.min_standoff);
    let mean_db = params.mean_snr_db(d);
    let sigma = params.shadow_var_db.sqrt();
    let mut acc = 0.0;
    for j in 1..ladder.rates.len() {
        let step = ladder.rates[j] - ladder.rates[j - 1];
        let threshold_db = 10.0 * ladder.thresholds[j].log10();
        let prob = if sigma > 0.0 {
            std_normal().cdf((mean_db - threshold_db) / sigma)
        } else if mean_db >= threshold_db {
            1.0
        } else {
            0.0
        };
        acc += step * prob;
    }
    acc
}

/// Piecewise-constant radial approximation of the expected-rate curve.
///
/// Levels run from the outermost region (always zero rate) to the innermost
/// (always the top ladder rate); `radii[k]` is the circle separating
/// `levels[k]` outside from `levels[k + 1]` inside, strictly decreasing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizedRateMap {
    pub levels: Vec<f64>,
    pub radii: Vec<f64>,
    /// Integrated squared quantization error over the optimization domain.
    pub error: f64,
    pub domain_radius: f64,
    pub ap_position: Vector2<f64>,
    /// Set when the requested level count exceeds what the curve can
    /// distinguish, leaving near-duplicate levels.
    pub duplicated_levels: bool,
}

impl QuantizedRateMap {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn value_at_radius(&self, radius: f64) -> f64 {
        let inside = self.radii.iter().filter(|&&d| d >= radius).count();
        self.levels[inside]
    }

    pub fn value_at(&self, p: Vector2<f64>) -> f64 {
        self.value_at_radius((p - self.ap_position).norm())
    }

    /// Radius of the border circle between region `j` (outside) and region
    /// `j + 1` (inside), `j` counted from 1 at the outermost border.
    pub fn region_radius(&self, j: usize) -> Result<f64, ChannelError> {
        if j == 0 || j > self.radii.len() {
            return Err(ChannelError::InvalidQuantization(format!(
                "border index {j} outside 1..={}",
                self.radii.len()
            )));
        }
        Ok(self.radii[j - 1])
    }
}

/// Number of Simpson intervals used for the quantization-error integral.
const QUANT_GRID: usize = 2000;

struct QuantizerWorkspace {
    grid: Vec<f64>,
    target: Vec<f64>,
    simpson_w: Vec<f64>,
    h: f64,
}

impl QuantizerWorkspace {
    fn new(params: &ChannelParams, ladder: &RateLadder, domain_radius: f64) -> Self {
        let n = QUANT_GRID;
        let h = domain_radius / n as f64;
        let grid: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
        let target: Vec<f64> = grid
            .iter()
            .map(|&r| expected_rate_at_distance(params, ladder, r))
            .collect();
        let simpson_w: Vec<f64> = (0..=n)
            .map(|i| {
                if i == 0 || i == n {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                }
            })
            .collect();
        Self {
            grid,
            target,
            simpson_w,
            h,
        }
    }

    /// Squared-error integral of a candidate (radii descending).
    fn error(&self, radii: &[f64], levels: &[f64]) -> f64 {
        let mut acc = 0.0;
        // Region index = number of borders at or beyond the radius; walking
        // the grid outward it can only decrease, shedding the innermost
        // (smallest) counted border first.
        let mut region = radii.len();
        for i in 0..self.grid.len() {
            let r = self.grid[i];
            while region > 0 && radii[region - 1] < r {
                region -= 1;
            }
            let diff = levels[region] - self.target[i];
            acc += self.simpson_w[i] * diff * diff;
        }
        acc * self.h / 3.0
    }

    /// Mean of the target over a radial interval (trapezoid on the grid).
    fn interval_mean(&self, lo: f64, hi: f64) -> f64 {
        let a = (lo / self.h).ceil() as usize;
        let b = ((hi / self.h).floor() as usize).min(self.grid.len() - 1);
        if b <= a {
            let mid = 0.5 * (lo + hi);
            let i = ((mid / self.h).round() as usize).min(self.grid.len() - 1);
            return self.target[i];
        }
        let mut acc = 0.0;
        for i in a..=b {
            let w = if i == a || i == b { 0.5 } else { 1.0 };
            acc += w * self.target[i];
        }
        acc / (b - a) as f64
    }
}

/// Bisects for the radius at which the expected-rate curve crosses a value
/// (the curve decreases with radius).
fn crossing_radius(
    params: &ChannelParams,
    ladder: &RateLadder,
    value: f64,
    lo: f64,
    hi: f64,
) -> f64 {
    let mut lo = lo;
    let mut hi = hi;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if expected_rate_at_distance(params, ladder, mid) >= value {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Optimizes the `q`-level radial quantization of the expected-rate curve
/// over `[0, domain_radius]`: simulated annealing over the joint boundary and
/// interior-level vector, then a coordinate-descent polish that alternates
/// conditional-mean levels with midpoint-crossing boundaries. The outermost
/// level is pinned at zero and the innermost at the top ladder rate.
pub fn quantize_expected_rate(
    params: &ChannelParams,
    ladder: &RateLadder,
    q: usize,
    domain_radius: f64,
    seed: u64,
) -> Result<QuantizedRateMap, ChannelError> {
    params.validate()?;
    ladder.validate()?;
    if q < 2 {
        return Err(ChannelError::InvalidQuantization(format!(
            "need at least 2 levels, got {q}"
        )));
    }
    if !(domain_radius > params.min_standoff) {
        return Err(ChannelError::InvalidQuantization(format!(
            "domain radius {domain_radius} must exceed the standoff {}",
            params.min_standoff
        )));
    }
    let ws = QuantizerWorkspace::new(params, ladder, domain_radius);
    let top = ladder.max_rate();

    // Deterministic start: boundaries where the curve crosses evenly spaced
    // values between the pinned outer (0) and inner (top) levels.
    let mut radii: Vec<f64> = (1..q)
        .map(|k| {
            let v = top * (k as f64 - 0.5) / (q - 1) as f64;
            crossing_radius(params, ladder, v, 0.0, domain_radius)
        })
        .collect();
    radii.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut levels = conditional_mean_levels(&ws, &radii, top);
    polish(&ws, params, ladder, &mut radii, &mut levels, top, domain_radius);
    let mut best_radii = radii.clone();
    let mut best_levels = levels.clone();
    let mut best_err = ws.error(&best_radii, &best_levels);

    // Simulated annealing over the joint candidate vector.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur_radii = radii;
    let mut cur_levels = levels;
    let mut cur_err = best_err;
    let iterations = 3000;
    let mut temp = (best_err * 0.1).max(1e-9);
    let sigma_r = domain_radius * 0.02;
    let sigma_l = top * 0.02;
    let n_free_levels = q.saturating_sub(2);
    for _ in 0..iterations {
        let mut cand_radii = cur_radii.clone();
        let mut cand_levels = cur_levels.clone();
        let coord = rng.gen_range(0..(q - 1 + n_free_levels));
        if coord < q - 1 {
            let delta: f64 = rng.gen_range(-1.0..1.0) * sigma_r;
            cand_radii[coord] = (cand_radii[coord] + delta).clamp(1e-3, domain_radius - 1e-3);
            cand_radii.sort_by(|a, b| b.partial_cmp(a).unwrap());
        } else {
            let idx = 1 + (coord - (q - 1));
            let delta: f64 = rng.gen_range(-1.0..1.0) * sigma_l;
            cand_levels[idx] = (cand_levels[idx] + delta).clamp(0.0, top);
        }
        let cand_err = ws.error(&cand_radii, &cand_levels);
        let accept = cand_err <= cur_err
            || rng.gen_range(0.0..1.0f64) < ((cur_err - cand_err) / temp).exp();
        if accept {
            cur_radii = cand_radii;
            cur_levels = cand_levels;
            cur_err = cand_err;
            if cur_err < best_err {
                best_err = cur_err;
                best_radii = cur_radii.clone();
                best_levels = cur_levels.clone();
            }
        }
        temp *= 0.997;
    }

    polish(
        &ws,
        params,
        ladder,
        &mut best_radii,
        &mut best_levels,
        top,
        domain_radius,
    );
    let best_err = ws.error(&best_radii, &best_levels);

    let duplicated = best_levels
        .windows(2)
        .any(|w| (w[1] - w[0]).abs() < 1e-6 * top.max(1.0))
        || best_radii.windows(2).any(|w| (w[0] - w[1]).abs() < 1e-9);
    Ok(QuantizedRateMap {
        levels: best_levels,
        radii: best_radii,
        error: best_err,
        domain_radius,
        ap_position: params.ap_position,
        duplicated_levels: duplicated,
    })
}

/// Interior levels set to the target's conditional mean per region; the
/// outermost and innermost levels stay pinned at 0 and the top rate.
fn conditional_mean_levels(ws: &QuantizerWorkspace, radii: &[f64], top: f64) -> Vec<f64> {
    let q = radii.len() + 1;
    let mut levels = vec![0.0; q];
    levels[q - 1] = top;
    for idx in 1..q.saturating_sub(1) {
        // Region idx sits between border idx (outer, radii[idx - 1]) and
        // border idx + 1 (inner, radii[idx]).
        let hi = radii[idx - 1];
        let lo = radii[idx];
        levels[idx] = ws.interval_mean(lo, hi).clamp(0.0, top);
    }
    levels
}

/// Lloyd-style alternation: conditional-mean levels, then each boundary
/// moved to where the curve crosses the midpoint of its adjacent levels.
fn polish(
    ws: &QuantizerWorkspace,
    params: &ChannelParams,
    ladder: &RateLadder,
    radii: &mut [f64],
    levels: &mut Vec<f64>,
    top: f64,
    domain_radius: f64,
) {
    let q = radii.len() + 1;
    let mut prev_err = f64::INFINITY;
    for _ in 0..40 {
        *levels = conditional_mean_levels(ws, radii, top);
        for k in 0..q - 1 {
            let mid = 0.5 * (levels[k] + levels[k + 1]);
            let hi = if k == 0 { domain_radius } else { radii[k - 1] };
            let lo = if k + 1 == q - 1 { 0.0 } else { radii[k + 1] };
            radii[k] = crossing_radius(params, ladder, mid, lo, hi).clamp(lo + 1e-9, hi - 1e-9);
        }
        let err = ws.error(radii, levels);
        if prev_err - err < 1e-14 * (1.0 + err) {
            break;
        }
        prev_err = err;
    }
    *levels = conditional_mean_levels(ws, radii, top);
}

/// One row of the exported rate-curve table.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RateCurveSample {
    pub radius: f64,
    pub expected_rate: f64,
    pub quantized_rate: f64,
}

/// Samples the expected-rate curve and its quantization on a uniform radial
/// grid, for CSV export.
pub fn sample_rate_curve(
    params: &ChannelParams,
    ladder: &RateLadder,
    map: &QuantizedRateMap,
    n: usize,
) -> Vec<RateCurveSample> {
    (0..=n)
        .map(|i| {
            let radius = map.domain_radius * i as f64 / n as f64;
            RateCurveSample {
                radius,
                expected_rate: expected_rate_at_distance(params, ladder, radius),
                quantized_rate: map.value_at_radius(radius),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, Normal as RandNormal};

    fn paper_ladder() -> RateLadder {
        RateLadder::from_qam(1e-3, &[2, 4, 6], 1.0, 1.0, 0.5).unwrap()
    }

    fn params() -> ChannelParams {
        ChannelParams::default()
    }

    #[test]
    fn snr_plugin_values() {
        let p = params();
        let s = snr(&p, Vector2::new(100.0, 0.0), 1.0).unwrap();
        assert_relative_eq!(s, 1.0, max_relative = 1e-12);
        let s = snr(&p, Vector2::new(1.0, 0.0), 1.0).unwrap();
        assert_relative_eq!(s, 1e4, max_relative = 1e-12);
    }

    #[test]
    fn snr_rejects_points_inside_standoff() {
        let p = params();
        assert!(matches!(
            snr(&p, Vector2::new(0.5, 0.0), 1.0),
            Err(ChannelError::TooCloseToAp { .. })
        ));
    }

    #[test]
    fn shadowing_moment_matches_lognormal_formula() {
        // Mean of h^2 with 10 log10(h^2) ~ N(0, var) is exp(var (ln10/10)^2 / 2).
        let p = ChannelParams {
            shadow_var_db: 4.0,
            ..params()
        };
        let sigma = p.shadow_var_db.sqrt();
        let point = Vector2::new(50.0, 0.0);
        let dist = RandNormal::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let offset_db: f64 = dist.sample(&mut rng);
            let h = 10f64.powf(offset_db / 20.0);
            acc += snr(&p, point, h).unwrap();
        }
        let mc_mean = acc / n as f64;
        let scale = std::f64::consts::LN_10 / 10.0;
        let analytic =
            snr(&p, point, 1.0).unwrap() * (p.shadow_var_db * scale * scale / 2.0).exp();
        assert_relative_eq!(mc_mean, analytic, max_relative = 0.01);
    }

    #[test]
    fn qam_threshold_for_4qam_near_9_8_db() {
        let t = qam_thresholds(1e-3, &[2]).unwrap();
        let db = 10.0 * t[0].log10();
        assert!((db - 9.8).abs() < 0.05, "got {db:.3} dB");
        // Bisection oracle on the BER formula.
        let mut lo = 0.1;
        let mut hi = 100.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if qam_ber(2, mid) > 1e-3 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert_relative_eq!(t[0], 0.5 * (lo + hi), max_relative = 1e-6);
    }

    #[test]
    fn qam_thresholds_increase_with_modulation_order() {
        let t = qam_thresholds(1e-3, &[2, 4, 6]).unwrap();
        assert!(t[0] < t[1] && t[1] < t[2]);
    }

    #[test]
    fn qam_thresholds_degenerate_at_half() {
        let t = qam_thresholds(0.499999, &[2, 4, 6]).unwrap();
        for v in t {
            assert!(v < 0.2, "threshold {v} should be near zero");
        }
    }

    #[test]
    fn expected_rate_is_step_function_without_shadowing() {
        let p = ChannelParams {
            shadow_var_db: 0.0,
            ..params()
        };
        let ladder = paper_ladder();
        // Pick a radius whose deterministic SNR sits between rung 1 and 2.
        let g1_db = 10.0 * ladder.thresholds[1].log10();
        let g2_db = 10.0 * ladder.thresholds[2].log10();
        let mid_db = 0.5 * (g1_db + g2_db);
        let d = 10f64.powf((p.snr_ref_db - mid_db) / (10.0 * p.path_loss_exp));
        let r = expected_rate(&p, &ladder, Vector2::new(d, 0.0)).unwrap();
        assert_relative_eq!(r, ladder.rates[1], max_relative = 1e-12);
    }

    #[test]
    fn expected_rate_vanishes_far_away() {
        let p = params();
        let ladder = paper_ladder();
        let r = expected_rate(&p, &ladder, Vector2::new(5e4, 0.0)).unwrap();
        assert!(r < 1e-9);
    }

    #[test]
    fn expected_rate_matches_monte_carlo() {
        let p = params();
        let ladder = paper_ladder();
        let dist = RandNormal::new(0.0, p.shadow_var_db.sqrt()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for d in [10.0, 20.0, 33.0, 45.0] {
            let closed = expected_rate_at_distance(&p, &ladder, d);
            let n = 1_000_000;
            let mean_db = p.mean_snr_db(d);
            let mut acc = 0.0;
            let mut acc2 = 0.0;
            for _ in 0..n {
                let snr_db = mean_db + dist.sample(&mut rng);
                let rate = ladder.rate_for_snr(10f64.powf(snr_db / 10.0));
                acc += rate;
                acc2 += rate * rate;
            }
            let mc = acc / n as f64;
            let var = (acc2 / n as f64 - mc * mc).max(0.0);
            let stderr = (var / n as f64).sqrt();
            assert!(
                (closed - mc).abs() <= 3.0 * stderr + 5e-3 * closed.max(1e-6),
                "d = {d}: closed {closed:.5}, mc {mc:.5}, stderr {stderr:.2e}"
            );
        }
    }

    #[test]
    fn expected_rate_monotone_in_radius() {
        let p = params();
        let ladder = paper_ladder();
        let mut prev = f64::INFINITY;
        for i in 1..=200 {
            let d = i as f64 * 0.5;
            let r = expected_rate_at_distance(&p, &ladder, d);
            assert!(r <= prev + 1e-12, "non-monotone at d = {d}");
            prev = r;
        }
    }

    #[test]
    fn quantizer_rejects_tiny_level_count() {
        let p = params();
        let ladder = paper_ladder();
        assert!(matches!(
            quantize_expected_rate(&p, &ladder, 1, 80.0, 0),
            Err(ChannelError::InvalidQuantization(_))
        ));
    }

    #[test]
    fn quantizer_error_shrinks_with_levels() {
        let p = params();
        let ladder = paper_ladder();
        let e2 = quantize_expected_rate(&p, &ladder, 2, 80.0, 0).unwrap().error;
        let e3 = quantize_expected_rate(&p, &ladder, 3, 80.0, 0).unwrap().error;
        let e4 = quantize_expected_rate(&p, &ladder, 4, 80.0, 0).unwrap().error;
        assert!(e3 <= e2 * (1.0 + 1e-9), "E_3 = {e3}, E_2 = {e2}");
        assert!(e4 <= e3 * (1.0 + 1e-9), "E_4 = {e4}, E_3 = {e3}");
    }

    #[test]
    fn quantizer_boundaries_approach_switch_radii_without_shadowing() {
        let p = ChannelParams {
            shadow_var_db: 0.0,
            ..params()
        };
        let ladder = paper_ladder();
        // With Q = J + 1 levels and a stepwise target the optimum boundaries
        // are the deterministic rate-switch radii.
        let map = quantize_expected_rate(&p, &ladder, 4, 80.0, 0).unwrap();
        for (k, j) in (1..=3).rev().enumerate() {
            let analytic = 10f64.powf(
                (p.snr_ref_db - 10.0 * ladder.thresholds[j].log10()) / (10.0 * p.path_loss_exp),
            );
            let got = map.radii[map.radii.len() - 1 - k];
            assert_relative_eq!(got, analytic, max_relative = 0.01);
        }
    }

    #[test]
    fn paper_setting_q6_has_six_distinct_levels() {
        let p = params();
        let ladder = paper_ladder();
        let map = quantize_expected_rate(&p, &ladder, 6, 80.0, 0).unwrap();
        assert_eq!(map.level_count(), 6);
        assert!(!map.duplicated_levels);
        assert_eq!(map.levels[0], 0.0);
        assert_relative_eq!(map.levels[5], ladder.max_rate());
        for w in map.levels.windows(2) {
            assert!(w[1] > w[0]);
        }
        for w in map.radii.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn map_is_radially_symmetric() {
        let p = params();
        let ladder = paper_ladder();
        let map = quantize_expected_rate(&p, &ladder, 6, 80.0, 0).unwrap();
        let radius = 20.0;
        let reference = map.value_at(Vector2::new(radius, 0.0));
        for k in 1..8 {
            let angle = k as f64 * std::f64::consts::FRAC_PI_4;
            let p2 = Vector2::new(radius * angle.cos(), radius * angle.sin());
            assert_eq!(map.value_at(p2), reference);
        }
    }

    #[test]
    fn region_radius_indexing() {
        let p = params();
        let ladder = paper_ladder();
        let map = quantize_expected_rate(&p, &ladder, 4, 80.0, 0).unwrap();
        assert_eq!(map.region_radius(1).unwrap(), map.radii[0]);
        assert_eq!(map.region_radius(3).unwrap(), map.radii[2]);
        assert!(map.region_radius(0).is_err());
        assert!(map.region_radius(4).is_err());
        // Outermost border is the largest radius.
        assert!(map.region_radius(1).unwrap() > map.region_radius(2).unwrap());
    }
}
