//! Run configuration: one JSON file drives every subcommand. Unknown keys
//! are rejected so a typo cannot silently fall back to a default.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use commtraj::channel::{ChannelParams, RateLadder};
use commtraj::dynamics::QuadrotorParams;
use commtraj::planner::{CommsObjective, PlanProblem, SaConfig};
use commtraj::simulate::SimConfig;

use crate::CliError;

/// Rate-ladder construction parameters (the ladder itself is derived).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderConfig {
    /// Target bit error rate for the QAM switching thresholds.
    pub target_ber: f64,
    /// Bits per symbol of each square-QAM rung (2 = 4-QAM, 4 = 16-QAM, ...).
    pub bits_per_symbol: Vec<u32>,
    /// Symbol rate (symbols/s); bit rates are multiples of it.
    pub symbol_rate: f64,
    /// Duplexing period (s).
    pub duplex_period: f64,
    /// Transmit-phase duration within each period (s).
    pub tx_duration: f64,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            target_ber: 1e-3,
            bits_per_symbol: vec![2, 4, 6],
            symbol_rate: 1.0,
            duplex_period: 1.0,
            tx_duration: 0.5,
        }
    }
}

impl LadderConfig {
    pub fn build(&self) -> Result<RateLadder, CliError> {
        RateLadder::from_qam(
            self.target_ber,
            &self.bits_per_symbol,
            self.symbol_rate,
            self.duplex_period,
            self.tx_duration,
        )
        .map_err(CliError::config)
    }
}

/// Radial quantizer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerConfig {
    /// Number of quantization levels.
    pub levels: usize,
    /// Optimization domain radius (m); omit to use the farther endpoint.
    #[serde(default)]
    pub domain_radius: Option<f64>,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            levels: 6,
            domain_radius: None,
        }
    }
}

/// The full run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Free-form field documentation written by `init`; ignored by the
    /// commands.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub docs: BTreeMap<String, String>,
    pub quadrotor: QuadrotorParams,
    pub channel: ChannelParams,
    pub ladder: LadderConfig,
    pub quantizer: QuantizerConfig,
    pub problem: PlanProblem,
    pub sa: SaConfig,
    pub sim: SimConfig,
    /// Sweep weights, outermost first.
    pub lambdas: Vec<f64>,
    /// Default output directory; the `--out` flag overrides it.
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let angle = 5.0 * std::f64::consts::PI / 9.0;
        Self {
            docs: BTreeMap::new(),
            quadrotor: QuadrotorParams::default(),
            channel: ChannelParams::default(),
            ladder: LadderConfig::default(),
            quantizer: QuantizerConfig::default(),
            problem: PlanProblem {
                start: nalgebra::Vector2::new(75.0, 0.0),
                goal: nalgebra::Vector2::new(80.0 * angle.cos(), 80.0 * angle.sin()),
                flight_time: 100.0,
                lambda: 0.98,
                objective: CommsObjective::MaxData,
                obstacles: Vec::new(),
            },
            sa: SaConfig::default(),
            sim: SimConfig::default(),
            lambdas: vec![1.0, 0.98, 0.8, 0.5, 0.2, 0.1],
            output_dir: ".".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: RunConfig = serde_json::from_str(&text).map_err(|e| {
            CliError::config(format!("cannot parse config {}: {e}", path.display()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.quadrotor.validate().map_err(CliError::config)?;
        self.channel.validate().map_err(CliError::config)?;
        self.ladder.build()?;
        self.problem.validate().map_err(CliError::config)?;
        if self.quantizer.levels < 2 {
            return Err(CliError::config("quantizer.levels must be at least 2"));
        }
        if self.sim.n_trials == 0 {
            return Err(CliError::config("sim.n_trials must be at least 1"));
        }
        Ok(())
    }

    pub fn domain_radius(&self) -> f64 {
        self.quantizer.domain_radius.unwrap_or_else(|| {
            let ds = (self.problem.start - self.channel.ap_position).norm();
            let dg = (self.problem.goal - self.channel.ap_position).norm();
            ds.max(dg)
        })
    }

    /// The generated template, with every field group documented.
    pub fn template() -> Self {
        let mut config = Self::default();
        let docs = [
            ("quadrotor", "Representative small-quadrotor constants, not a specific airframe: mass (kg), gravity (m/s^2), arm_length (m), inertia / inertia_yaw / rotor_inertia (kg m^2), thrust_factor, drag_factor, and the altitude/yaw loop gains (damping on the rate, stiffness on the error; both must be positive)."),
            ("channel", "path_loss_exp: power path-loss exponent; snr_ref_db: transmit-over-noise power at 1 m (dB); shadow_var_db: shadowing variance (dB^2, Gaussian in dB); ap_position: access point (m); min_standoff: closest modeled approach to the AP (m). Defaults: 2, 40 dB, 1 dB^2, origin, 1 m."),
            ("ladder", "Square-QAM rungs at a common BER target. Defaults: BER 1e-3 over 4/16/64-QAM, i.e. rates 2, 4, 6 times symbol_rate; duplexing 1 s with a 0.5 s transmit phase."),
            ("quantizer", "levels: piecewise-constant levels of the radial expected-rate approximation (default 6); domain_radius: optimization span in m (default: the farther of start/goal from the AP)."),
            ("problem", "start/goal (m), flight_time (s), lambda in [0,1] (1 = pure energy), objective: {\"kind\":\"max_data\"} or {\"kind\":\"quota\",\"bits\":...,\"steepness\":...}, obstacles: list of {center, radius, gain, steepness}."),
            ("sa", "Annealer: iterations per depth (scaled with the crossing count internally), probe count for the start/temperature, geometric cooling factor, proposal spreads (rad / relative). The seed field is overridden by --seed or COMMTRAJ_SEED."),
            ("sim", "Monte-Carlo trials, seed (overridden by the master seed) and the trajectory sampling step (s) for exported series."),
            ("lambdas", "Weights used by the sweep subcommand, in output order."),
            ("output_dir", "Where artifacts are written unless --out is given."),
            ("seeding", "All randomness derives from one master seed: --seed flag, else the COMMTRAJ_SEED environment variable, else 0. Identical config + seed reproduces identical artifacts byte for byte, regardless of worker count."),
        ];
        for (key, value) in docs {
            config.docs.insert(key.into(), value.into());
        }
        config
    }
}
