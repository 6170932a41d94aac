//! On-disk artifact schemas and writers. CSV output is RFC-4180-style:
//! header row, comma separators, '.' decimal point, no locale dependence.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use commtraj::channel::{QuantizedRateMap, RateCurveSample};
use commtraj::dynamics::NonlinearValidation;
use commtraj::mincontrol::PiecewiseLaw;
use commtraj::planner::PlanResult;
use commtraj::simulate::SweepRow;

use crate::CliError;

/// `plan.json`: everything needed to rebuild and re-score the plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanArtifact {
    pub lambda: f64,
    pub master_seed: u64,
    pub map: QuantizedRateMap,
    pub result: PlanResult,
}

/// `ratemap.json`: the optimized quantization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateMapArtifact {
    pub levels: usize,
    pub master_seed: u64,
    pub map: QuantizedRateMap,
}

/// `validation.json`: nonlinear closed-loop check of a plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationArtifact {
    pub lambda: f64,
    pub deviation_bound_fraction: f64,
    pub passed: bool,
    pub report: NonlinearValidation,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes)
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::numeric(format!("cannot serialize {}: {e}", path.display())))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_rate_curve_csv(path: &Path, samples: &[RateCurveSample]) -> Result<(), CliError> {
    let mut out = Vec::new();
    writeln!(out, "radius,expected_rate,quantized_rate").unwrap();
    for s in samples {
        writeln!(out, "{},{},{}", s.radius, s.expected_rate, s.quantized_rate).unwrap();
    }
    write_atomic(path, &out)
}

pub fn write_path_csv(path: &Path, law: &PiecewiseLaw, dt: f64) -> Result<(), CliError> {
    let mut out = Vec::new();
    writeln!(out, "t,x,y,speed").unwrap();
    for (t, state) in law.sample_states(dt) {
        let p = state.position();
        writeln!(out, "{},{},{},{}", t, p.x, p.y, state.velocity().norm()).unwrap();
    }
    write_atomic(path, &out)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), CliError> {
    let mut out = Vec::new();
    writeln!(
        out,
        "lambda,energy_ratio,transmission_ratio,bits_approx,bits_measured,bits_stderr,error"
    )
    .unwrap();
    for r in rows {
        let fmt = |v: f64| {
            if v.is_finite() {
                format!("{v}")
            } else {
                String::new()
            }
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.lambda,
            fmt(r.energy_ratio),
            fmt(r.transmission_ratio),
            fmt(r.bits_approx_norm),
            fmt(r.bits_measured_norm),
            fmt(r.bits_stderr_norm),
            r.error.as_deref().unwrap_or("")
        )
        .unwrap();
    }
    write_atomic(path, &out)
}
