use commtraj::channel::{quantize_expected_rate, ChannelParams, RateLadder};
use commtraj::dynamics::{build_linear_model, QuadrotorParams};
use commtraj::mincontrol::{GramianCache, MinControlConfig};
use commtraj::planner::{CommsObjective, PlanProblem, Planner, SaConfig};
use commtraj::simulate::{count_local_maxima, lambda_sweep, speed_profile, SimConfig};
use nalgebra::Vector2;

fn main() {
    let model = build_linear_model(&QuadrotorParams::default()).unwrap();
    let cache = GramianCache::new(model, MinControlConfig::default());
    let params = ChannelParams::default();
    let ladder = RateLadder::from_qam(1e-3, &[2, 4, 6], 1.0, 1.0, 0.5).unwrap();
    let map = quantize_expected_rate(&params, &ladder, 6, 80.0, 0).unwrap();
    println!("map radii: {:?}", map.radii.iter().map(|r| (r*100.0).round()/100.0).collect::<Vec<_>>());
    println!("map levels: {:?}", map.levels.iter().map(|l| (l*1000.0).round()/1000.0).collect::<Vec<_>>());
    let angle = 5.0 * std::f64::consts::PI / 9.0;
    let problem = PlanProblem {
        start: Vector2::new(75.0, 0.0),
        goal: Vector2::new(80.0 * angle.cos(), 80.0 * angle.sin()),
        flight_time: 100.0,
        lambda: 1.0,
        objective: CommsObjective::MaxData,
        obstacles: Vec::new(),
    };
    let sa = SaConfig::default();
    let sim = SimConfig { n_trials: 2000, seed: 0, dt_sample: 1.0 };
    let t0 = std::time::Instant::now();
    let out = lambda_sweep(&problem, &[1.0, 0.98, 0.8, 0.5, 0.2, 0.1], &cache, &params, &map, &ladder, &sa, &sim).unwrap();
    println!("sweep took {:.1} s", t0.elapsed().as_secs_f64());
    println!("{:>6} {:>10} {:>10} {:>10} {:>10} {:>8} {:>6}", "lambda", "e_ratio", "tx_ratio", "approx", "measured", "gap%", "depth");
    for (i, row) in out.rows.iter().enumerate() {
        let gap = 100.0 * (row.bits_approx_norm - row.bits_measured_norm).abs() / row.bits_measured_norm.max(1e-12);
        let depth = out.plans.get(i).map(|p| p.1.waypoints.depth as i64).unwrap_or(-1);
        println!("{:>6} {:>10.4} {:>10.4} {:>10.3} {:>10.3} {:>8.2} {:>6}", row.lambda, row.energy_ratio, row.transmission_ratio, row.bits_approx_norm, row.bits_measured_norm, gap, depth);
    }
    for (lambda, plan, _) in &out.plans {
        let law = plan.build_law(&cache).unwrap();
        let prof = speed_profile(&law, 0.1);
        let speeds: Vec<f64> = prof.iter().map(|p| p.1).collect();
        let vmax = speeds.iter().cloned().fold(0.0, f64::max);
        let peaks = count_local_maxima(&speeds, 0.02 * vmax);
        println!("lambda {:4}: depth {} peaks {} vmax {:.2} m/s cost {:.4}", lambda, plan.waypoints.depth, peaks, vmax, plan.cost);
    }
}
