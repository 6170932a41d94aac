use commtraj::channel::{quantize_expected_rate, ChannelParams, RateLadder};
use commtraj::dynamics::{build_linear_model, QuadrotorParams};
use commtraj::mincontrol::{GramianCache, MinControlConfig};
use commtraj::planner::{crossing_template, CommsObjective, PlanProblem, Planner, SaConfig};
use nalgebra::Vector2;

fn main() {
    let model = build_linear_model(&QuadrotorParams::default()).unwrap();
    let cache = GramianCache::new(model, MinControlConfig::default());
    let params = ChannelParams::default();
    let ladder = RateLadder::from_qam(1e-3, &[2, 4, 6], 1.0, 1.0, 0.5).unwrap();
    let map = quantize_expected_rate(&params, &ladder, 6, 80.0, 0).unwrap();
    let angle = 5.0 * std::f64::consts::PI / 9.0;
    let problem = PlanProblem {
        start: Vector2::new(75.0, 0.0),
        goal: Vector2::new(80.0 * angle.cos(), 80.0 * angle.sin()),
        flight_time: 100.0,
        lambda: 0.2,
        objective: CommsObjective::MaxData,
        obstacles: Vec::new(),
    };
    let planner = Planner::new(&problem, &cache, &map, &ladder).unwrap();
    let az_s = 0.0f64;
    let az_g = angle;
    for depth in 0..=5 {
        let t = crossing_template(&map, problem.start, problem.goal, depth).unwrap();
        let n_cross = t.crossings();
        let n_legs = t.legs();
        let angles: Vec<f64> = (0..n_cross)
            .map(|i| az_s + (az_g - az_s) * (i + 1) as f64 / (n_cross + 1) as f64)
            .collect();
        let durations = vec![100.0 / n_legs as f64; n_legs];
        let eval = planner.evaluate_candidate(&t, &angles, &durations);
        println!(
            "depth {depth}: cost {:10.4} energy {:12.4} bits {:8.3} (energy finite: {})",
            eval.cost, eval.energy, eval.bits, eval.energy.is_finite()
        );
        // full anneal
        let sa = SaConfig { iterations: 5000, ..SaConfig::default() };
        match planner.anneal(&t, &sa) {
            Ok((_, ev, diag)) => println!(
                "   anneal: cost {:.4} energy {:.2} bits {:.2} accepted {} failure {:?}",
                ev.cost, ev.energy, ev.bits, diag.accepted, diag.failure
            ),
            Err(e) => println!("   anneal error: {e}"),
        }
    }
}
