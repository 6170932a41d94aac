use commtraj::channel::{expected_rate_at_distance, quantize_expected_rate, ChannelParams, RateLadder};
use commtraj::dynamics::{build_linear_model, QuadrotorParams};
use commtraj::mincontrol::{GramianCache, MinControlConfig};
use commtraj::planner::{CommsObjective, PlanProblem, Planner, SaConfig};
use nalgebra::Vector2;

fn main() {
    let model = build_linear_model(&QuadrotorParams::default()).unwrap();
    let cache = GramianCache::new(model, MinControlConfig::default());
    let params = ChannelParams::default();
    let ladder = RateLadder::from_qam(1e-3, &[2, 4, 6], 1.0, 1.0, 0.5).unwrap();
    let map = quantize_expected_rate(&params, &ladder, 6, 80.0, 0).unwrap();
    let angle = 5.0 * std::f64::consts::PI / 9.0;
    for lambda in [0.98, 0.8, 0.5, 0.2] {
        let problem = PlanProblem {
            start: Vector2::new(75.0, 0.0),
            goal: Vector2::new(80.0 * angle.cos(), 80.0 * angle.sin()),
            flight_time: 100.0,
            lambda,
            objective: CommsObjective::MaxData,
            obstacles: Vec::new(),
        };
        let planner = Planner::new(&problem, &cache, &map, &ladder).unwrap();
        let plan = planner.plan(&SaConfig::default()).unwrap();
        let law = plan.build_law(&cache).unwrap();
        println!("lambda {lambda}: depth {} durations {:?}", plan.waypoints.depth,
            plan.waypoints.durations.iter().map(|d| (d*10.0).round()/10.0).collect::<Vec<_>>());
        // per-duplexing-sample decomposition
        let mut t = 0.0;
        let mut leg = 0;
        let mut leg_end = plan.waypoints.durations[0];
        let mut approx_leg = vec![0.0; plan.waypoints.durations.len()];
        let mut true_leg = vec![0.0; plan.waypoints.durations.len()];
        let mut radius_minmax = vec![(f64::INFINITY, 0.0f64); plan.waypoints.durations.len()];
        while t <= 100.0 + 1e-9 {
            while t > leg_end + 1e-9 && leg + 1 < plan.waypoints.durations.len() {
                leg += 1;
                leg_end += plan.waypoints.durations[leg];
            }
            let p = law.state_at(t).position();
            let d = p.norm();
            let e_true = expected_rate_at_distance(&params, &ladder, d);
            approx_leg[leg] += 0.5 * plan.waypoints.leg_rates[leg];
            true_leg[leg] += 0.5 * e_true;
            radius_minmax[leg].0 = radius_minmax[leg].0.min(d);
            radius_minmax[leg].1 = radius_minmax[leg].1.max(d);
            t += 1.0;
        }
        for (i, ((a, tr), (rmin, rmax))) in approx_leg.iter().zip(&true_leg).zip(&radius_minmax).enumerate() {
            println!("  leg {i} (level {}): approx {:7.2} true {:7.2} radius [{:.1}, {:.1}]",
                plan.waypoints.leg_levels[i], a, tr, rmin, rmax);
        }
        let at: f64 = approx_leg.iter().sum();
        let tt: f64 = true_leg.iter().sum();
        println!("  total approx {:.2} true-sampled {:.2} gap {:+.1}%  (planner bits_approx {:.2})", at, tt, 100.0*(at-tt)/tt, plan.bits_approx);
    }
}
