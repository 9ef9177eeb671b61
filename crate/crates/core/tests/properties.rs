use afctl::cli::{parse_str, RunConfig};
use afctl::model::{ModelParams, State};
use afctl::montecarlo::{hitting_time, objective_from_times, HittingTime, TargetSpec};
use afctl::noise::{box_muller, derive_stream, NoiseParams};
use afctl::optctl::{
    adjoint_drift, arrow_residual_quality, arrow_residual_quantity, backward_pass, control_update, hamiltonian,
    AdjointState, Bounds, Branch, ControlMode, ControlSchedule, QMode, SweepConfig,
};
use afctl::sim::{simulate_path, Path, SimConfig};
use proptest::prelude::*;

fn model() -> impl Strategy<Value = ModelParams> {
    (0.5..3.0f64, 2.0..30.0f64, 0.0..30.0f64, 0.05..1.0f64, 0.0..0.5f64, 0.0..0.05f64, 0.0..5.0f64, 0.0..20.0f64)
        .prop_map(|(r, gamma, omega, e, m1, m2, alpha, xi)| ModelParams { r, gamma, omega, e, m1, m2, alpha, xi })
}

fn noise() -> impl Strategy<Value = NoiseParams> {
    (0.0..0.3f64, 0.0..0.3f64, 0.0..3.0f64, -0.5..1.5f64, -0.5..1.5f64)
        .prop_map(|(sigma1, sigma2, lambda, jump1, jump2)| NoiseParams { sigma1, sigma2, lambda, jump1, jump2 })
}

fn adjoint() -> impl Strategy<Value = AdjointState> {
    prop::array::uniform8(-5.0..5.0f64).prop_map(|v| AdjointState {
        p1: v[0],
        p2: v[1],
        q1: v[2],
        q2: v[3],
        q3: v[4],
        q4: v[5],
        r1: v[6],
        r2: v[7],
    })
}

fn state() -> impl Strategy<Value = State> {
    (0.05..20.0f64, 0.05..100.0f64).prop_map(|(x, y)| State::new(x, y))
}

fn mode() -> impl Strategy<Value = ControlMode> {
    prop_oneof![Just(ControlMode::Quality), Just(ControlMode::Quantity)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn adjoint_drift_is_negative_gradient(s in state(), adj in adjoint(), mp in model(), np in noise()) {
        let ctrl = (mp.alpha, mp.xi);
        let (d1, d2) = adjoint_drift(s, ctrl, &adj, &mp, &np).unwrap();
        let h = 1e-6;
        let hx = |x: f64, y: f64| hamiltonian(State::new(x, y), ctrl, &adj, &mp, &np).unwrap();
        let gx = (hx(s.x + h, s.y) - hx(s.x - h, s.y)) / (2.0 * h);
        let gy = (hx(s.x, s.y + h) - hx(s.x, s.y - h)) / (2.0 * h);
        let scale = 1.0 + hx(s.x, s.y).abs();
        prop_assert!((-d1 - gx).abs() <= 1e-6 * scale.max(gx.abs()), "{} vs {}", -d1, gx);
        prop_assert!((-d2 - gy).abs() <= 1e-6 * scale.max(gy.abs()), "{} vs {}", -d2, gy);
    }

    #[test]
    fn control_updates_stay_in_bounds(
        s in state(), adj in adjoint(), mp in model(), m in mode(), lo in 0.0..5.0f64, width in 0.0..10.0f64,
    ) {
        let b = Bounds::new(lo, lo + width);
        let u = control_update(m, s, &adj, &mp, b).unwrap();
        prop_assert!(b.contains(u.value));
        if u.branch == Branch::Interior {
            let mut at = mp;
            m.set(&mut at, u.value);
            let res = match m {
                ControlMode::Quality => arrow_residual_quality(s, &adj, &at),
                ControlMode::Quantity => arrow_residual_quantity(s, &adj, &at),
            };
            let scale = s.x * adj.p1.abs() + adj.p2.abs() * (1.0 + s.x + mp.omega * s.x * s.x) * (1.0 + mp.xi);
            prop_assert!(res.abs() <= 1e-9 * scale.max(1.0));
        }
    }

    #[test]
    fn endpoint_choice_minimises_hamiltonian(s in state(), adj in adjoint(), mp in model(), m in mode()) {
        let b = Bounds::new(0.0, 10.0);
        let u = control_update(m, s, &adj, &mp, b).unwrap();
        if u.branch == Branch::Endpoint {
            let h = |v: f64| {
                let mut at = mp;
                m.set(&mut at, v);
                hamiltonian(s, (at.alpha, at.xi), &adj, &mp, &NoiseParams::NONE).unwrap()
            };
            prop_assert!(h(u.value) <= h(b.lo).min(h(b.hi)) + 1e-12 * h(u.value).abs().max(1.0));
        }
    }

    #[test]
    fn box_muller_is_finite(u1 in 0.0..1.0f64, u2 in 0.0..1.0f64) {
        let (a, b) = box_muller(if u1 == 0.0 { f64::MIN_POSITIVE } else { u1 }, u2);
        prop_assert!(a.is_finite() && b.is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn paths_stay_nonnegative(mp in model(), np in noise(), seed in any::<u32>(), x0 in 0.1..10.0f64, y0 in 0.0..50.0f64) {
        let cfg = SimConfig::new(0.01, 5.0);
        let sched = ControlSchedule::constant(ControlMode::Quality, mp.alpha, cfg.n_points(), Bounds::new(0.0, 10.0));
        if let Ok(p) = simulate_path(x0, y0, &sched, &mp, &np, &cfg, &mut derive_stream(seed as u64, 0)) {
            prop_assert!(p.states.iter().all(|s| s.x >= 0.0 && s.y >= 0.0));
            if y0 == 0.0 {
                prop_assert!(p.states.iter().all(|s| s.y == 0.0));
            }
        }
    }

    #[test]
    fn csv_round_trip(seed in any::<u32>(), np in noise()) {
        let cfg = SimConfig::new(0.05, 1.0);
        let mp = ModelParams::baseline(1.0, 1.0);
        let sched = ControlSchedule::constant(ControlMode::Quantity, 0.7, cfg.n_points(), Bounds::new(0.0, 10.0));
        let p = simulate_path(2.0, 8.0, &sched, &mp, &np, &cfg, &mut derive_stream(seed as u64, 1)).unwrap();
        prop_assert_eq!(Path::from_csv(&p.to_csv()).unwrap().states, p.states);
    }

    #[test]
    fn enlarging_epsilon_never_delays_entry(seed in any::<u32>(), eps in 0.05..3.0f64, grow in 0.0..3.0f64) {
        let cfg = SimConfig::new(0.01, 5.0);
        let mp = ModelParams::baseline(0.5, 20.0);
        let sched = ControlSchedule::constant(ControlMode::Quality, 0.5, cfg.n_points(), Bounds::new(0.0, 10.0));
        let p = simulate_path(2.0, 8.0, &sched, &mp, &NoiseParams::default(), &cfg, &mut derive_stream(seed as u64, 0)).unwrap();
        let small = hitting_time(&p, &TargetSpec::new(6.0, 15.0, eps)).capped(5.0);
        let large = hitting_time(&p, &TargetSpec::new(6.0, 15.0, eps + grow)).capped(5.0);
        prop_assert!(large <= small);
    }

    #[test]
    fn objective_is_bounded(times in prop::collection::vec(prop::option::of(0usize..100), 1..50), horizon in 0.5..10.0f64) {
        let n = 100.0;
        let hits: Vec<HittingTime> = times
            .iter()
            .map(|t| match t {
                Some(k) => HittingTime::Hit { index: *k, time: *k as f64 / n * horizon },
                None => HittingTime::Censored,
            })
            .collect();
        let o = objective_from_times(&hits, horizon);
        prop_assert!(o.value >= 0.0 && o.value <= horizon);
        prop_assert!(o.std_error >= 0.0);
        prop_assert!((0.0..=1.0).contains(&o.censored_fraction));
    }

    #[test]
    fn costate_vanishes_at_horizon(seed in any::<u32>(), regression in any::<bool>(), eps in 0.3..3.0f64) {
        let cfg = SimConfig::new(0.02, 4.0);
        let mp = ModelParams::baseline(0.5, 20.0);
        let np = NoiseParams::default();
        let sched = ControlSchedule::constant(ControlMode::Quality, 0.5, cfg.n_points(), Bounds::new(0.0, 10.0));
        let paths: Vec<Path> = (0..8)
            .map(|i| simulate_path(2.0, 8.0, &sched, &mp, &np, &cfg, &mut derive_stream(seed as u64, i)).unwrap())
            .collect();
        let q_mode = if regression { QMode::Regression } else { QMode::PathwiseZero };
        let sc = SweepConfig { q_mode, ..SweepConfig::default() };
        let adj = backward_pass(&paths, &sched, &mp, &np, &sc, Some(&TargetSpec::new(6.0, 15.0, eps))).unwrap();
        for a in adj {
            prop_assert_eq!(a.len(), cfg.n_points());
            let last = a.last().unwrap();
            prop_assert!(last.p1 == 0.0 && last.p2 == 0.0);
            prop_assert!(a.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn config_echo_round_trips(
        mp in model(), np in noise(), seed in 0u64..1u64 << 62, paths in 1usize..100_000,
        dt in 1e-4..0.1f64, tx in 0.0..20.0f64, ty in 0.0..100.0f64, eps in 0.01..5.0f64,
    ) {
        let text = format!(
            "[model]\nr = {:?}\ngamma = {:?}\nomega = {:?}\ne = {:?}\nm1 = {:?}\nm2 = {:?}\nalpha = {:?}\nxi = {:?}\n\
             [noise]\nsigma1 = {:?}\nsigma2 = {:?}\nlambda = {:?}\njump1 = {:?}\njump2 = {:?}\n\
             [sim]\ndt = {:?}\n[target]\nx = {:?}\ny = {:?}\nepsilon = {:?}\n[run]\nseed = {}\npaths = {}\n",
            mp.r, mp.gamma, mp.omega, mp.e, mp.m1, mp.m2, mp.alpha, mp.xi,
            np.sigma1, np.sigma2, np.lambda, np.jump1, np.jump2, dt, tx, ty, eps, seed, paths
        );
        let cfg: RunConfig = parse_str(&text).unwrap();
        prop_assert_eq!(cfg.model, mp);
        prop_assert_eq!(cfg.noise, np);
        let again = parse_str(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(again, cfg);
    }
}
