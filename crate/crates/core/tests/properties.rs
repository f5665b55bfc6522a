use std::f64::consts::PI;
use std::sync::Arc;

use proptest::prelude::*;

use gtf_iss::backstepping::{synthesize_regular, SynthesisParams};
use gtf_iss::certification::fit_envelope;
use gtf_iss::comparison::{compose, make_class_k, next_gain, ClassCheck, ClassKind, ComparisonFunction, GainKind};
use gtf_iss::cover::Collar;
use gtf_iss::numerics::transition;
use gtf_iss::obstruction::{winding_number, CircleMapSamples, TOL_ZERO};
use gtf_iss::simulation::{integrate, FnField, StepSpec};
use gtf_iss::system::{DisturbanceKind, DisturbanceSignal, GtfSystem, SystemSpec};

fn kinf() -> impl Strategy<Value = ComparisonFunction> {
    (prop::collection::vec((0.01f64..2.0, 0.01f64..3.0), 1..12), 0.01f64..4.0).prop_map(|(steps, tail)| {
        let mut samples = vec![(0.0, 0.0)];
        let (mut s, mut v) = (0.0, 0.0);
        for (ds, dv) in steps {
            s += ds;
            v += dv;
            samples.push((s, v));
        }
        make_class_k(&samples, GainKind::Kinf, Some(tail)).unwrap()
    })
}

fn chain_law() -> gtf_iss::FeedbackLaw {
    let spec: SystemSpec =
        toml::from_str("n = 2\nT = 10.0\nf = [\"x2\", \"u + sinT*x1^2\"]\nPhi = [\"1\", \"1\"]\n").unwrap();
    let sys = Arc::new(GtfSystem::from_spec(&spec).unwrap());
    synthesize_regular(sys, &SynthesisParams::default()).unwrap().law
}

proptest! {
    #[test]
    fn gains_are_strictly_increasing(g in kinf(), a in 0.0f64..30.0, b in 0.0f64..30.0) {
        prop_assert_eq!(g.eval(0.0), 0.0);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        if hi - lo > 1e-9 {
            prop_assert!(g.eval(lo) < g.eval(hi));
        }
        prop_assert!(g.verify_class(ClassKind::Kinf).passed());
    }

    #[test]
    fn inverse_undoes_eval(g in kinf(), s in 0.0f64..30.0) {
        let back = g.inverse(g.eval(s)).unwrap();
        prop_assert!((back - s).abs() <= 1e-9 * (1.0 + s));
    }

    #[test]
    fn composition_is_associative(f in kinf(), g in kinf(), h in kinf()) {
        let left = compose(&compose(&f, &g).unwrap(), &h).unwrap();
        let right = compose(&f, &compose(&g, &h).unwrap()).unwrap();
        for &s in left.knots().iter().chain(right.knots()) {
            let (a, b) = (left.eval(s), right.eval(s));
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "s = {}: {} vs {}", s, a, b);
        }
    }

    #[test]
    fn next_gain_dominates_on_the_tabulated_range(g in kinf(), frac in 0.0f64..=1.0) {
        let next = next_gain(&g).unwrap();
        let s = frac * g.last_knot();
        for &k in g.knots() {
            prop_assert!((next.eval(k) - (g.eval(k) + k * k)).abs() <= 1e-9 * (1.0 + k * k));
        }
        prop_assert!(next.eval(s) >= g.eval(s) + s * s - 1e-9 * (1.0 + s * s));
    }

    #[test]
    fn envelope_never_drops_when_data_grows(
        pairs in prop::collection::vec((0.001f64..5.0, 0.0f64..5.0), 1..20),
        extra in (0.001f64..5.0, 0.0f64..5.0),
        probe in 0.0f64..6.0,
    ) {
        let before = fit_envelope(&pairs, 1e-3);
        let mut more = pairs.clone();
        more.push(extra);
        let after = fit_envelope(&more, 1e-3);
        prop_assert!(after.eval(probe) >= before.eval(probe) - 1e-12);
        for &(s, peak) in &pairs {
            prop_assert!(before.eval(s) >= peak - 1e-12);
        }
    }

    #[test]
    fn winding_of_powers(k in -6i64..=6, scale in 0.1f64..10.0, turn in 0.0f64..(2.0 * PI)) {
        let map = |x: [f64; 2]| {
            let a = k as f64 * x[1].atan2(x[0]) + turn;
            [scale * a.cos(), scale * a.sin()]
        };
        for m in [64, 128, 256] {
            let samples = CircleMapSamples::sample(m, map).unwrap();
            prop_assert_eq!(winding_number(&samples, TOL_ZERO).unwrap(), k);
        }
    }

    #[test]
    fn transition_and_collar_phase_stay_in_unit_interval(x in -5.0f64..5.0, t in -50.0f64..50.0, sweep in 0.001f64..0.5) {
        let w = transition(x);
        prop_assert!((0.0..=1.0).contains(&w));
        prop_assert!(transition(x + 0.1) >= w);
        let collar = Collar { r_a: 0.5, r_p: 0.7, r_bar: 0.75, width: 0.5, sweep };
        let p = collar.phase(t, 10.0);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((collar.phase(t + 10.0, 10.0) - p).abs() < 1e-9);
    }

    #[test]
    fn linear_decay_matches_exponential(x0 in -5.0f64..5.0, rate in 0.1f64..3.0) {
        let field = FnField { dim: 1, channels: 1, f: move |_t: f64, x: &[f64], _d: &[f64]| vec![-rate * x[0]] };
        let tr = integrate(&field, &[x0], 0.0, 2.0, StepSpec::new(0.01), &DisturbanceSignal::zero(1)).unwrap();
        let exact = x0 * (-2.0 * rate).exp();
        prop_assert!((tr.last()[0] - exact).abs() <= 1e-8 * (1.0 + x0.abs()));
    }

    #[test]
    fn disturbances_respect_their_amplitude(amp in 0.0f64..3.0, dwell in 0.05f64..2.0, seed in any::<u64>()) {
        let d = gtf_iss::system::make_disturbance(DisturbanceKind::PiecewiseRandom, amp, dwell, seed, 10.0, 2).unwrap();
        prop_assert!(d.linf() <= amp + 1e-15);
        for v in d.values() {
            prop_assert!(v.iter().all(|x| x.abs() <= d.linf()));
        }
        let again = gtf_iss::system::make_disturbance(DisturbanceKind::PiecewiseRandom, amp, dwell, seed, 10.0, 2).unwrap();
        prop_assert_eq!(d, again);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transform_round_trips(x1 in -3.0f64..3.0, x2 in -3.0f64..3.0, t in 0.0f64..10.0) {
        let law = chain_law();
        let z = law.to_transformed(t, &[x1, x2]);
        let x = law.from_transformed(t, &z);
        prop_assert!((x[0] - x1).abs() < 1e-9 && (x[1] - x2).abs() < 1e-9);
        prop_assert!((law.control(t, &[x1, x2]) - law.control(t + 10.0, &[x1, x2])).abs() < 1e-9);
    }
}
