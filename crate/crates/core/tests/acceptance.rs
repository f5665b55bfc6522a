//! Acceptance criteria 1-10. Prints one line per criterion and exits non-zero
//! if any fails.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use gtf_iss::backstepping::{synthesize, synthesize_local_feedback, synthesize_regular, Synthesis, SynthesisParams};
use gtf_iss::certification::{
    check_ag, check_dissipation, check_ugs, iss_verdict, ClosedField, DissipationGrid, PlantGain, UgsBound,
};
use gtf_iss::comparison::{compose, make_class_k, next_gain, ClassCheck, ClassKind, ComparisonFunction, GainKind};
use gtf_iss::cover::{build_cover_law, verify_funnel, FunnelSpec};
use gtf_iss::extended::base_subsystem;
use gtf_iss::obstruction::{static_obstruction_check, winding_number, CircleMapSamples, ObstructionVerdict, TOL_ZERO};
use gtf_iss::simulation::{
    integrate, member_seed, run_ensemble, sample_ball, ClosedLoop, DisturbanceFamily, Ensemble, EnsembleSpec, FnField,
    StepSpec, Trajectory, DEFAULT_BLOWUP_RADIUS,
};
use gtf_iss::system::{make_disturbance, DisturbanceKind, DisturbanceSignal, GtfSystem, SystemSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn plant(text: &str) -> Arc<GtfSystem> {
    let spec: SystemSpec = toml::from_str(text).unwrap();
    Arc::new(GtfSystem::from_spec(&spec).unwrap())
}

const CHAIN: &str = "n = 2\nT = 10.0\nf = [\"x2\", \"u\"]\nPhi = [\"1\", \"1\"]\n";
const EXAMPLE_ONE: &str = "n = 2\nT = 10.0\nf = [\"x2^3 - (1 - x1^2)*x2\", \"u\"]\nPhi = [\"0\", \"1\"]\n";

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

fn comparison_suite() -> Outcome {
    let start = Instant::now();
    let runner = || TestRunner::new(Config { cases: 250, failure_persistence: None, ..Config::default() });
    let cases = std::cell::Cell::new(0usize);
    let mut failures = Vec::new();
    let monotone = runner()
        .run(&(kinf(), 0.0f64..30.0, 0.0f64..30.0), |(g, a, b)| {
            cases.set(cases.get() + 1);
            prop_assert_eq!(g.eval(0.0), 0.0);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if hi - lo > 1e-9 {
                prop_assert!(g.eval(lo) < g.eval(hi));
            }
            Ok(())
        })
        .map_err(|e| e.to_string());
    failures.push(("monotone", monotone));
    let origin = runner()
        .run(&kinf(), |g| {
            cases.set(cases.get() + 1);
            prop_assert_eq!(g.eval(0.0), 0.0);
            prop_assert!(g.verify_class(ClassKind::Kinf).passed());
            Ok(())
        })
        .map_err(|e| e.to_string());
    failures.push(("origin", origin));
    let assoc = runner()
        .run(&(kinf(), kinf(), kinf()), |(f, g, h)| {
            cases.set(cases.get() + 1);
            let left = compose(&compose(&f, &g).unwrap(), &h).unwrap();
            let right = compose(&f, &compose(&g, &h).unwrap()).unwrap();
            for &s in left.knots().iter().chain(right.knots()) {
                prop_assert!((left.eval(s) - right.eval(s)).abs() <= 1e-9 * (1.0 + left.eval(s).abs()));
            }
            Ok(())
        })
        .map_err(|e| e.to_string());
    failures.push(("associativity", assoc));
    let dominance = runner()
        .run(&(kinf(), 0.0f64..=1.0), |(g, frac)| {
            cases.set(cases.get() + 1);
            let next = next_gain(&g).unwrap();
            let s = frac * g.last_knot();
            prop_assert!(next.eval(s) >= g.eval(s) + s * s - 1e-9 * (1.0 + s * s));
            Ok(())
        })
        .map_err(|e| e.to_string());
    failures.push(("dominance", dominance));
    let elapsed = start.elapsed();
    let failed: Vec<String> = failures
        .into_iter()
        .filter_map(|(n, r): (&str, Result<(), String>)| r.err().map(|e| format!("{n}: {e}")))
        .collect();
    let pass = failed.is_empty() && cases.get() >= 1000 && elapsed < Duration::from_secs(5);
    let note = if failed.is_empty() { String::new() } else { format!("; {failed:?}") };
    outcome(pass, format!("{} cases in {elapsed:.2?}{note}", cases.get()))
}

struct Decay;

impl ClosedField for Decay {
    fn dim(&self) -> usize {
        1
    }
    fn channels(&self) -> usize {
        1
    }
    fn period(&self) -> f64 {
        1.0
    }
    fn eval(&self, _t: f64, y: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        (vec![-y[0]], vec![vec![1.0]])
    }
}

fn dissipation_oracle() -> Outcome {
    let start = Instant::now();
    let gamma = ComparisonFunction::squared(&ComparisonFunction::uniform_knots(0.01, 400)).unwrap();
    let grid = DissipationGrid {
        t_samples: 21,
        y_samples: 101,
        delta_samples: 101,
        delta_radius: 3.0,
        ..DissipationGrid::new(3.0)
    };
    let report = check_dissipation(&Decay, &gamma, &grid);
    let elapsed = start.elapsed();
    let pass = report.pass_fraction == 1.0 && report.nodes == 21 * 101 * 101 && elapsed < Duration::from_secs(10);
    outcome(pass, format!("{} nodes, pass fraction {}, {elapsed:.2?}", report.nodes, report.pass_fraction))
}

fn chain_backstepping() -> Outcome {
    let params = SynthesisParams::default();
    let syn = synthesize_regular(plant(CHAIN), &params).unwrap();
    let worst_fraction = syn.stages.iter().map(|s| s.report.pass_fraction).fold(1.0, f64::min);
    let tol_ok = syn.stages.iter().all(|s| s.report.tol == 1e-6);
    let law = &syn.law;
    let ext = law.transform();
    let last = law.stage(2).clone();
    let sys = law.system().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for run in 0..5 {
        let x0 = sample_ball(&mut rng, 2, 2.0);
        let dist = make_disturbance(DisturbanceKind::PiecewiseRandom, 0.5, 0.7, member_seed(3, run), 10.0, 2).unwrap();
        let t0 = 10.0 * rng.gen::<f64>();
        let plant_loop = ClosedLoop { sys: &sys, controller: law };
        let xs = integrate(&plant_loop, &x0, t0, 10.0, StepSpec::new(1e-3), &dist).unwrap();
        let field = FnField {
            dim: 2,
            channels: 2,
            f: |t: f64, y: &[f64], d: &[f64]| {
                let f = ext.field(t, y, last.eval(t, y));
                f.psi
                    .iter()
                    .zip(&f.phi)
                    .map(|(p, row)| p + row.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
                    .collect()
            },
        };
        let zs = integrate(&field, &law.to_transformed(t0, &x0), t0, 10.0, StepSpec::new(1e-3), &dist).unwrap();
        for ((t, x), z) in xs.times.iter().zip(&xs.states).zip(&zs.states) {
            let via_plant = law.to_transformed(*t, x);
            worst = worst.max(via_plant.iter().zip(z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    let pass = worst_fraction >= 0.999 && tol_ok && worst <= 1e-5;
    outcome(pass, format!("worst stage pass fraction {worst_fraction}, two-route error {worst:.2e}"))
}

fn gain_recursion() -> Outcome {
    // Only the gains matter here, so the stage screening grid is kept coarse.
    let mut params = SynthesisParams { t_samples: 3, y_samples: 5, ..SynthesisParams::default() };
    params.dissipation.t_samples = 3;
    params.dissipation.y_samples = 5;
    params.dissipation.delta_samples = 3;
    let mut details = Vec::new();
    let mut pass = true;
    for (n, text) in [
        (2, CHAIN.to_string()),
        (4, "n = 4\nT = 10.0\nf = [\"x2\", \"x3\", \"x4\", \"u\"]\nPhi = [\"1\", \"1\", \"1\", \"1\"]\n".to_string()),
    ] {
        let syn = synthesize_regular(plant(&text), &params).unwrap();
        let g1 = &syn.gains[0];
        let gn = syn.gamma_n();
        let mut exact = true;
        let mut worst: f64 = 0.0;
        for (i, &s) in g1.knots().iter().enumerate() {
            let mut expect = g1.values()[i];
            for _ in 1..n {
                expect += s * s;
            }
            exact &= gn.knots()[i] == s && gn.values()[i] == expect;
            worst = worst.max((gn.values()[i] - (s * s + (n - 1) as f64 * s * s)).abs());
            exact &= g1.values()[i] == s * s;
        }
        pass &= exact && gn.knots().len() == g1.knots().len();
        details.push(format!("n = {n}: exact {exact}, |γ_n - n s²| max {worst:.1e}"));
    }
    outcome(pass, details.join("; "))
}

/// Integrates period by period from `x0` until `stop` holds, at most `periods` periods.
fn run_until(
    syn: &Synthesis,
    x0: &[f64],
    dist: &DisturbanceSignal,
    periods: usize,
    h: f64,
    mut stop: impl FnMut(&Trajectory, usize) -> bool,
) -> Vec<Trajectory> {
    let sys = syn.law.system().clone();
    let period = sys.period();
    let field = ClosedLoop { sys: &sys, controller: &syn.law };
    let mut x = x0.to_vec();
    let mut pieces = Vec::new();
    for p in 0..periods {
        let tr = integrate(&field, &x, p as f64 * period, period, StepSpec::new(h), dist).unwrap();
        x = tr.last().to_vec();
        let done = !tr.completed() || stop(&tr, p);
        pieces.push(tr);
        if done {
            break;
        }
    }
    pieces
}

/// Lifts a scalar signal onto the second (control) channel of a two-channel plant.
fn matched(scalar: DisturbanceSignal) -> DisturbanceSignal {
    let values = scalar.values().iter().map(|v| vec![0.0, v[0]]).collect();
    DisturbanceSignal::new(scalar.breakpoints().to_vec(), values).unwrap()
}

fn example_one() -> Outcome {
    let params = SynthesisParams::default();
    let syn = synthesize(plant(EXAMPLE_ONE), &params).unwrap();
    let period = syn.law.period();
    let h = period / 20000.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let starts: Vec<Vec<f64>> = (0..50).map(|_| sample_ball(&mut rng, 2, 2.0)).collect();
    let zero = DisturbanceSignal::zero(2);
    let entries: Vec<Option<f64>> = starts
        .par_iter()
        .map(|x0| {
            let pieces = run_until(&syn, x0, &zero, 20, h, |tr, _| tr.states.iter().any(|s| s[0].hypot(s[1]) <= 0.05));
            let last = pieces.last().unwrap();
            last.completed()
                .then(|| last.times.iter().zip(&last.states).find(|(_, s)| s[0].hypot(s[1]) <= 0.05).map(|(t, _)| *t))
                .flatten()
        })
        .collect();
    let converged = entries.iter().filter(|e| e.is_some()).count();
    let latest = entries.iter().flatten().copied().fold(0.0, f64::max);

    // Asymptotic gain with ‖δ‖ ≤ 0.1 on the matched channel.
    let gain = PlantGain::new(&syn.law, syn.gamma_n().clone(), 64, 8);
    let bound = gain.eval(&syn.law, 0.1);
    let tails: Vec<Trajectory> = starts
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let dist = matched(
                make_disturbance(DisturbanceKind::PiecewiseRandom, 0.1, 0.5, member_seed(17, i), 20.0 * period, 1)
                    .unwrap(),
            );
            let mut settled = None;
            let pieces = run_until(&syn, x0, &dist, 20, h, |tr, p| {
                if settled.is_none() && tr.states.iter().any(|s| s[0].hypot(s[1]) <= bound) {
                    settled = Some(p);
                }
                settled.is_some_and(|q| p >= q + 2)
            });
            let n = pieces.len();
            let keep = &pieces[n.saturating_sub(2)..];
            let mut joined = keep[0].clone();
            for piece in &keep[1..] {
                joined.times.extend_from_slice(&piece.times[1..]);
                joined.states.extend_from_slice(&piece.states[1..]);
                joined.controls.extend_from_slice(&piece.controls[1..]);
                joined.status = piece.status;
            }
            joined.disturbance_linf = dist.linf();
            joined
        })
        .collect();
    let ensemble = Ensemble { id: "example-one-ag".into(), runs: tails };
    let ag = check_ag(&ensemble, &[0.0, 0.0], &|s| gain.eval(&syn.law, s), 0.5, 0.0).unwrap();
    let worst_tail = ag.runs.iter().map(|r| r.limsup).fold(0.0, f64::max);
    let pass = converged == 50 && latest <= 20.0 * period && ag.passed;
    outcome(
        pass,
        format!(
            "{converged}/50 entered |x| <= 0.05 (latest t = {latest:.2}); AG tail max {worst_tail:.4} vs γ(0.1) = {bound:.4}, {}/50 pass",
            ag.runs.iter().filter(|r| r.pass).count()
        ),
    )
}

fn funnel_property() -> Outcome {
    let start = Instant::now();
    let params = SynthesisParams::default();
    let ext = base_subsystem(plant(CHAIN), params.h_diff);
    let local = synthesize_local_feedback(&ext, None, &params).unwrap();
    let (cover, law) = build_cover_law(&ext, None, &local, &params.cover).unwrap();
    let spec = FunnelSpec::default();
    let report = verify_funnel(&ext, &law, &cover, &local.gamma, &spec).unwrap();
    let elapsed = start.elapsed();
    let counted: usize = report.rows.iter().map(|r| r.runs - r.gated_out).sum();
    let pass = report.violations == 0
        && spec.tol <= 1e-6
        && spec.runs_per_q == 20
        && (cover.q_lo, cover.q_hi) == (-3, 6)
        && report.rows.len() == 10
        && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "{} violations over {} rows ({counted} counted runs), max excess {:.2e}, {} cells, {elapsed:.2?}",
            report.violations,
            report.rows.len(),
            report.max_violation,
            cover.cells.len()
        ),
    )
}

fn decay_ensemble(rate: f64, horizon: f64, seed: u64) -> Ensemble {
    let field = FnField { dim: 1, channels: 1, f: move |_t: f64, x: &[f64], d: &[f64]| vec![rate * x[0] + d[0]] };
    let spec = EnsembleSpec {
        radius: 2.0,
        count: 40,
        seed,
        t0: 0.0,
        horizon,
        h: 0.01,
        blowup_radius: DEFAULT_BLOWUP_RADIUS,
        disturbance: DisturbanceFamily {
            kind: DisturbanceKind::PiecewiseRandom,
            amplitude: 1.0,
            dwell: 0.5,
            channels: None,
        },
    };
    run_ensemble(&field, &[0.0], &spec).unwrap()
}

fn iss_verdicts() -> Outcome {
    let id = ComparisonFunction::identity();
    let mut lines = Vec::new();
    let mut pass = true;
    for horizon in [10.0, 20.0, 40.0] {
        let ens = decay_ensemble(-1.0, horizon, 7);
        let ugs = check_ugs(&ens, &[0.0], UgsBound::Supplied(&id), 1e-6);
        let ag = check_ag(&ens, &[0.0], &|s| s, 0.2, 1e-3).unwrap();
        let v = iss_verdict(&ugs, &ag).unwrap();
        pass &= ugs.violations == 0 && ag.passed && v.iss;
        lines.push(format!("H = {horizon}: ugs violations {}, ag {}, iss {}", ugs.violations, ag.passed, v.iss));
    }
    let unstable = decay_ensemble(1.0, 10.0, 7);
    let ugs = check_ugs(&unstable, &[0.0], UgsBound::Supplied(&id), 1e-6);
    let ag = check_ag(&unstable, &[0.0], &|s| s, 0.2, 1e-3).unwrap();
    let v = iss_verdict(&ugs, &ag).unwrap();
    pass &= !v.iss;
    lines.push(format!("zero feedback on ẋ = x + δ: iss {}", v.iss));
    outcome(pass, lines.join("; "))
}

fn obstruction() -> Outcome {
    let winding = |map: &dyn Fn([f64; 2]) -> [f64; 2], m: usize| {
        winding_number(&CircleMapSamples::sample(m, map).unwrap(), TOL_ZERO).unwrap()
    };
    let mut stable = true;
    let mut values = (0, 0, 0);
    for (i, m) in [90, 180, 360, 720, 1440, 2880].into_iter().enumerate() {
        let v = (winding(&|x| x, m), winding(&|_| [1.0, 0.0], m), winding(&|x| [-x[0], -x[1]], m));
        if i == 0 {
            values = v;
        }
        stable &= v == values;
    }
    let report = static_obstruction_check(|_| 1.0, 720);
    let pass = stable && values == (1, 0, 1) && report.verdict == ObstructionVerdict::Obstructed;
    outcome(
        pass,
        format!(
            "identity {}, constant {}, antipodal {}, stable {stable}, u ≡ 1: {:?}",
            values.0, values.1, values.2, report.verdict
        ),
    )
}

fn integrator_order() -> Outcome {
    let field = FnField { dim: 1, channels: 1, f: |_t: f64, x: &[f64], _d: &[f64]| vec![-x[0]] };
    let z = DisturbanceSignal::zero(1);
    let err = |h: f64| {
        let tr = integrate(&field, &[1.0], 0.0, 1.0, StepSpec::new(h), &z).unwrap();
        (tr.last()[0] - (-1.0f64).exp()).abs()
    };
    let ratios: Vec<f64> = [0.2, 0.1, 0.05].iter().map(|&h| err(h) / err(h / 2.0)).collect();
    let pass = ratios.iter().all(|r| (12.0..=20.0).contains(r));
    outcome(pass, format!("ratios {ratios:.3?}"))
}

fn determinism() -> Outcome {
    let csv = |ens: &Ensemble| {
        let mut bytes = Vec::new();
        for run in &ens.runs {
            run.write_csv(&mut bytes).unwrap();
        }
        bytes
    };
    let (a, b) = (decay_ensemble(-1.0, 10.0, 21), decay_ensemble(-1.0, 10.0, 21));
    let csv_same = csv(&a) == csv(&b);
    let report = |e: &Ensemble| {
        let ugs = check_ugs(e, &[0.0], UgsBound::Fit { strictness: 1e-3 }, 1e-6);
        serde_json::to_vec(&ugs).unwrap()
    };
    let json_same = report(&a) == report(&b);
    let params = SynthesisParams::default();
    let cover_json = || {
        let syn = synthesize(plant(EXAMPLE_ONE), &params).unwrap();
        serde_json::to_vec(syn.stages[0].cover.as_deref().unwrap()).unwrap()
    };
    let cover_same = cover_json() == cover_json();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("chain.toml"), CHAIN).unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "system = \"chain.toml\"\nseed = 4\n[simulate]\nradius = 2.0\ncount = 5\nhorizon = 10.0\nh = 0.01\n\
         disturbance = { kind = \"piecewise_random\", amplitude = 0.1, dwell = 0.5 }\n[certify]\n",
    )
    .unwrap();
    let run_cli = |out: &str| {
        let out = dir.path().join(out);
        for cmd in ["synthesize", "simulate", "certify"] {
            let code = gtf_iss::cli::main_with_args([
                "gtf-iss",
                cmd,
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]);
            assert_eq!(code, 0, "{cmd}");
        }
        let mut files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.iter().map(|p| (p.file_name().unwrap().to_owned(), std::fs::read(p).unwrap())).collect::<Vec<_>>()
    };
    let first = run_cli("first");
    let cli_same = first == run_cli("second");
    let pass = csv_same && json_same && cover_same && cli_same;
    outcome(
        pass,
        format!(
            "csv {csv_same}, report json {json_same}, cover json {cover_same}, cli artifacts {cli_same} ({} files)",
            first.len()
        ),
    )
}

type Criterion = fn() -> Outcome;

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 10] = [
        ("comparison-function suite", comparison_suite),
        ("dissipation oracle", dissipation_oracle),
        ("regular backstepping on the chain", chain_backstepping),
        ("gain recursion", gain_recursion),
        ("example 1 end to end", example_one),
        ("funnel property", funnel_property),
        ("UGS/AG/ISS verdict", iss_verdicts),
        ("obstruction", obstruction),
        ("integrator order", integrator_order),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let label = format!("criterion {:>2}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || label.ends_with(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        failed += !result.pass as usize;
        println!(
            "{label} {} {name}: {} [{:.1?}]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
