//! Grid checks of dissipation inequalities and ensemble checks of stability
//! envelopes and asymptotic gains.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backstepping::FeedbackLaw;
use crate::comparison::{make_class_k, ClassCheck, ClassKind, ComparisonFunction, GainKind};
use crate::extended::{ExtendedSubsystem, StageMap};
use crate::numerics::{dot, linspace, norm};
use crate::simulation::{sample_ball, Ensemble, Trajectory};

pub const DEFAULT_DISSIPATION_TOL: f64 = 1e-6;
pub const DEFAULT_UGS_TOL: f64 = 1e-6;
pub const DEFAULT_AG_TOL: f64 = 1e-3;
pub const DEFAULT_TAIL_FRACTION: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertError {
    #[error("tail window holds {samples} samples with fraction {fraction}; need at least 2")]
    HorizonTooShort { fraction: f64, samples: usize },
    #[error("reports come from different ensembles: {ugs} vs {ag}")]
    EnsembleMismatch { ugs: String, ag: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Box,
    Ball,
}

/// Sampling plan for a dissipation check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissipationGrid {
    pub t_samples: usize,
    pub half_width: f64,
    pub y_samples: usize,
    pub region: Region,
    /// Disturbance magnitudes range over `[-delta_radius, delta_radius]`.
    pub delta_radius: f64,
    pub delta_samples: usize,
    pub tol: f64,
}

impl DissipationGrid {
    pub fn new(half_width: f64) -> Self {
        DissipationGrid {
            t_samples: 9,
            half_width,
            y_samples: 21,
            region: Region::Box,
            delta_radius: 2.0,
            delta_samples: 9,
            tol: DEFAULT_DISSIPATION_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissipationWitness {
    pub t: f64,
    pub y: Vec<f64>,
    pub delta: Vec<f64>,
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissipationReport {
    pub grid: DissipationGrid,
    pub nodes: usize,
    pub pass_fraction: f64,
    /// Largest `LHS - RHS` over all nodes.
    pub worst_excess: f64,
    pub witness: Option<DissipationWitness>,
    pub tol: f64,
}

impl DissipationReport {
    pub fn passed(&self, min_fraction: f64) -> bool {
        self.pass_fraction >= min_fraction
    }
}

/// Drift and disturbance map of a closed loop in `y`.
pub trait ClosedField: Sync {
    fn dim(&self) -> usize;
    fn channels(&self) -> usize;
    fn period(&self) -> f64;
    fn eval(&self, t: f64, y: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>);
}

/// Extended subsystem with its control set to `law(t, y)`.
pub struct StageLoop<'a> {
    pub ext: &'a ExtendedSubsystem,
    pub law: &'a dyn StageMap,
}

impl ClosedField for StageLoop<'_> {
    fn dim(&self) -> usize {
        self.ext.dim()
    }

    fn channels(&self) -> usize {
        self.ext.channels()
    }

    fn period(&self) -> f64 {
        self.ext.period()
    }

    fn eval(&self, t: f64, y: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let f = self.ext.field(t, y, self.law.eval(t, y));
        (f.psi, f.phi)
    }
}

fn grid_points(dim: usize, half: f64, samples: usize, region: Region) -> Vec<Vec<f64>> {
    let axis = linspace(-half, half, samples);
    let mut pts = vec![Vec::new()];
    for _ in 0..dim {
        pts = pts
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |a| {
                    let mut q = p.clone();
                    q.push(*a);
                    q
                })
            })
            .collect();
    }
    if region == Region::Ball {
        pts.retain(|p| norm(p) <= half * (1.0 + 1e-12));
    }
    pts
}

/// Disturbance samples: multiples of the worst-case direction plus axis samples.
fn delta_samples(worst_dir: &[f64], radius: f64, count: usize) -> Vec<Vec<f64>> {
    let mags = linspace(-radius, radius, count);
    let channels = worst_dir.len();
    let mut out: Vec<Vec<f64>> = mags.iter().map(|s| worst_dir.iter().map(|c| c * s).collect()).collect();
    if channels > 1 {
        for j in 0..channels {
            for s in &mags {
                let mut d = vec![0.0; channels];
                d[j] = *s;
                out.push(d);
            }
        }
    }
    out
}

/// Checks `2⟨y, ψ + φΔ⟩ ≤ -|y|² + γ(|Δ|)` on the grid.
pub fn check_dissipation(
    field: &dyn ClosedField,
    gamma: &ComparisonFunction,
    grid: &DissipationGrid,
) -> DissipationReport {
    let ts = linspace(0.0, field.period(), grid.t_samples.max(1));
    let ys = grid_points(field.dim(), grid.half_width, grid.y_samples.max(1), grid.region);
    let per_node: Vec<(usize, usize, f64, Option<DissipationWitness>)> = ts
        .par_iter()
        .flat_map_iter(|&t| ys.iter().map(move |y| (t, y)))
        .map(|(t, y)| {
            let (psi, phi) = field.eval(t, y);
            let drift = 2.0 * dot(y, &psi);
            // coefficient of Δ in the left-hand side: 2 φᵀ y
            let coef: Vec<f64> = (0..field.channels())
                .map(|j| 2.0 * y.iter().zip(&phi).map(|(a, row)| a * row[j]).sum::<f64>())
                .collect();
            let cn = norm(&coef);
            let dir: Vec<f64> = if cn > 0.0 {
                coef.iter().map(|c| c / cn).collect()
            } else {
                let mut e = vec![0.0; coef.len()];
                e[0] = 1.0;
                e
            };
            let v = dot(y, y);
            let (mut nodes, mut pass, mut worst, mut witness) = (0, 0, f64::NEG_INFINITY, None);
            for delta in delta_samples(&dir, grid.delta_radius, grid.delta_samples.max(1)) {
                let lhs = drift + dot(&coef, &delta);
                let rhs = -v + gamma.eval(norm(&delta));
                let excess = if lhs.is_finite() { lhs - rhs } else { f64::INFINITY };
                nodes += 1;
                if excess <= grid.tol {
                    pass += 1;
                }
                if excess > worst {
                    worst = excess;
                    witness = Some(DissipationWitness { t, y: y.clone(), delta, excess });
                }
            }
            (nodes, pass, worst, witness)
        })
        .collect();
    let nodes: usize = per_node.iter().map(|p| p.0).sum();
    let passed: usize = per_node.iter().map(|p| p.1).sum();
    let (worst, witness) =
        per_node.into_iter().fold((f64::NEG_INFINITY, None), |acc, p| if p.2 > acc.0 { (p.2, p.3) } else { acc });
    let pass_fraction = if nodes == 0 { 1.0 } else { passed as f64 / nodes as f64 };
    DissipationReport {
        grid: grid.clone(),
        nodes,
        pass_fraction,
        worst_excess: worst,
        witness: if passed < nodes { witness } else { None },
        tol: grid.tol,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunWitness {
    pub run: usize,
    pub time: f64,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UgsReport {
    pub ensemble_id: String,
    pub upsilon: ComparisonFunction,
    pub fitted: bool,
    pub class_k: bool,
    pub violations: usize,
    /// Largest `|x(t)| / max{Υ(|ξ|), Υ(‖Δ‖)}` seen (0/0 counts as 0).
    pub max_ratio: f64,
    pub witness: Option<RunWitness>,
}

impl UgsReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.class_k
    }
}

/// How `check_ugs` obtains its envelope.
#[derive(Debug, Clone, Copy)]
pub enum UgsBound<'a> {
    Supplied(&'a ComparisonFunction),
    /// Fit the minimal monotone envelope plus `strictness · s`.
    Fit {
        strictness: f64,
    },
}

fn size_of_data(tr: &Trajectory, center: &[f64]) -> f64 {
    shifted_norm(tr.initial(), center).max(tr.disturbance_linf)
}

fn shifted_norm(x: &[f64], center: &[f64]) -> f64 {
    x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Envelope `s ↦ max_i peak_i · min(1, s / s_i) + strictness · s` of
/// `(size, peak)` pairs: the smallest maximum of ramps through the data, so
/// adding a pair never lowers it. Pairs at size 0 raise every `s > 0`.
pub fn fit_envelope(pairs: &[(f64, f64)], strictness: f64) -> ComparisonFunction {
    let mut sorted: Vec<(f64, f64)> =
        pairs.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite() && p.0 >= 0.0).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let floor = sorted.iter().filter(|p| p.0 == 0.0).map(|p| p.1).fold(0.0, f64::max);
    let points: Vec<(f64, f64)> = sorted.into_iter().filter(|p| p.0 > 0.0).collect();
    let ramps = |s: f64| points.iter().map(|&(si, pi)| pi * (s / si).min(1.0)).fold(floor, f64::max);
    let mut knots: Vec<f64> = points.iter().map(|p| p.0).collect();
    // Between consecutive sizes the envelope is max(flat part, rising line).
    let mut lo = 0.0;
    for (idx, &(si, _)) in points.iter().enumerate() {
        let flat = points[..idx].iter().map(|p| p.1).fold(floor, f64::max);
        let slope = points[idx..].iter().map(|p| p.1 / p.0).fold(0.0, f64::max);
        if slope > 0.0 {
            let cross = flat / slope;
            if cross > lo && cross < si {
                knots.push(cross);
            }
        }
        lo = si;
    }
    if knots.is_empty() {
        knots.push(1.0);
    }
    knots.sort_by(f64::total_cmp);
    knots.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
    let mut samples = vec![(0.0, 0.0)];
    for s in knots {
        samples.push((s, ramps(s) + strictness * s));
    }
    let slope = strictness.max(0.0);
    make_class_k(&samples, GainKind::K, Some(slope))
        .or_else(|_| make_class_k(&samples, GainKind::N, Some(slope)))
        .expect("envelope samples are sorted and non-decreasing")
}

/// Checks `|x(t) - x*| ≤ max{Υ(|ξ - x*|), Υ(‖Δ‖)}` along every run.
pub fn check_ugs(ensemble: &Ensemble, center: &[f64], bound: UgsBound<'_>, tol: f64) -> UgsReport {
    let (upsilon, fitted, class_k) = match bound {
        UgsBound::Supplied(g) => (g.clone(), false, g.verify_class(ClassKind::K).passed()),
        UgsBound::Fit { strictness } => {
            let pairs: Vec<(f64, f64)> = ensemble
                .runs
                .iter()
                .filter(|r| r.completed())
                .map(|r| {
                    (size_of_data(r, center), r.states.iter().map(|s| shifted_norm(s, center)).fold(0.0, f64::max))
                })
                .collect();
            let zero_peak = pairs.iter().any(|&(s, p)| s == 0.0 && p > 0.0);
            let g = fit_envelope(&pairs, strictness);
            let ok = !zero_peak && g.verify_class(ClassKind::K).passed();
            (g, true, ok)
        }
    };
    let mut violations = 0;
    let mut max_ratio: f64 = 0.0;
    let mut witness = None;
    for (i, run) in ensemble.runs.iter().enumerate() {
        let b = upsilon.eval(size_of_data(run, center));
        let mut violated = false;
        for (t, x) in run.times.iter().zip(&run.states) {
            let v = shifted_norm(x, center);
            let ratio = if b > 0.0 {
                v / b
            } else if v > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            if ratio > max_ratio {
                max_ratio = ratio;
            }
            if !violated && v > b * (1.0 + tol) {
                violated = true;
                witness.get_or_insert(RunWitness { run: i, time: *t, value: v, bound: b });
            }
        }
        if !run.completed() && !violated {
            violated = true;
            max_ratio = f64::INFINITY;
            witness.get_or_insert(RunWitness {
                run: i,
                time: *run.times.last().unwrap_or(&0.0),
                value: f64::INFINITY,
                bound: b,
            });
        }
        violations += violated as usize;
    }
    UgsReport { ensemble_id: ensemble.id.clone(), upsilon, fitted, class_k, violations, max_ratio, witness }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgRun {
    pub limsup: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgReport {
    pub ensemble_id: String,
    pub tail_fraction: f64,
    pub tol: f64,
    pub runs: Vec<AgRun>,
    pub passed: bool,
    pub witness: Option<usize>,
}

/// Estimates `limsup |x(t) - x*|` by the maximum over the final
/// `tail_fraction` of each run and compares it with `γ(‖Δ‖) + tol`.
pub fn check_ag(
    ensemble: &Ensemble,
    center: &[f64],
    gamma: &dyn Fn(f64) -> f64,
    tail_fraction: f64,
    tol: f64,
) -> Result<AgReport, CertError> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(CertError::HorizonTooShort { fraction: tail_fraction, samples: 0 });
    }
    let mut runs = Vec::with_capacity(ensemble.runs.len());
    for run in &ensemble.runs {
        let bound = gamma(run.disturbance_linf);
        if !run.completed() {
            runs.push(AgRun { limsup: f64::INFINITY, bound, pass: false });
            continue;
        }
        let (t0, t1) = (run.times[0], *run.times.last().unwrap());
        let start = t1 - tail_fraction * (t1 - t0);
        let tail: Vec<f64> = run
            .times
            .iter()
            .zip(&run.states)
            .filter(|(t, _)| **t >= start - 1e-12 * t1.abs().max(1.0))
            .map(|(_, x)| shifted_norm(x, center))
            .collect();
        if tail.len() < 2 {
            return Err(CertError::HorizonTooShort { fraction: tail_fraction, samples: tail.len() });
        }
        let limsup = tail.iter().copied().fold(0.0, f64::max);
        runs.push(AgRun { limsup, bound, pass: limsup <= bound + tol });
    }
    let witness = runs.iter().position(|r| !r.pass);
    Ok(AgReport { ensemble_id: ensemble.id.clone(), tail_fraction, tol, passed: witness.is_none(), runs, witness })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssVerdict {
    pub ensemble_id: String,
    pub ugs: bool,
    pub ag: bool,
    pub iss: bool,
}

/// Stability plus asymptotic gain gives semi-uniform ISS.
pub fn iss_verdict(ugs: &UgsReport, ag: &AgReport) -> Result<IssVerdict, CertError> {
    if ugs.ensemble_id != ag.ensemble_id {
        return Err(CertError::EnsembleMismatch { ugs: ugs.ensemble_id.clone(), ag: ag.ensemble_id.clone() });
    }
    let (u, a) = (ugs.passed(), ag.passed);
    Ok(IssVerdict { ensemble_id: ugs.ensemble_id.clone(), ugs: u, ag: a, iss: u && a })
}

/// Gain in plant coordinates of a dissipation gain on `V = |z|²`: the bound
/// `limsup V ≤ γ(s)` confines `z` to the ball of radius `√γ(s)`, and the gain
/// is the largest `|x - x*|` over that ball, sampled over one period.
#[derive(Debug, Clone)]
pub struct PlantGain {
    gamma: ComparisonFunction,
    times: Vec<f64>,
    /// Points of the closed unit ball in transformed coordinates.
    points: Vec<Vec<f64>>,
}

impl PlantGain {
    pub fn new(law: &FeedbackLaw, gamma: ComparisonFunction, directions: usize, t_samples: usize) -> Self {
        let n = law.system().n();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut points = Vec::with_capacity(4 * directions);
        for _ in 0..directions {
            let mut d = sample_ball(&mut rng, n, 1.0);
            let len = norm(&d);
            if len > 1e-9 {
                d.iter_mut().for_each(|v| *v /= len);
            }
            for frac in [0.25, 0.5, 0.75, 1.0] {
                points.push(d.iter().map(|v| v * frac).collect());
            }
        }
        let period = law.period();
        let times = (0..t_samples.max(1)).map(|i| period * i as f64 / t_samples.max(1) as f64).collect();
        PlantGain { gamma, times, points }
    }

    pub fn eval(&self, law: &FeedbackLaw, s: f64) -> f64 {
        let radius = self.gamma.eval(s).max(0.0).sqrt();
        if radius == 0.0 {
            return 0.0;
        }
        let star = law.system().x_star();
        let mut best: f64 = 0.0;
        for &t in &self.times {
            for p in &self.points {
                let z: Vec<f64> = p.iter().map(|v| v * radius).collect();
                let x = law.from_transformed(t, &z);
                let d: Vec<f64> = x.iter().zip(star).map(|(a, b)| a - b).collect();
                best = best.max(norm(&d));
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{run_ensemble, DisturbanceFamily, EnsembleSpec, FnField, DEFAULT_BLOWUP_RADIUS};
    use crate::system::DisturbanceKind;

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

    struct Unstable;

    impl ClosedField for Unstable {
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
            (vec![y[0]], vec![vec![1.0]])
        }
    }

    fn square() -> ComparisonFunction {
        ComparisonFunction::squared(&linspace(0.0, 4.0, 401)).unwrap()
    }

    #[test]
    fn completing_the_square() {
        let mut grid = DissipationGrid::new(2.0);
        grid.delta_radius = 2.0;
        let report = check_dissipation(&Decay, &square(), &grid);
        assert_eq!(report.pass_fraction, 1.0);
        assert!(report.witness.is_none());
    }

    #[test]
    fn zero_disturbance_slice_is_strict_decay() {
        let mut grid = DissipationGrid::new(2.0);
        grid.delta_radius = 0.0;
        grid.delta_samples = 1;
        let report = check_dissipation(&Decay, &square(), &grid);
        // -2y² ≤ -y² with slack y²
        assert!(report.worst_excess <= 0.0);
    }

    #[test]
    fn unstable_loop_fails_with_witness() {
        let report = check_dissipation(&Unstable, &square(), &DissipationGrid::new(2.0));
        assert!(report.pass_fraction < 1.0);
        let w = report.witness.unwrap();
        assert!(w.excess > 0.0);
    }

    #[test]
    fn aligned_disturbance_dominates_interior() {
        // Interior samples along the worst direction never beat the boundary sample.
        let g = square();
        let y = 0.7;
        let lhs = |d: f64| 2.0 * y * (-y + d) + y * y - g.eval(d.abs());
        for d in linspace(-1.0, 1.0, 41) {
            assert!(lhs(d) <= 0.0);
        }
    }

    fn decay_ensemble(amplitude: f64, horizon: f64) -> Ensemble {
        let field = FnField { dim: 1, channels: 1, f: |_t: f64, x: &[f64], d: &[f64]| vec![-x[0] + d[0]] };
        let spec = EnsembleSpec {
            radius: 2.0,
            count: 30,
            seed: 3,
            t0: 0.0,
            horizon,
            h: 0.01,
            blowup_radius: DEFAULT_BLOWUP_RADIUS,
            disturbance: DisturbanceFamily {
                kind: DisturbanceKind::PiecewiseRandom,
                amplitude,
                dwell: 0.3,
                channels: None,
            },
        };
        run_ensemble(&field, &[0.0], &spec).unwrap()
    }

    #[test]
    fn decay_is_iss() {
        let ens = decay_ensemble(0.5, 12.0);
        let id = ComparisonFunction::identity();
        let ugs = check_ugs(&ens, &[0.0], UgsBound::Supplied(&id), DEFAULT_UGS_TOL);
        assert_eq!(ugs.violations, 0);
        let ag = check_ag(&ens, &[0.0], &|s| s, DEFAULT_TAIL_FRACTION, DEFAULT_AG_TOL).unwrap();
        assert!(ag.passed);
        assert!(iss_verdict(&ugs, &ag).unwrap().iss);
    }

    #[test]
    fn fitted_envelope_covers_data_and_is_monotone_in_data() {
        let ens = decay_ensemble(0.5, 5.0);
        let ugs = check_ugs(&ens, &[0.0], UgsBound::Fit { strictness: 1e-6 }, DEFAULT_UGS_TOL);
        assert!(ugs.passed(), "{ugs:?}");
        let pairs = [(0.5, 0.4), (1.0, 0.9), (2.0, 1.5)];
        let a = fit_envelope(&pairs, 1e-6);
        let b = fit_envelope(&[pairs[0], pairs[1], pairs[2], (0.8, 1.2)], 1e-6);
        for s in linspace(0.0, 3.0, 61) {
            assert!(b.eval(s) >= a.eval(s) - 1e-12);
        }
    }

    #[test]
    fn zero_gain_fails_ag() {
        let ens = decay_ensemble(0.5, 12.0);
        let ag = check_ag(&ens, &[0.0], &|_| 0.0, DEFAULT_TAIL_FRACTION, DEFAULT_AG_TOL).unwrap();
        assert!(!ag.passed);
        assert!(ag.witness.is_some());
    }

    #[test]
    fn short_horizon_and_mismatch() {
        let ens = decay_ensemble(0.0, 0.01);
        assert!(matches!(check_ag(&ens, &[0.0], &|s| s, 0.2, DEFAULT_AG_TOL), Err(CertError::HorizonTooShort { .. })));
        let a = decay_ensemble(0.5, 12.0);
        let mut b = a.clone();
        b.id = "other".into();
        let id = ComparisonFunction::identity();
        let ugs = check_ugs(&a, &[0.0], UgsBound::Supplied(&id), DEFAULT_UGS_TOL);
        let ag = check_ag(&b, &[0.0], &|s| s, 0.2, DEFAULT_AG_TOL).unwrap();
        assert!(matches!(iss_verdict(&ugs, &ag), Err(CertError::EnsembleMismatch { .. })));
    }

    #[test]
    fn blowup_is_a_violation() {
        let field = FnField { dim: 1, channels: 1, f: |_t: f64, x: &[f64], _d: &[f64]| vec![x[0] * x[0]] };
        let spec = EnsembleSpec {
            radius: 0.0,
            count: 1,
            seed: 0,
            t0: 0.0,
            horizon: 1.0,
            h: 1e-3,
            blowup_radius: DEFAULT_BLOWUP_RADIUS,
            disturbance: DisturbanceFamily::zero(),
        };
        let mut ens = run_ensemble(&field, &[2.0], &spec).unwrap();
        ens.runs[0].disturbance_linf = 0.0;
        let id = ComparisonFunction::identity();
        let ugs = check_ugs(&ens, &[0.0], UgsBound::Supplied(&id), DEFAULT_UGS_TOL);
        assert_eq!(ugs.violations, 1);
        assert!(ugs.witness.is_some());
    }
}
