//! Fixed-step RK4 integration under piecewise-constant disturbances.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::norm;
use crate::system::{make_disturbance, DisturbanceKind, DisturbanceSignal, GtfSystem, SystemError};

pub const DEFAULT_BLOWUP_RADIUS: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("horizon {horizon} is not a multiple of the step {step}")]
    HorizonNotMultiple { horizon: f64, step: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    System(#[from] SystemError),
}

/// A state feedback `u(t, x)` acting on the plant.
pub trait Controller: Send + Sync {
    fn control(&self, t: f64, x: &[f64]) -> f64;
}

impl<F> Controller for F
where
    F: Fn(f64, &[f64]) -> f64 + Send + Sync,
{
    fn control(&self, t: f64, x: &[f64]) -> f64 {
        self(t, x)
    }
}

/// Right-hand side of a (possibly closed-loop) system.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn channels(&self) -> usize;
    /// Derivative and the control applied at `(t, x)`; `None` if non-finite.
    fn eval(&self, t: f64, x: &[f64], delta: &[f64]) -> Option<(Vec<f64>, f64)>;
}

/// Plant with `u = controller(t, x)`.
pub struct ClosedLoop<'a> {
    pub sys: &'a GtfSystem,
    pub controller: &'a dyn Controller,
}

impl VectorField for ClosedLoop<'_> {
    fn dim(&self) -> usize {
        self.sys.n()
    }

    fn channels(&self) -> usize {
        self.sys.total_channels()
    }

    fn eval(&self, t: f64, x: &[f64], delta: &[f64]) -> Option<(Vec<f64>, f64)> {
        let u = self.controller.control(t, x);
        if !u.is_finite() {
            return None;
        }
        self.sys.eval_rhs(t, x, u, delta).ok().map(|d| (d, u))
    }
}

/// Plant with a constant input.
pub struct OpenLoop<'a> {
    pub sys: &'a GtfSystem,
    pub u: f64,
}

impl VectorField for OpenLoop<'_> {
    fn dim(&self) -> usize {
        self.sys.n()
    }

    fn channels(&self) -> usize {
        self.sys.total_channels()
    }

    fn eval(&self, t: f64, x: &[f64], delta: &[f64]) -> Option<(Vec<f64>, f64)> {
        self.sys.eval_rhs(t, x, self.u, delta).ok().map(|d| (d, self.u))
    }
}

/// Vector field from a closure `(t, x, δ) ↦ ẋ`; the recorded control is 0.
pub struct FnField<F> {
    pub dim: usize,
    pub channels: usize,
    pub f: F,
}

impl<F> VectorField for FnField<F>
where
    F: Fn(f64, &[f64], &[f64]) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn eval(&self, t: f64, x: &[f64], delta: &[f64]) -> Option<(Vec<f64>, f64)> {
        let d = (self.f)(t, x, delta);
        d.iter().all(|v| v.is_finite()).then_some((d, 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum Status {
    Completed,
    /// `time` is the last recorded instant before the state left the blowup radius.
    Blowup {
        time: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<f64>,
    /// Sup norm of the disturbance that drove this run.
    pub disturbance_linf: f64,
    pub status: Status,
}

impl Trajectory {
    pub fn initial(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().unwrap()
    }

    pub fn completed(&self) -> bool {
        self.status == Status::Completed
    }

    pub fn max_norm(&self) -> f64 {
        self.states.iter().map(|s| norm(s)).fold(0.0, f64::max)
    }

    /// CSV with header `t,x1..xn,u`.
    pub fn write_csv(&self, mut out: impl Write) -> io::Result<()> {
        let n = self.states.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.push("u".into());
        writeln!(out, "{}", header.join(","))?;
        for ((t, x), u) in self.times.iter().zip(&self.states).zip(&self.controls) {
            let mut row = vec![t.to_string()];
            row.extend(x.iter().map(f64::to_string));
            row.push(u.to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSpec {
    pub h: f64,
    pub blowup_radius: f64,
}

impl StepSpec {
    pub fn new(h: f64) -> Self {
        StepSpec { h, blowup_radius: DEFAULT_BLOWUP_RADIUS }
    }
}

fn step_count(horizon: f64, h: f64) -> Result<usize, SimError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(SimError::BadStep(h));
    }
    let ratio = horizon / h;
    let steps = ratio.round();
    if !(horizon >= 0.0) || (ratio - steps).abs() > 1e-9 * steps.max(1.0) {
        return Err(SimError::HorizonNotMultiple { horizon, step: h });
    }
    Ok(steps as usize)
}

fn axpy(x: &[f64], k: &[f64], s: f64) -> Vec<f64> {
    x.iter().zip(k).map(|(a, b)| a + s * b).collect()
}

/// Classical RK4 from `(t0, x0)` over `horizon`, holding the disturbance at
/// each step's start value.
pub fn integrate(
    field: &dyn VectorField,
    x0: &[f64],
    t0: f64,
    horizon: f64,
    step: StepSpec,
    disturbance: &DisturbanceSignal,
) -> Result<Trajectory, SimError> {
    if x0.len() != field.dim() {
        return Err(SimError::DimensionMismatch(format!("x0 has {} entries, expected {}", x0.len(), field.dim())));
    }
    if disturbance.dims() != field.channels() {
        return Err(SimError::DimensionMismatch(format!(
            "disturbance has {} channels, expected {}",
            disturbance.dims(),
            field.channels()
        )));
    }
    let steps = step_count(horizon, step.h)?;
    let h = step.h;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps + 1);
    let mut x = x0.to_vec();
    let mut status = Status::Completed;
    for i in 0..=steps {
        let t = t0 + i as f64 * h;
        let delta = disturbance.at(t);
        let Some((k1, u)) = field.eval(t, &x, delta) else {
            status = Status::Blowup { time: t };
            break;
        };
        times.push(t);
        states.push(x.clone());
        controls.push(u);
        if i == steps {
            break;
        }
        let next = (|| {
            let (k2, _) = field.eval(t + h / 2.0, &axpy(&x, &k1, h / 2.0), delta)?;
            let (k3, _) = field.eval(t + h / 2.0, &axpy(&x, &k2, h / 2.0), delta)?;
            let (k4, _) = field.eval(t + h, &axpy(&x, &k3, h), delta)?;
            Some((0..x.len()).map(|j| x[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])).collect::<Vec<_>>())
        })();
        match next {
            Some(nx) if nx.iter().all(|v| v.is_finite()) && norm(&nx) <= step.blowup_radius => x = nx,
            _ => {
                status = Status::Blowup { time: t };
                break;
            }
        }
    }
    Ok(Trajectory { times, states, controls, disturbance_linf: disturbance.linf(), status })
}

/// How each ensemble member's disturbance is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceFamily {
    pub kind: DisturbanceKind,
    pub amplitude: f64,
    pub dwell: f64,
    /// Channels the drawn signal acts on; all channels when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<usize>>,
}

impl DisturbanceFamily {
    pub fn zero() -> Self {
        DisturbanceFamily { kind: DisturbanceKind::Zero, amplitude: 0.0, dwell: 1.0, channels: None }
    }

    pub fn draw(&self, seed: u64, horizon: f64, total: usize) -> Result<DisturbanceSignal, SystemError> {
        match &self.channels {
            None => make_disturbance(self.kind, self.amplitude, self.dwell, seed, horizon, total),
            Some(ch) => {
                make_disturbance(self.kind, self.amplitude, self.dwell, seed, horizon, ch.len())?.embed(total, ch)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub radius: f64,
    pub count: usize,
    pub seed: u64,
    pub t0: f64,
    pub horizon: f64,
    pub h: f64,
    #[serde(default = "default_blowup_radius")]
    pub blowup_radius: f64,
    pub disturbance: DisturbanceFamily,
}

fn default_blowup_radius() -> f64 {
    DEFAULT_BLOWUP_RADIUS
}

impl EnsembleSpec {
    /// Identifier shared by every report derived from this ensemble.
    pub fn id(&self) -> String {
        format!(
            "r{}-n{}-s{}-t{}-H{}-h{}-{:?}{}",
            self.radius,
            self.count,
            self.seed,
            self.t0,
            self.horizon,
            self.h,
            self.disturbance.kind,
            self.disturbance.amplitude
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub id: String,
    pub runs: Vec<Trajectory>,
}

/// Seed of the `i`-th member.
pub fn member_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

/// Uniform sample from the closed ball of `radius` in `dim` dimensions.
pub fn sample_ball(rng: &mut impl Rng, dim: usize, radius: f64) -> Vec<f64> {
    if dim == 0 {
        return Vec::new();
    }
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        if norm(&v) <= 1.0 {
            return v.into_iter().map(|x| x * radius).collect();
        }
    }
}

/// Runs `spec.count` independent trajectories, ordered by member index.
pub fn run_ensemble(field: &dyn VectorField, center: &[f64], spec: &EnsembleSpec) -> Result<Ensemble, SimError> {
    let runs = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(member_seed(spec.seed, i));
            let offset = sample_ball(&mut rng, field.dim(), spec.radius);
            let x0: Vec<f64> = offset.iter().zip(center).map(|(a, b)| a + b).collect();
            let dist = spec.disturbance.draw(rng.gen(), spec.horizon, field.channels())?;
            integrate(
                field,
                &x0,
                spec.t0,
                spec.horizon,
                StepSpec { h: spec.h, blowup_radius: spec.blowup_radius },
                &dist,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Ensemble { id: spec.id(), runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay() -> FnField<impl Fn(f64, &[f64], &[f64]) -> Vec<f64> + Sync> {
        FnField { dim: 1, channels: 1, f: |_t: f64, x: &[f64], d: &[f64]| vec![-x[0] + d[0]] }
    }

    #[test]
    fn exponential_decay() {
        let tr = integrate(&decay(), &[1.0], 0.0, 1.0, StepSpec::new(1e-3), &DisturbanceSignal::zero(1)).unwrap();
        assert!((tr.last()[0] - (-1f64).exp()).abs() < 1e-6);
        assert_eq!(tr.times.len(), 1001);
        assert!(tr.completed());
    }

    #[test]
    fn constant_field() {
        let f = FnField { dim: 1, channels: 1, f: |_t: f64, _x: &[f64], _d: &[f64]| vec![0.0] };
        let tr = integrate(&f, &[5.0], 0.0, 1.0, StepSpec::new(0.1), &DisturbanceSignal::zero(1)).unwrap();
        assert!(tr.states.iter().all(|s| s[0] == 5.0));
    }

    #[test]
    fn finite_time_blowup() {
        let f = FnField { dim: 1, channels: 1, f: |_t: f64, x: &[f64], _d: &[f64]| vec![x[0] * x[0]] };
        let tr = integrate(&f, &[2.0], 0.0, 1.0, StepSpec::new(1e-3), &DisturbanceSignal::zero(1)).unwrap();
        match tr.status {
            Status::Blowup { time } => assert!(time <= 0.5, "{time}"),
            s => panic!("{s:?}"),
        }
        assert!(tr.states.iter().all(|s| s[0].is_finite()));
    }

    #[test]
    fn step_validation() {
        let z = DisturbanceSignal::zero(1);
        assert!(matches!(integrate(&decay(), &[1.0], 0.0, 1.0, StepSpec::new(0.0), &z), Err(SimError::BadStep(_))));
        assert!(matches!(
            integrate(&decay(), &[1.0], 0.0, 1.0, StepSpec::new(0.3), &z),
            Err(SimError::HorizonNotMultiple { .. })
        ));
        let tr = integrate(&decay(), &[1.0], 0.0, 0.0, StepSpec::new(0.1), &z).unwrap();
        assert_eq!(tr.times, vec![0.0]);
    }

    #[test]
    fn step_halving_ratio() {
        let exact = (-1f64).exp();
        let err = |h: f64| {
            let tr = integrate(&decay(), &[1.0], 0.0, 1.0, StepSpec::new(h), &DisturbanceSignal::zero(1)).unwrap();
            (tr.last()[0] - exact).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((12.0..=20.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn time_shift_for_autonomous_systems() {
        let z = DisturbanceSignal::zero(1);
        let a = integrate(&decay(), &[1.0], 0.0, 1.0, StepSpec::new(0.01), &z).unwrap();
        let b = integrate(&decay(), &[1.0], 3.0, 1.0, StepSpec::new(0.01), &z).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn ensembles() {
        let spec = EnsembleSpec {
            radius: 3.0,
            count: 100,
            seed: 11,
            t0: 0.0,
            horizon: 12.0,
            h: 0.01,
            blowup_radius: DEFAULT_BLOWUP_RADIUS,
            disturbance: DisturbanceFamily {
                kind: DisturbanceKind::PiecewiseRandom,
                amplitude: 1.0,
                dwell: 0.5,
                channels: None,
            },
        };
        let a = run_ensemble(&decay(), &[0.0], &spec).unwrap();
        let b = run_ensemble(&decay(), &[0.0], &spec).unwrap();
        assert_eq!(a, b);
        for tr in &a.runs {
            let bound = tr.initial()[0].abs().max(tr.disturbance_linf);
            assert!(tr.max_norm() <= bound + 1e-12);
            let tail = &tr.states[tr.states.len() / 2..];
            assert!(tail.iter().all(|s| s[0].abs() <= 1.0 + 1e-3));
        }
        let empty = run_ensemble(&decay(), &[0.0], &EnsembleSpec { count: 0, ..spec }).unwrap();
        assert!(empty.runs.is_empty());
    }

    #[test]
    fn csv_layout() {
        let tr = integrate(&decay(), &[1.0], 0.0, 0.2, StepSpec::new(0.1), &DisturbanceSignal::zero(1)).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x1,u");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,1,"));
    }
}
