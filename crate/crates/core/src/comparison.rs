//! Comparison functions of classes N, K, K∞ and KL.
//!
//! Gains are stored as continuous piecewise-linear maps on `[0, ∞)` with a
//! linear tail past the last knot. Values are immutable once built.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Equality tolerance used when comparing gains at knots.
pub const KNOT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GainKind {
    N,
    K,
    Kinf,
}

/// Class requested from [`ClassCheck::verify_class`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassKind {
    N,
    K,
    Kinf,
    KL,
}

impl From<GainKind> for ClassKind {
    fn from(k: GainKind) -> Self {
        match k {
            GainKind::N => ClassKind::N,
            GainKind::K => ClassKind::K,
            GainKind::Kinf => ClassKind::Kinf,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComparisonError {
    #[error("no samples given")]
    Empty,
    #[error("samples violate the monotonicity of the class at index {index}")]
    NonMonotone { index: usize },
    #[error("knots are not strictly increasing at index {index}")]
    UnsortedKnots { index: usize },
    #[error("first sample must be the origin (s0 = 0, and v0 = 0 for K/K∞)")]
    MissingOrigin,
    #[error("tail slope {0} is not admissible for the class")]
    BadTail(f64),
    #[error("non-finite sample value")]
    NonFinite,
    #[error("kind mismatch: {0}")]
    KindMismatch(&'static str),
}

/// A piecewise-linear comparison function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGain", into = "RawGain")]
pub struct ComparisonFunction {
    kind: GainKind,
    knots: Vec<f64>,
    values: Vec<f64>,
    tail_slope: f64,
}

#[derive(Serialize, Deserialize)]
struct RawGain {
    kind: GainKind,
    knots: Vec<f64>,
    values: Vec<f64>,
    tail_slope: f64,
}

impl TryFrom<RawGain> for ComparisonFunction {
    type Error = ComparisonError;

    fn try_from(raw: RawGain) -> Result<Self, Self::Error> {
        if raw.knots.len() != raw.values.len() {
            return Err(ComparisonError::Empty);
        }
        let samples: Vec<(f64, f64)> = raw.knots.into_iter().zip(raw.values).collect();
        make_class_k(&samples, raw.kind, Some(raw.tail_slope))
    }
}

impl From<ComparisonFunction> for RawGain {
    fn from(f: ComparisonFunction) -> Self {
        RawGain { kind: f.kind, knots: f.knots, values: f.values, tail_slope: f.tail_slope }
    }
}

/// Builds a comparison function from `(s, v)` samples.
///
/// When `tail_slope` is `None` the slope of the last segment is extended
/// (slope 1 for a single-knot function).
pub fn make_class_k(
    samples: &[(f64, f64)],
    kind: GainKind,
    tail_slope: Option<f64>,
) -> Result<ComparisonFunction, ComparisonError> {
    if samples.is_empty() {
        return Err(ComparisonError::Empty);
    }
    if samples.iter().any(|(s, v)| !s.is_finite() || !v.is_finite()) {
        return Err(ComparisonError::NonFinite);
    }
    let (s0, v0) = samples[0];
    if s0 != 0.0 || (kind != GainKind::N && v0 != 0.0) || v0 < 0.0 {
        return Err(ComparisonError::MissingOrigin);
    }
    for i in 1..samples.len() {
        if samples[i].0 <= samples[i - 1].0 {
            return Err(ComparisonError::UnsortedKnots { index: i });
        }
        let ok = match kind {
            GainKind::N => samples[i].1 >= samples[i - 1].1,
            GainKind::K | GainKind::Kinf => samples[i].1 > samples[i - 1].1,
        };
        if !ok {
            return Err(ComparisonError::NonMonotone { index: i });
        }
    }
    let m = samples.len();
    let tail = match tail_slope {
        Some(t) => t,
        None if m >= 2 => {
            let (a, b) = (samples[m - 2], samples[m - 1]);
            (b.1 - a.1) / (b.0 - a.0)
        }
        None => 1.0,
    };
    let tail_ok = tail.is_finite()
        && match kind {
            GainKind::N => tail >= 0.0,
            GainKind::K | GainKind::Kinf => tail > 0.0,
        };
    if !tail_ok {
        return Err(ComparisonError::BadTail(tail));
    }
    Ok(ComparisonFunction {
        kind,
        knots: samples.iter().map(|p| p.0).collect(),
        values: samples.iter().map(|p| p.1).collect(),
        tail_slope: tail,
    })
}

impl ComparisonFunction {
    /// The identity gain `s ↦ s` (class K∞).
    pub fn identity() -> Self {
        ComparisonFunction { kind: GainKind::Kinf, knots: vec![0.0, 1.0], values: vec![0.0, 1.0], tail_slope: 1.0 }
    }

    /// Samples `f` on the given knots (which must start at 0).
    pub fn sample<F: Fn(f64) -> f64>(
        kind: GainKind,
        knots: &[f64],
        f: F,
        tail_slope: Option<f64>,
    ) -> Result<Self, ComparisonError> {
        let samples: Vec<(f64, f64)> = knots.iter().map(|&s| (s, f(s))).collect();
        make_class_k(&samples, kind, tail_slope)
    }

    /// `s ↦ s²` sampled on `knots`, with the last-segment slope as tail.
    pub fn squared(knots: &[f64]) -> Result<Self, ComparisonError> {
        Self::sample(GainKind::Kinf, knots, |s| s * s, None)
    }

    /// Uniform knots `0, step, 2 step, …, count·step`.
    pub fn uniform_knots(step: f64, count: usize) -> Vec<f64> {
        (0..=count).map(|i| i as f64 * step).collect()
    }

    pub fn kind(&self) -> GainKind {
        self.kind
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tail_slope(&self) -> f64 {
        self.tail_slope
    }

    pub fn last_knot(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    /// Evaluates the gain. Negative arguments are clamped to 0.
    pub fn eval(&self, s: f64) -> f64 {
        let s = s.max(0.0);
        let m = self.knots.len();
        let last = self.knots[m - 1];
        if s >= last {
            return self.values[m - 1] + self.tail_slope * (s - last);
        }
        // first knot strictly greater than s
        let j = self.knots.partition_point(|&k| k <= s);
        let (s0, s1) = (self.knots[j - 1], self.knots[j]);
        let (v0, v1) = (self.values[j - 1], self.values[j]);
        v0 + (v1 - v0) * (s - s0) / (s1 - s0)
    }

    /// Inverse of a K/K∞ gain on its range. Returns `None` below 0 or, for
    /// a flat segment, never (strictness is an invariant of K).
    pub fn inverse(&self, v: f64) -> Option<f64> {
        if self.kind == GainKind::N || v < 0.0 || !v.is_finite() {
            return None;
        }
        let m = self.knots.len();
        if v >= self.values[m - 1] {
            return Some(self.knots[m - 1] + (v - self.values[m - 1]) / self.tail_slope);
        }
        let j = self.values.partition_point(|&x| x <= v);
        let (s0, s1) = (self.knots[j - 1], self.knots[j]);
        let (v0, v1) = (self.values[j - 1], self.values[j]);
        Some(s0 + (s1 - s0) * (v - v0) / (v1 - v0))
    }
}

/// Composition `outer ∘ inner`, exact on the union of inner's knots and the
/// preimages of outer's knots.
pub fn compose(outer: &ComparisonFunction, inner: &ComparisonFunction) -> Result<ComparisonFunction, ComparisonError> {
    if outer.kind == GainKind::N || inner.kind == GainKind::N {
        return Err(ComparisonError::KindMismatch("compose needs K or K∞ operands"));
    }
    let mut knots: Vec<f64> = inner.knots.clone();
    for &k in &outer.knots {
        if let Some(s) = inner.inverse(k) {
            knots.push(s);
        }
    }
    knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    knots.dedup_by(|a, b| (*a - *b).abs() <= 1e-15 * (1.0 + b.abs()));
    let samples: Vec<(f64, f64)> = knots.iter().map(|&s| (s, outer.eval(inner.eval(s)))).collect();
    // past the last union knot both maps are on their linear tails
    let tail = outer.tail_slope * inner.tail_slope;
    let kind = if outer.kind == GainKind::Kinf && inner.kind == GainKind::Kinf { GainKind::Kinf } else { GainKind::K };
    make_class_k(&samples, kind, Some(tail))
}

/// One step of the backstepping gain recursion: `γ(s) + s²` on every knot,
/// with the tail slope raised by the slope of `s²` at the last knot.
pub fn next_gain(gamma: &ComparisonFunction) -> Result<ComparisonFunction, ComparisonError> {
    if gamma.kind != GainKind::Kinf {
        return Err(ComparisonError::KindMismatch("next_gain needs a K∞ gain"));
    }
    let samples: Vec<(f64, f64)> = gamma.knots.iter().zip(&gamma.values).map(|(&s, &v)| (s, v + s * s)).collect();
    let tail = gamma.tail_slope + 2.0 * gamma.last_knot();
    make_class_k(&samples, GainKind::Kinf, Some(tail))
}

/// `β(s, t) = gain(s)·exp(−λ t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlFunction {
    pub gain: ComparisonFunction,
    pub decay_rate: f64,
}

impl KlFunction {
    pub fn new(gain: ComparisonFunction, decay_rate: f64) -> Result<Self, ComparisonError> {
        if gain.kind != GainKind::Kinf {
            return Err(ComparisonError::KindMismatch("KL gain must be K∞"));
        }
        if !(decay_rate > 0.0 && decay_rate.is_finite()) {
            return Err(ComparisonError::BadTail(decay_rate));
        }
        Ok(KlFunction { gain, decay_rate })
    }

    pub fn eval(&self, s: f64, t: f64) -> f64 {
        self.gain.eval(s) * (-self.decay_rate * t.max(0.0)).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub kind: ClassKind,
    pub origin: bool,
    pub monotone: bool,
    pub unbounded: bool,
    /// Only meaningful for KL.
    pub decay: Option<bool>,
    pub first_violation: Option<usize>,
}

impl ClassReport {
    pub fn passed(&self) -> bool {
        self.origin && self.monotone && self.unbounded && self.decay.unwrap_or(true)
    }
}

/// Class membership checks that report instead of failing.
pub trait ClassCheck {
    fn verify_class(&self, kind: ClassKind) -> ClassReport;
}

impl ClassCheck for ComparisonFunction {
    fn verify_class(&self, kind: ClassKind) -> ClassReport {
        let strict = matches!(kind, ClassKind::K | ClassKind::Kinf | ClassKind::KL);
        let origin = self.knots[0] == 0.0 && (!strict || self.values[0] == 0.0);
        let mut first_violation = if origin { None } else { Some(0) };
        let mut monotone = true;
        for i in 1..self.values.len() {
            let ok = if strict { self.values[i] > self.values[i - 1] } else { self.values[i] >= self.values[i - 1] };
            if !ok {
                monotone = false;
                first_violation.get_or_insert(i);
                break;
            }
        }
        let tail_ok = if strict { self.tail_slope > 0.0 } else { self.tail_slope >= 0.0 };
        if !tail_ok {
            monotone = false;
            first_violation.get_or_insert(self.knots.len() - 1);
        }
        let unbounded = match kind {
            ClassKind::Kinf | ClassKind::KL => self.tail_slope > 0.0,
            _ => true,
        };
        ClassReport { kind, origin, monotone, unbounded, decay: None, first_violation }
    }
}

impl ClassCheck for KlFunction {
    fn verify_class(&self, kind: ClassKind) -> ClassReport {
        let mut report = self.gain.verify_class(ClassKind::Kinf);
        report.kind = kind;
        let probe = self.gain.knots().get(1).copied().unwrap_or(1.0);
        let decays = self.decay_rate > 0.0 && self.eval(probe, 1.0) < self.eval(probe, 0.0);
        report.decay = Some(kind == ClassKind::KL && decays);
        report
    }
}
