//! Winding numbers of planar maps on the unit circle and the static-feedback
//! obstruction for `ẋ_1 = x_2³ − (1 − x_1²) x_2, ẋ_2 = u`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SAMPLES: usize = 720;
pub const MIN_SAMPLES: usize = 16;
pub const MAX_SAMPLES: usize = 1 << 16;
pub const TOL_ZERO: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObstructionError {
    #[error("at least {MIN_SAMPLES} samples are needed, got {0}")]
    TooFewSamples(usize),
    #[error("the map vanishes at angle {angle} (|g| = {norm:e})")]
    VanishingVector { angle: f64, norm: f64 },
    #[error("consecutive samples {index} and {next} turn by {jump} rad; refine the sampling")]
    Undersampled { index: usize, next: usize, jump: f64 },
    #[error("still undersampled at {0} samples")]
    RefinementExhausted(usize),
}

/// Samples `g(θ)` of a planar map restricted to the unit circle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircleMapSamples {
    pub angles: Vec<f64>,
    pub vectors: Vec<[f64; 2]>,
    /// Whether `vectors` were divided by their norms.
    pub normalized: bool,
}

impl CircleMapSamples {
    /// Samples `map` at `m` uniform angles on `[0, 2π)`.
    pub fn sample(m: usize, map: impl Fn([f64; 2]) -> [f64; 2]) -> Result<Self, ObstructionError> {
        if m < MIN_SAMPLES {
            return Err(ObstructionError::TooFewSamples(m));
        }
        let angles: Vec<f64> = (0..m).map(|i| 2.0 * PI * i as f64 / m as f64).collect();
        let vectors = angles.iter().map(|&a| map([a.cos(), a.sin()])).collect();
        Ok(CircleMapSamples { angles, vectors, normalized: false })
    }

    /// Divides every vector by its norm.
    pub fn normalize(&self, tol_zero: f64) -> Result<Self, ObstructionError> {
        let vectors = self
            .angles
            .iter()
            .zip(&self.vectors)
            .map(|(&angle, g)| {
                let n = g[0].hypot(g[1]);
                if !(n > tol_zero) {
                    return Err(ObstructionError::VanishingVector { angle, norm: n });
                }
                Ok([g[0] / n, g[1] / n])
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CircleMapSamples { angles: self.angles.clone(), vectors, normalized: true })
    }
}

/// Degree of `θ ↦ g(θ)/|g(θ)|`: wrapped angle increments summed over the
/// closed loop, divided by `2π`.
pub fn winding_number(samples: &CircleMapSamples, tol_zero: f64) -> Result<i64, ObstructionError> {
    let m = samples.vectors.len();
    if m < MIN_SAMPLES {
        return Err(ObstructionError::TooFewSamples(m));
    }
    let mut phase = Vec::with_capacity(m);
    for (angle, g) in samples.angles.iter().zip(&samples.vectors) {
        let n = g[0].hypot(g[1]);
        if !(n > tol_zero) {
            return Err(ObstructionError::VanishingVector { angle: *angle, norm: n });
        }
        phase.push(g[1].atan2(g[0]));
    }
    let mut total = 0.0;
    for i in 0..m {
        let next = (i + 1) % m;
        let jump = wrap(phase[next] - phase[i]);
        if jump.abs() >= PI / 2.0 {
            return Err(ObstructionError::Undersampled { index: i, next, jump });
        }
        total += jump;
    }
    Ok((total / (2.0 * PI)).round() as i64)
}

/// Winding number of `map` with dyadic refinement from `m` samples on
/// undersampling, up to [`MAX_SAMPLES`].
pub fn winding_of_map(
    map: impl Fn([f64; 2]) -> [f64; 2],
    m: usize,
    tol_zero: f64,
) -> Result<(i64, usize), ObstructionError> {
    let mut m = m;
    loop {
        let samples = CircleMapSamples::sample(m, &map)?;
        match winding_number(&samples, tol_zero) {
            Err(ObstructionError::Undersampled { .. }) if m < MAX_SAMPLES => m = (2 * m).min(MAX_SAMPLES),
            Err(ObstructionError::Undersampled { .. }) => return Err(ObstructionError::RefinementExhausted(m)),
            other => return other.map(|w| (w, m)),
        }
    }
}

fn wrap(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Drift of the first row, `x_2³ − (1 − x_1²) x_2`.
pub fn first_row(x: [f64; 2]) -> f64 {
    x[1].powi(3) - (1.0 - x[0] * x[0]) * x[1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstructionVerdict {
    /// The feedback field and the antipodal map have different degrees.
    Obstructed,
    /// Degrees agree; the argument does not rule the feedback out.
    NotObstructed,
    /// The feedback vanishes somewhere on the circle.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstructionReport {
    pub samples: usize,
    /// Largest `|first row|` over the samples.
    pub first_component_max: f64,
    pub feedback_winding: Option<i64>,
    pub reference_winding: i64,
    pub verdict: ObstructionVerdict,
    /// Sample where the feedback vanishes or changes sign.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vanishing_at: Option<[f64; 2]>,
}

/// Compares the degree of `x ↦ g(x)/|g(x)|`, `g = [x_2³ − (1 − x_1²) x_2, u(x)]`,
/// on the unit circle with that of the antipodal map.
pub fn static_obstruction_check(u: impl Fn([f64; 2]) -> f64, m: usize) -> ObstructionReport {
    obstruction_check_with(first_row, u, m)
}

/// [`static_obstruction_check`] for the closed-loop field `[first(x), u(x)]`.
pub fn obstruction_check_with(
    first: impl Fn([f64; 2]) -> f64,
    u: impl Fn([f64; 2]) -> f64,
    m: usize,
) -> ObstructionReport {
    let m = m.max(MIN_SAMPLES);
    let (reference_winding, _) = winding_of_map(|x| [-x[0], -x[1]], m, TOL_ZERO).expect("antipodal map is admissible");
    let angles: Vec<f64> = (0..m).map(|i| 2.0 * PI * i as f64 / m as f64).collect();
    let points: Vec<[f64; 2]> = angles.iter().map(|a| [a.cos(), a.sin()]).collect();
    let first_component_max = points.iter().map(|&x| first(x).abs()).fold(0.0, f64::max);
    let values: Vec<f64> = points.iter().map(|&x| u(x)).collect();
    let mut vanishing_at = None;
    for i in 0..m {
        let next = (i + 1) % m;
        if !(values[i].abs() > TOL_ZERO) {
            vanishing_at = Some(points[i]);
            break;
        }
        if values[i].signum() != values[next].signum() && values[next].abs() > TOL_ZERO {
            vanishing_at = Some(points[i]);
            break;
        }
    }
    let report = |feedback_winding, verdict, vanishing_at| ObstructionReport {
        samples: m,
        first_component_max,
        feedback_winding,
        reference_winding,
        verdict,
        vanishing_at,
    };
    if vanishing_at.is_some() {
        return report(None, ObstructionVerdict::Inconclusive, vanishing_at);
    }
    match winding_of_map(|x| [first(x), u(x)], m, TOL_ZERO) {
        Ok((w, used)) => {
            let verdict =
                if w != reference_winding { ObstructionVerdict::Obstructed } else { ObstructionVerdict::NotObstructed };
            ObstructionReport { samples: used, ..report(Some(w), verdict, None) }
        }
        Err(_) => report(None, ObstructionVerdict::Inconclusive, None),
    }
}
