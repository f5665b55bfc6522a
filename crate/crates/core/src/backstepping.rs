//! Recursive feedback synthesis: virtual controls, the local feedback near
//! the origin, and the full pipeline that falls back on the annulus cover
//! when a stage is not regular.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certification::{check_dissipation, DissipationGrid, DissipationReport, Region, StageLoop};
use crate::comparison::{next_gain, ComparisonError, ComparisonFunction};
use crate::cover::{build_cover_law, AnnulusCover, CoverError, CoverParams};
use crate::extended::{
    base_subsystem, extend_subsystem, ExtendError, ExtendedSubsystem, Prepared, SharedStage, StageMap,
};
use crate::numerics::{dot, integrate_unit, linspace, newton, root_nearest_zero, RootError};
use crate::simulation::Controller;
use crate::system::GtfSystem;

/// Below this `|z_{k+1}|` the coupling integral is evaluated by quadrature
/// instead of the difference quotient.
const QUOTIENT_MIN: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StageError {
    #[error("no solution of the stage equation within the search range at t = {t}, y = {y:?}")]
    NoBracket { t: f64, y: Vec<f64> },
    #[error("control direction degenerates: |∂g/∂v| = {derivative:e} at t = {t}, y = {y:?}, v = {v}")]
    DegenerateControlDirection { t: f64, y: Vec<f64>, v: f64, derivative: f64 },
    #[error("derivative unavailable at t = {t}, y = {y:?}")]
    DerivativeUnavailable { t: f64, y: Vec<f64> },
    #[error("no radius passed the local check; last tried {last_radius}")]
    LocalSynthesisFailed { last_radius: f64 },
    #[error(transparent)]
    Extend(#[from] ExtendError),
    #[error(transparent)]
    Cover(#[from] CoverError),
    #[error(transparent)]
    Gain(#[from] ComparisonError),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("stage {stage}: {source}")]
pub struct BacksteppingError {
    pub stage: usize,
    #[source]
    pub source: StageError,
}

fn at_stage(stage: usize) -> impl Fn(StageError) -> BacksteppingError {
    move |source| BacksteppingError { stage, source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalParams {
    pub r0: f64,
    pub attempts: usize,
    /// Minimum `|∂g/∂v|` along the selected root branch.
    pub floor: f64,
    pub y_samples: usize,
    pub t_samples: usize,
}

impl Default for LocalParams {
    fn default() -> Self {
        LocalParams { r0: 0.4, attempts: 20, floor: 1e-3, y_samples: 11, t_samples: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisParams {
    /// Half-width of the box on which regularity is screened and dissipation checked.
    pub working_half_width: f64,
    pub t_samples: usize,
    pub y_samples: usize,
    pub control_half_width: f64,
    pub control_samples: usize,
    pub deriv_floor: f64,
    pub h_diff: f64,
    pub root_limit: f64,
    /// Gains are tabulated on `[0, gain_step * gain_count]`.
    pub gain_step: f64,
    pub gain_count: usize,
    pub dissipation: DissipationGrid,
    pub min_pass_fraction: f64,
    pub local: LocalParams,
    pub cover: CoverParams,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        SynthesisParams {
            working_half_width: 3.0,
            t_samples: 5,
            y_samples: 9,
            control_half_width: 10.0,
            control_samples: 21,
            deriv_floor: 1e-6,
            h_diff: 1e-5,
            root_limit: 1e6,
            gain_step: 1.0 / 64.0,
            gain_count: 640,
            dissipation: DissipationGrid::new(3.0),
            min_pass_fraction: 0.999,
            local: LocalParams::default(),
            cover: CoverParams::default(),
        }
    }
}

impl SynthesisParams {
    pub fn base_gain(&self) -> ComparisonFunction {
        ComparisonFunction::squared(&ComparisonFunction::uniform_knots(self.gain_step, self.gain_count))
            .expect("uniform knots start at zero")
    }
}

/// `J(t, z, s) = ∫₀¹ ∂g(t, z, θs)/∂s dθ` by eight-point Gauss-Legendre with
/// central differences inside.
pub fn j_integral(ext: &ExtendedSubsystem, t: f64, z: &[f64], s: f64) -> Result<Vec<f64>, StageError> {
    let k = ext.k();
    if k == 0 {
        return Ok(Vec::new());
    }
    let h = ext.h_diff();
    let block = ext.inner_block(t, z);
    let mut out = vec![0.0; k];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = integrate_unit(|theta| {
            let a = ext.inner_at(&block, theta * s + h)[i];
            let b = ext.inner_at(&block, theta * s - h)[i];
            (a - b) / (2.0 * h)
        });
    }
    if out.iter().any(|v| !v.is_finite()) {
        let mut y = z.to_vec();
        y.push(s);
        return Err(StageError::DerivativeUnavailable { t, y });
    }
    Ok(out)
}

/// `P = ⟨∂V_k/∂z, J⟩ + z_{k+1} Σ_j φ²_{k+1,j}` at a prepared point.
pub fn coupling(ext: &ExtendedSubsystem, prepared: &Prepared, t: f64, y: &[f64]) -> Result<f64, StageError> {
    let k = ext.k();
    let s = y[k];
    let phi_sq: f64 = prepared.phi[k].iter().map(|v| v * v).sum();
    let mut p = s * phi_sq;
    if k > 0 {
        let z = &y[..k];
        let j = if s.abs() >= QUOTIENT_MIN {
            let at_zero = ext.inner_drift(t, z, 0.0);
            prepared.inner.iter().zip(&at_zero).map(|(a, b)| (a - b) / s).collect()
        } else {
            j_integral(ext, t, z, s)?
        };
        p += 2.0 * dot(z, &j);
    }
    Ok(p)
}

/// Law solving `2 g_{k+1}(t, y, v) + P(t, y) = -z_{k+1}` pointwise.
#[derive(Clone)]
pub struct StageLaw {
    ext: ExtendedSubsystem,
    affine: bool,
    root_limit: f64,
}

impl fmt::Debug for StageLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StageLaw").field("k", &self.ext.k()).field("affine", &self.affine).finish()
    }
}

impl StageLaw {
    pub fn new(ext: ExtendedSubsystem, affine: bool, root_limit: f64) -> Self {
        StageLaw { ext, affine, root_limit }
    }

    pub fn ext(&self) -> &ExtendedSubsystem {
        &self.ext
    }

    pub fn is_affine(&self) -> bool {
        self.affine
    }

    /// Value of `g_{k+1}` that the law must produce at `(t, y)`.
    pub fn target(&self, t: f64, y: &[f64]) -> Result<(Prepared, f64), StageError> {
        let prepared = self.ext.prepare(t, y, true);
        let p = coupling(&self.ext, &prepared, t, y)?;
        let c = -(p + y[self.ext.k()]) / 2.0;
        Ok((prepared, c))
    }

    pub fn solve(&self, t: f64, y: &[f64]) -> Result<f64, StageError> {
        let (prepared, c) = self.target(t, y)?;
        if self.affine {
            let a = self.ext.top(&prepared, 0.0);
            let b = self.ext.top(&prepared, 1.0) - a;
            let v = (c - a) / b;
            if v.is_finite() {
                return Ok(v);
            }
        }
        root_nearest_zero(|v| self.ext.top(&prepared, v) - c, self.root_limit).map_err(|e| match e {
            RootError::NoBracket { .. } => StageError::NoBracket { t, y: y.to_vec() },
            RootError::NonFinite { .. } => StageError::DerivativeUnavailable { t, y: y.to_vec() },
        })
    }

    /// `2 g_{k+1}(t, y, v) + P + z_{k+1}`; zero for the law's own output.
    pub fn residual(&self, t: f64, y: &[f64], v: f64) -> Result<f64, StageError> {
        let (prepared, c) = self.target(t, y)?;
        Ok(2.0 * (self.ext.top(&prepared, v) - c))
    }
}

impl StageMap for StageLaw {
    fn eval(&self, t: f64, y: &[f64]) -> f64 {
        self.solve(t, y).unwrap_or(f64::NAN)
    }
}

pub(crate) fn box_grid(dim: usize, half: f64, samples: usize) -> Vec<Vec<f64>> {
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
    pts
}

/// Screens `∂g_{k+1}/∂v` away from zero on the working box and checks the
/// stage equation has a solution there. Returns whether `g_{k+1}` is affine in `v`.
pub fn check_regular(ext: &ExtendedSubsystem, params: &SynthesisParams) -> Result<bool, StageError> {
    let ts = linspace(0.0, ext.period(), params.t_samples.max(1) + 1);
    let vs = linspace(-params.control_half_width, params.control_half_width, params.control_samples.max(2));
    let h = params.h_diff;
    let mut affine = true;
    for &t in &ts[..ts.len() - 1] {
        for y in box_grid(ext.dim(), params.working_half_width, params.y_samples) {
            let p = ext.prepare(t, &y, false);
            let mut sign = 0.0;
            for &v in &vs {
                let d = (ext.top(&p, v + h) - ext.top(&p, v - h)) / (2.0 * h);
                if !d.is_finite() {
                    return Err(StageError::DerivativeUnavailable { t, y });
                }
                if d.abs() < params.deriv_floor || d.signum() * sign < 0.0 {
                    return Err(StageError::DegenerateControlDirection { t, y, v, derivative: d });
                }
                sign = d.signum();
            }
            let (g0, g1, gm) = (ext.top(&p, 0.0), ext.top(&p, 1.0), ext.top(&p, -1.0));
            let g2 = ext.top(&p, 2.0);
            let b = g1 - g0;
            let tol = 1e-9 * b.abs().max(g0.abs()).max(1.0);
            if (g0 - gm - b).abs() > tol || (g2 - g0 - 2.0 * b).abs() > 2.0 * tol {
                affine = false;
            }
        }
    }
    let law = StageLaw::new(ext.clone(), affine, params.root_limit);
    for &t in &ts[..ts.len() - 1] {
        for y in box_grid(ext.dim(), params.working_half_width, params.y_samples.min(5)) {
            law.solve(t, &y)?;
        }
    }
    Ok(affine)
}

/// Virtual control for a regular stage.
pub fn synthesize_virtual_control(ext: &ExtendedSubsystem, params: &SynthesisParams) -> Result<StageLaw, StageError> {
    let affine = check_regular(ext, params)?;
    Ok(StageLaw::new(ext.clone(), affine, params.root_limit))
}

/// Feedback valid on the closed ball of radius `2 * radius`.
#[derive(Debug, Clone)]
pub struct LocalFeedback {
    pub radius: f64,
    pub law: Arc<StageLaw>,
    /// Slack of the dissipation inequality on the ball (`-worst excess`).
    pub margin: f64,
}

impl StageMap for LocalFeedback {
    fn eval(&self, t: f64, y: &[f64]) -> f64 {
        self.law.eval(t, y)
    }
}

#[derive(Debug, Clone)]
pub struct LocalSynthesis {
    pub local: LocalFeedback,
    pub gamma: ComparisonFunction,
    /// Smallest gain threshold of the ladder, `r² / 12`.
    pub d_head: f64,
    pub report: DissipationReport,
}

fn derivative_at(ext: &ExtendedSubsystem, p: &Prepared, v: f64, h: f64) -> f64 {
    (ext.top(p, v + h) - ext.top(p, v - h)) / (2.0 * h)
}

/// Follows the root branch from `(y_from, v_from)` to `y_to`, splitting the
/// segment until each Newton step moves the root by a small amount.
fn track_root(
    law: &StageLaw,
    t: f64,
    y_from: &[f64],
    v_from: f64,
    y_to: &[f64],
    floor: f64,
    depth: u32,
) -> Option<f64> {
    let ext = law.ext();
    let h = ext.h_diff();
    let (p, c) = law.target(t, y_to).ok()?;
    let direct = newton(|v| ext.top(&p, v) - c, v_from, h);
    if let Some(v) = direct {
        let d = derivative_at(ext, &p, v, h);
        if (v - v_from).abs() <= 0.05 * (1.0 + v_from.abs()) && d.abs() >= floor {
            return Some(v);
        }
    }
    if depth == 0 {
        return None;
    }
    let mid: Vec<f64> = y_from.iter().zip(y_to).map(|(a, b)| 0.5 * (a + b)).collect();
    let vm = track_root(law, t, y_from, v_from, &mid, floor, depth - 1)?;
    track_root(law, t, &mid, vm, y_to, floor, depth - 1)
}

/// Checks the nearest-zero root is a continuous, non-degenerate branch over
/// the ball of radius `outer`.
fn branch_is_regular(law: &StageLaw, outer: f64, params: &LocalParams) -> bool {
    let ext = law.ext();
    let dim = ext.dim();
    let n = params.y_samples.max(3) | 1;
    let axis = linspace(-outer, outer, n);
    let ts = linspace(0.0, ext.period(), params.t_samples.max(1) + 1);
    let h = ext.h_diff();
    for &t in &ts {
        let pts = box_grid(dim, outer, n);
        let mut roots: Vec<Option<f64>> = vec![None; pts.len()];
        for (idx, y) in pts.iter().enumerate() {
            if crate::numerics::norm(y) > outer * (1.0 + 1e-12) {
                continue;
            }
            let Ok(v) = law.solve(t, y) else { return false };
            let Ok((p, _)) = law.target(t, y) else { return false };
            if derivative_at(ext, &p, v, h).abs() < params.floor {
                return false;
            }
            roots[idx] = Some(v);
            let mut stride = 1;
            for axis_i in (0..dim).rev() {
                let pos = (idx / stride) % n;
                if pos > 0 {
                    if let Some(vp) = roots[idx - stride] {
                        match track_root(law, t, &pts[idx - stride], vp, y, params.floor, 12) {
                            Some(vt) if (vt - v).abs() <= 1e-6 * (1.0 + v.abs()) => {}
                            _ => return false,
                        }
                    }
                }
                stride *= n;
                let _ = axis_i;
            }
        }
        let _ = &axis;
    }
    true
}

/// Local feedback `ν` on a ball around the origin, shrinking the radius by
/// halves until the root branch is regular and the dissipation check passes.
pub fn synthesize_local_feedback(
    ext: &ExtendedSubsystem,
    gamma_k: Option<&ComparisonFunction>,
    params: &SynthesisParams,
) -> Result<LocalSynthesis, StageError> {
    let gamma = match gamma_k {
        Some(g) => next_gain(g)?,
        None => params.base_gain(),
    };
    let law = Arc::new(StageLaw::new(ext.clone(), false, params.root_limit));
    let mut r = params.local.r0;
    for _ in 0..params.local.attempts {
        if branch_is_regular(&law, 2.0 * r, &params.local) {
            let mut grid = params.dissipation.clone();
            grid.region = Region::Ball;
            grid.half_width = 2.0 * r;
            grid.y_samples = params.local.y_samples;
            let report = check_dissipation(&StageLoop { ext, law: law.as_ref() }, &gamma, &grid);
            if report.pass_fraction == 1.0 {
                let margin = -report.worst_excess;
                return Ok(LocalSynthesis {
                    local: LocalFeedback { radius: r, law, margin },
                    gamma,
                    d_head: r * r / 12.0,
                    report,
                });
            }
        }
        r /= 2.0;
    }
    Err(StageError::LocalSynthesisFailed { last_radius: r * 2.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Affine,
    RootFound,
    Blended,
}

/// T-periodic plant feedback `u(t, x)` built from the stage laws.
#[derive(Clone)]
pub struct FeedbackLaw {
    transform: ExtendedSubsystem,
    last: SharedStage,
    kinds: Vec<StageKind>,
}

impl fmt::Debug for FeedbackLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeedbackLaw").field("kinds", &self.kinds).finish()
    }
}

impl FeedbackLaw {
    /// `transform` carries `α_1..α_{n-1}`; `last` is the law for `u - u*`.
    pub fn new(transform: ExtendedSubsystem, last: SharedStage, kinds: Vec<StageKind>) -> Self {
        FeedbackLaw { transform, last, kinds }
    }

    pub fn system(&self) -> &Arc<GtfSystem> {
        self.transform.system()
    }

    pub fn period(&self) -> f64 {
        self.transform.period()
    }

    pub fn kinds(&self) -> &[StageKind] {
        &self.kinds
    }

    pub fn transform(&self) -> &ExtendedSubsystem {
        &self.transform
    }

    /// Stage law `α_i`, `1 ≤ i ≤ n`.
    pub fn stage(&self, i: usize) -> &SharedStage {
        if i == self.kinds.len() {
            &self.last
        } else {
            &self.transform.stages()[i - 1]
        }
    }

    /// Backstepping coordinates of the plant state.
    pub fn to_transformed(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let shifted: Vec<f64> = x.iter().zip(self.system().x_star()).map(|(a, b)| a - b).collect();
        self.transform.from_plant(t, &shifted)
    }

    /// Plant state from backstepping coordinates.
    pub fn from_transformed(&self, t: f64, y: &[f64]) -> Vec<f64> {
        self.transform.to_plant(t, y).iter().zip(self.system().x_star()).map(|(a, b)| a + b).collect()
    }

    pub fn control(&self, t: f64, x: &[f64]) -> f64 {
        let z = self.to_transformed(t, x);
        self.system().u_star() + self.last.eval(t, &z)
    }
}

impl Controller for FeedbackLaw {
    fn control(&self, t: f64, x: &[f64]) -> f64 {
        FeedbackLaw::control(self, t, x)
    }
}

/// Per-stage outcome of the synthesis.
#[derive(Debug, Clone)]
pub struct StageRecord {
    pub stage: usize,
    pub kind: StageKind,
    pub report: DissipationReport,
    pub local_radius: Option<f64>,
    pub cover: Option<Arc<AnnulusCover>>,
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub law: FeedbackLaw,
    /// `γ_1..γ_n`.
    pub gains: Vec<ComparisonFunction>,
    pub stages: Vec<StageRecord>,
}

impl Synthesis {
    pub fn gamma_n(&self) -> &ComparisonFunction {
        self.gains.last().unwrap()
    }

    pub fn reports_pass(&self, min_fraction: f64) -> bool {
        self.stages.iter().all(|s| s.report.passed(min_fraction))
    }
}

fn run_pipeline(
    sys: Arc<GtfSystem>,
    params: &SynthesisParams,
    allow_cover: bool,
) -> Result<Synthesis, BacksteppingError> {
    let n = sys.n();
    let mut ext = base_subsystem(sys, params.h_diff);
    let mut gains: Vec<ComparisonFunction> = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    let mut kinds = Vec::with_capacity(n);
    let mut check_ball: Option<f64> = None;
    let mut last: Option<SharedStage> = None;
    for k in 0..n {
        let err = at_stage(k + 1);
        let (law, kind, gamma, local_radius, cover): (SharedStage, _, _, _, _) = match check_regular(&ext, params) {
            Ok(affine) => {
                let gamma = match gains.last() {
                    Some(g) => next_gain(g).map_err(|e| err(e.into()))?,
                    None => params.base_gain(),
                };
                let kind = if affine { StageKind::Affine } else { StageKind::RootFound };
                (Arc::new(StageLaw::new(ext.clone(), affine, params.root_limit)), kind, gamma, None, None)
            }
            Err(StageError::DegenerateControlDirection { .. }) if allow_cover => {
                let local = synthesize_local_feedback(&ext, gains.last(), params).map_err(&err)?;
                let (cover, blended) =
                    build_cover_law(&ext, gains.last(), &local, &params.cover).map_err(|e| err(e.into()))?;
                check_ball = Some(check_ball.map_or(local.local.radius, |b: f64| b.min(local.local.radius)));
                (Arc::new(blended), StageKind::Blended, local.gamma, Some(local.local.radius), Some(Arc::new(cover)))
            }
            Err(e) => return Err(err(e)),
        };
        let mut grid = params.dissipation.clone();
        if let Some(radius) = check_ball {
            grid.region = Region::Ball;
            grid.half_width = radius;
        }
        let report = check_dissipation(&StageLoop { ext: &ext, law: law.as_ref() }, &gamma, &grid);
        records.push(StageRecord { stage: k + 1, kind, report, local_radius, cover });
        kinds.push(kind);
        gains.push(gamma);
        if k + 1 < n {
            ext = extend_subsystem(&ext, law).map_err(|e| err(e.into()))?;
        } else {
            last = Some(law);
        }
    }
    let law = FeedbackLaw::new(ext, last.expect("at least one stage"), kinds);
    Ok(Synthesis { law, gains, stages: records })
}

/// Regular-case synthesis; fails on the first stage whose control direction degenerates.
pub fn synthesize_regular(sys: Arc<GtfSystem>, params: &SynthesisParams) -> Result<Synthesis, BacksteppingError> {
    run_pipeline(sys, params, false)
}

/// Full synthesis: regular stages in closed form or by root finding, other
/// stages by the local feedback blended into an annulus cover.
pub fn synthesize(sys: Arc<GtfSystem>, params: &SynthesisParams) -> Result<Synthesis, BacksteppingError> {
    run_pipeline(sys, params, true)
}
