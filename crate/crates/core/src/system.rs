//! Plants in generalized triangular form and bounded disturbance signals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{parse_dynamics, EvalPoint, Expr, ParseError};
use crate::numerics::{central_diff, linspace, norm};

/// Tolerance for the equilibrium residual at assembly.
pub const EQUILIBRIUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("row {row}: {source}")]
    Parse { row: usize, source: ParseError },
    #[error("{what} row {row} references {symbol}, which breaks the triangular structure")]
    TriangularityViolation { what: &'static str, row: usize, symbol: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("the declared equilibrium is not one: residual {residual:e} in {what} row {row} at t = {t}")]
    NotAnEquilibrium { what: &'static str, row: usize, t: f64, residual: f64 },
    #[error("bad parameter: {0}")]
    BadParameter(String),
}

/// One row of a disturbance map: a scalar expression or one per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RowSpec {
    Scalar(String),
    Channels(Vec<String>),
}

impl RowSpec {
    fn items(&self) -> Vec<&str> {
        match self {
            RowSpec::Scalar(s) => vec![s.as_str()],
            RowSpec::Channels(v) => v.iter().map(String::as_str).collect(),
        }
    }
}

/// Serialized form of a plant, as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub n: usize,
    #[serde(rename = "T")]
    pub period: f64,
    pub f: Vec<String>,
    #[serde(rename = "Phi")]
    pub phi: Vec<RowSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_star: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_star: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist_dims: Option<Vec<usize>>,
}

/// `ẋ_i = f_i(t, x_1..x_{i+1}) + Σ_j δ_{i,j} Φ_{i,j}(t, x_1..x_i)` with `x_{n+1} = u`.
#[derive(Debug, Clone)]
pub struct GtfSystem {
    period: f64,
    f: Vec<Expr>,
    phi: Vec<Vec<Expr>>,
    x_star: Vec<f64>,
    u_star: f64,
}

fn symbol_name(i: usize) -> String {
    format!("x{i}")
}

impl GtfSystem {
    pub fn new(
        period: f64,
        f: Vec<Expr>,
        phi: Vec<Vec<Expr>>,
        x_star: Vec<f64>,
        u_star: f64,
    ) -> Result<Self, SystemError> {
        let n = f.len();
        if n == 0 {
            return Err(SystemError::DimensionMismatch("at least one state is required".into()));
        }
        if !(period > 0.0 && period.is_finite()) {
            return Err(SystemError::BadParameter(format!("period must be positive, got {period}")));
        }
        if phi.len() != n || x_star.len() != n {
            return Err(SystemError::DimensionMismatch(format!(
                "{n} dynamics rows but {} disturbance rows and {} equilibrium entries",
                phi.len(),
                x_star.len()
            )));
        }
        if phi.iter().any(Vec::is_empty) {
            return Err(SystemError::DimensionMismatch("every disturbance row needs a channel".into()));
        }
        for (i, e) in f.iter().enumerate() {
            let row = i + 1;
            let max = e.max_state_index();
            if max > (row + 1).min(n) {
                return Err(SystemError::TriangularityViolation { what: "f", row, symbol: symbol_name(max) });
            }
            if row < n && e.uses_control() {
                return Err(SystemError::TriangularityViolation { what: "f", row, symbol: "u".into() });
            }
        }
        for (i, row_exprs) in phi.iter().enumerate() {
            let row = i + 1;
            for e in row_exprs {
                let max = e.max_state_index();
                if max > row {
                    return Err(SystemError::TriangularityViolation { what: "Phi", row, symbol: symbol_name(max) });
                }
                if e.uses_control() {
                    return Err(SystemError::TriangularityViolation { what: "Phi", row, symbol: "u".into() });
                }
            }
        }
        let sys = GtfSystem { period, f, phi, x_star, u_star };
        for t in linspace(0.0, period, 33) {
            for row in 1..=n {
                let r = sys.eval_f_full(row, t, &sys.x_star, sys.u_star);
                if !(r.abs() <= EQUILIBRIUM_TOL) {
                    return Err(SystemError::NotAnEquilibrium { what: "f", row, t, residual: r });
                }
            }
        }
        Ok(sys)
    }

    pub fn from_spec(spec: &SystemSpec) -> Result<Self, SystemError> {
        if spec.f.len() != spec.n || spec.phi.len() != spec.n {
            return Err(SystemError::DimensionMismatch(format!(
                "n = {} but {} f rows and {} Phi rows",
                spec.n,
                spec.f.len(),
                spec.phi.len()
            )));
        }
        let parse = |row: usize, s: &str| parse_dynamics(s).map_err(|source| SystemError::Parse { row, source });
        let f = spec.f.iter().enumerate().map(|(i, s)| parse(i + 1, s)).collect::<Result<Vec<_>, _>>()?;
        let mut phi = Vec::with_capacity(spec.n);
        for (i, row) in spec.phi.iter().enumerate() {
            let exprs = row.items().into_iter().map(|s| parse(i + 1, s)).collect::<Result<Vec<_>, _>>()?;
            phi.push(exprs);
        }
        if let Some(dims) = &spec.dist_dims {
            if dims.len() != spec.n || dims.iter().zip(&phi).any(|(d, p)| *d != p.len()) {
                return Err(SystemError::DimensionMismatch("dist_dims disagrees with the Phi rows".into()));
            }
        }
        let x_star = spec.x_star.clone().unwrap_or_else(|| vec![0.0; spec.n]);
        Self::new(spec.period, f, phi, x_star, spec.u_star.unwrap_or(0.0))
    }

    /// Canonical serialized form; `from_spec(to_spec())` reproduces the system.
    pub fn to_spec(&self) -> SystemSpec {
        SystemSpec {
            n: self.n(),
            period: self.period,
            f: self.f.iter().map(|e| e.to_string()).collect(),
            phi: self
                .phi
                .iter()
                .map(|row| match row.as_slice() {
                    [single] => RowSpec::Scalar(single.to_string()),
                    many => RowSpec::Channels(many.iter().map(|e| e.to_string()).collect()),
                })
                .collect(),
            x_star: Some(self.x_star.clone()),
            u_star: Some(self.u_star),
            dist_dims: Some(self.dist_dims()),
        }
    }

    pub fn n(&self) -> usize {
        self.f.len()
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn x_star(&self) -> &[f64] {
        &self.x_star
    }

    pub fn u_star(&self) -> f64 {
        self.u_star
    }

    pub fn dist_dims(&self) -> Vec<usize> {
        self.phi.iter().map(Vec::len).collect()
    }

    pub fn total_channels(&self) -> usize {
        self.phi.iter().map(Vec::len).sum()
    }

    pub fn f_expr(&self, row: usize) -> &Expr {
        &self.f[row - 1]
    }

    pub fn phi_exprs(&self, row: usize) -> &[Expr] {
        &self.phi[row - 1]
    }

    /// `f_row(t, x, u)` on a full state.
    pub fn eval_f_full(&self, row: usize, t: f64, x: &[f64], u: f64) -> f64 {
        self.f[row - 1].eval(&EvalPoint { t, period: self.period, state: x, control: u })
    }

    /// `f_row(t, x_1..x_{row+1})`; the last entry of `head` is `u` when `row = n`.
    pub fn eval_f(&self, row: usize, t: f64, head: &[f64]) -> f64 {
        let n = self.n();
        let (state, control) = if row == n { (&head[..n], head[n]) } else { (head, 0.0) };
        self.f[row - 1].eval(&EvalPoint { t, period: self.period, state, control })
    }

    pub fn eval_phi(&self, row: usize, channel: usize, t: f64, head: &[f64]) -> f64 {
        self.phi[row - 1][channel].eval(&EvalPoint { t, period: self.period, state: head, control: 0.0 })
    }

    /// Right-hand side of the plant.
    pub fn eval_rhs(&self, t: f64, x: &[f64], u: f64, delta: &[f64]) -> Result<Vec<f64>, SystemError> {
        let n = self.n();
        if x.len() != n {
            return Err(SystemError::DimensionMismatch(format!("state has {} entries, expected {n}", x.len())));
        }
        if delta.len() != self.total_channels() {
            return Err(SystemError::DimensionMismatch(format!(
                "disturbance has {} entries, expected {}",
                delta.len(),
                self.total_channels()
            )));
        }
        let mut out = Vec::with_capacity(n);
        let mut offset = 0;
        for row in 1..=n {
            let mut v = self.eval_f_full(row, t, x, u);
            for (c, d) in delta[offset..offset + self.phi[row - 1].len()].iter().enumerate() {
                if *d != 0.0 {
                    v += d * self.eval_phi(row, c, t, x);
                }
            }
            offset += self.phi[row - 1].len();
            if !v.is_finite() {
                return Err(SystemError::NonFiniteValue(format!("row {row} at t = {t}")));
            }
            out.push(v);
        }
        Ok(out)
    }
}

/// Sampling plan for the assumption screen.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionGrid {
    pub t_samples: usize,
    /// Half-width of the state box around the equilibrium.
    pub box_half_width: f64,
    pub box_samples: usize,
    /// Half-width of the interval swept by `x_{i+1}` for the range check.
    pub sweep_half_width: f64,
    pub sweep_samples: usize,
    pub range_target: f64,
    pub deriv_floor: f64,
    pub h_diff: f64,
}

impl Default for AssumptionGrid {
    fn default() -> Self {
        AssumptionGrid {
            t_samples: 16,
            box_half_width: 1.0,
            box_samples: 3,
            sweep_half_width: 100.0,
            sweep_samples: 401,
            range_target: 10.0,
            deriv_floor: 1e-6,
            h_diff: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RowCheck {
    pub row: usize,
    pub value: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AssumptionReport {
    pub periodicity_residual: f64,
    /// Worst (smallest) coverage of `[-target, target]` per row; pass iff it reaches the target.
    pub range_coverage: Vec<RowCheck>,
    /// Smallest `|∂f_i/∂x_{i+1}|` at the equilibrium over sampled times.
    pub control_derivative: Vec<RowCheck>,
    pub equilibrium_residual: f64,
    /// Largest `|Φ_i(t, x*)|`; nonzero means additive disturbances move the equilibrium.
    pub disturbance_at_equilibrium: f64,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.periodicity_residual <= EQUILIBRIUM_TOL
            && self.equilibrium_residual <= EQUILIBRIUM_TOL
            && self.range_coverage.iter().all(|r| r.pass)
            && self.control_derivative.iter().all(|r| r.pass)
    }
}

fn box_points(center: &[f64], half: f64, samples: usize) -> Vec<Vec<f64>> {
    let axis = linspace(-half, half, samples.max(1));
    let mut pts = vec![Vec::new()];
    for c in center {
        pts = pts
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |a| {
                    let mut q = p.clone();
                    q.push(c + a);
                    q
                })
            })
            .collect();
    }
    pts
}

/// Numerical screen of periodicity, surjectivity, control direction at the
/// equilibrium, and equilibrium residuals.
pub fn check_assumptions(sys: &GtfSystem, grid: &AssumptionGrid) -> AssumptionReport {
    let n = sys.n();
    let period = sys.period();
    let ts = linspace(0.0, period, grid.t_samples.max(2));
    let mut full_star = sys.x_star.clone();
    full_star.push(sys.u_star);

    let mut periodicity: f64 = 0.0;
    let mut eq: f64 = 0.0;
    let mut phi_eq: f64 = 0.0;
    for &t in &ts {
        for p in box_points(&sys.x_star, grid.box_half_width, grid.box_samples.min(3)) {
            for row in 1..=n {
                let a = sys.eval_f_full(row, t, &p, sys.u_star + 0.5);
                let b = sys.eval_f_full(row, t + period, &p, sys.u_star + 0.5);
                periodicity = periodicity.max((a - b).abs());
            }
        }
        for row in 1..=n {
            eq = eq.max(sys.eval_f(row, t, &full_star[..=row]).abs());
            for c in 0..sys.phi_exprs(row).len() {
                phi_eq = phi_eq.max(sys.eval_phi(row, c, t, &full_star[..row]).abs());
            }
        }
    }

    let sweep = linspace(-grid.sweep_half_width, grid.sweep_half_width, grid.sweep_samples.max(2));
    let mut range_coverage = Vec::with_capacity(n);
    let mut control_derivative = Vec::with_capacity(n);
    for row in 1..=n {
        let mut coverage = f64::INFINITY;
        for &t in ts.iter().step_by((ts.len() / 4).max(1)) {
            for base in box_points(&sys.x_star[..row], grid.box_half_width, grid.box_samples) {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                let mut head = base.clone();
                head.push(0.0);
                for &s in &sweep {
                    head[row] = full_star[row] + s;
                    let v = sys.eval_f(row, t, &head);
                    if v.is_finite() {
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                coverage = coverage.min((-lo).min(hi));
            }
        }
        range_coverage.push(RowCheck { row, value: coverage, pass: coverage >= grid.range_target });

        let mut smallest = f64::INFINITY;
        for &t in &ts {
            let mut head = full_star[..=row].to_vec();
            let d = central_diff(
                |s| {
                    head[row] = s;
                    sys.eval_f(row, t, &head)
                },
                full_star[row],
                grid.h_diff,
            );
            smallest = smallest.min(d.abs());
        }
        control_derivative.push(RowCheck { row, value: smallest, pass: smallest >= grid.deriv_floor });
    }

    AssumptionReport {
        periodicity_residual: periodicity,
        range_coverage,
        control_derivative,
        equilibrium_residual: eq,
        disturbance_at_equilibrium: phi_eq,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    Zero,
    Constant,
    PiecewiseRandom,
    SinusoidHeld,
}

/// Piecewise-constant disturbance; the last value extends to infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSignal {
    breakpoints: Vec<f64>,
    values: Vec<Vec<f64>>,
    linf: f64,
}

impl DisturbanceSignal {
    pub fn new(breakpoints: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self, SystemError> {
        if breakpoints.is_empty() || breakpoints.len() != values.len() {
            return Err(SystemError::BadParameter("one value per breakpoint is required".into()));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SystemError::BadParameter("breakpoints must increase".into()));
        }
        let dims = values[0].len();
        if values.iter().any(|v| v.len() != dims) {
            return Err(SystemError::DimensionMismatch("disturbance values differ in width".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SystemError::NonFiniteValue("disturbance value".into()));
        }
        let linf = values.iter().map(|v| norm(v)).fold(0.0, f64::max);
        Ok(DisturbanceSignal { breakpoints, values, linf })
    }

    pub fn zero(dims: usize) -> Self {
        DisturbanceSignal { breakpoints: vec![0.0], values: vec![vec![0.0; dims]], linf: 0.0 }
    }

    pub fn constant(value: Vec<f64>) -> Self {
        let linf = norm(&value);
        DisturbanceSignal { breakpoints: vec![0.0], values: vec![value], linf }
    }

    pub fn linf(&self) -> f64 {
        self.linf
    }

    pub fn dims(&self) -> usize {
        self.values[0].len()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Value held at time `t` (the first value before the first breakpoint).
    pub fn at(&self, t: f64) -> &[f64] {
        let idx = self.breakpoints.partition_point(|&b| b <= t);
        &self.values[idx.saturating_sub(1)]
    }

    /// Places this signal's channels at `channels` of a `dims`-wide signal.
    pub fn embed(&self, dims: usize, channels: &[usize]) -> Result<Self, SystemError> {
        if channels.len() != self.dims() || channels.iter().any(|&c| c >= dims) {
            return Err(SystemError::DimensionMismatch("channel map does not fit".into()));
        }
        let values = self
            .values
            .iter()
            .map(|v| {
                let mut w = vec![0.0; dims];
                for (&c, &x) in channels.iter().zip(v) {
                    w[c] = x;
                }
                w
            })
            .collect();
        Ok(DisturbanceSignal { breakpoints: self.breakpoints.clone(), values, linf: self.linf })
    }
}

/// Builds a disturbance on `[0, horizon]` whose sup norm is at most `amplitude`.
///
/// `sinusoid_held` holds `amplitude·sin(2πt/(16·dwell))` over each dwell window,
/// split evenly across channels.
pub fn make_disturbance(
    kind: DisturbanceKind,
    amplitude: f64,
    dwell: f64,
    seed: u64,
    horizon: f64,
    dims: usize,
) -> Result<DisturbanceSignal, SystemError> {
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(SystemError::BadParameter(format!("amplitude must be non-negative, got {amplitude}")));
    }
    if !(dwell > 0.0 && dwell.is_finite()) {
        return Err(SystemError::BadParameter(format!("dwell must be positive, got {dwell}")));
    }
    if !(horizon >= 0.0) || dims == 0 {
        return Err(SystemError::BadParameter("horizon must be non-negative and dims positive".into()));
    }
    let even = amplitude / (dims as f64).sqrt();
    let windows = ((horizon / dwell).ceil() as usize).max(1);
    let breakpoints: Vec<f64> = (0..windows).map(|j| j as f64 * dwell).collect();
    let values = match kind {
        DisturbanceKind::Zero => return Ok(DisturbanceSignal::zero(dims)),
        DisturbanceKind::Constant => return Ok(DisturbanceSignal::constant(vec![even; dims])),
        DisturbanceKind::PiecewiseRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..windows)
                .map(|_| loop {
                    let v: Vec<f64> = (0..dims).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                    if norm(&v) <= 1.0 {
                        break v.into_iter().map(|x| x * amplitude).collect();
                    }
                })
                .collect()
        }
        DisturbanceKind::SinusoidHeld => breakpoints
            .iter()
            .map(|&t| {
                let s = (2.0 * std::f64::consts::PI * t / (16.0 * dwell)).sin();
                vec![even * s; dims]
            })
            .collect(),
    };
    DisturbanceSignal::new(breakpoints, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn example_one() -> GtfSystem {
        GtfSystem::from_spec(&SystemSpec {
            n: 2,
            period: 10.0,
            f: vec!["x2^3 - (1 - x1^2)*x2".into(), "u".into()],
            phi: vec![RowSpec::Scalar("0".into()), RowSpec::Scalar("1".into())],
            x_star: None,
            u_star: None,
            dist_dims: None,
        })
        .unwrap()
    }

    fn spec(f: &[&str], phi: &[&str]) -> SystemSpec {
        SystemSpec {
            n: f.len(),
            period: 1.0,
            f: f.iter().map(|s| s.to_string()).collect(),
            phi: phi.iter().map(|s| RowSpec::Scalar(s.to_string())).collect(),
            x_star: None,
            u_star: None,
            dist_dims: None,
        }
    }

    #[test]
    fn example_one_rhs() {
        let sys = example_one();
        assert_eq!(sys.eval_rhs(0.0, &[0.0, 0.0], 0.0, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        // 1^3 - (1 - 0)*1 = 0
        assert_eq!(sys.eval_rhs(0.0, &[0.0, 1.0], 0.0, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(sys.eval_rhs(0.0, &[0.5, 2.0], 1.0, &[0.3, 0.2]).unwrap(), vec![6.5, 1.2]);
    }

    #[test]
    fn scalar_decay_rhs() {
        let sys = GtfSystem::from_spec(&spec(&["-x1 + 0*u"], &["1"])).unwrap();
        assert_eq!(sys.eval_rhs(0.0, &[2.0], 0.0, &[0.5]).unwrap(), vec![-1.5]);
    }

    #[test]
    fn dimension_checks() {
        let sys = example_one();
        assert!(matches!(sys.eval_rhs(0.0, &[0.0], 0.0, &[0.0, 0.0]), Err(SystemError::DimensionMismatch(_))));
        assert!(matches!(sys.eval_rhs(0.0, &[0.0, 0.0], 0.0, &[0.0]), Err(SystemError::DimensionMismatch(_))));
        assert!(matches!(sys.eval_rhs(0.0, &[1e200, 1e200], 0.0, &[0.0, 0.0]), Err(SystemError::NonFiniteValue(_))));
    }

    #[test]
    fn triangularity_is_enforced() {
        let err = GtfSystem::from_spec(&spec(&["x3", "x3", "u"], &["0", "0", "0"])).unwrap_err();
        assert!(matches!(err, SystemError::TriangularityViolation { what: "f", row: 1, .. }));
        let err = GtfSystem::from_spec(&spec(&["u", "u"], &["0", "0"])).unwrap_err();
        assert!(matches!(err, SystemError::TriangularityViolation { row: 1, .. }));
        let err = GtfSystem::from_spec(&spec(&["x2", "u"], &["x2", "0"])).unwrap_err();
        assert!(matches!(err, SystemError::TriangularityViolation { what: "Phi", row: 1, .. }));
    }

    #[test]
    fn equilibrium_is_enforced() {
        let err = GtfSystem::from_spec(&spec(&["x2 + 1", "u"], &["0", "0"])).unwrap_err();
        assert!(matches!(err, SystemError::NotAnEquilibrium { .. }));
    }

    #[test]
    fn assumption_screen() {
        let report = check_assumptions(&example_one(), &AssumptionGrid::default());
        assert!(report.passed(), "{report:?}");
        assert!((report.control_derivative[0].value - 1.0).abs() < 1e-8);
        assert!((report.control_derivative[1].value - 1.0).abs() < 1e-8);

        let chain = GtfSystem::from_spec(&spec(&["x2", "u"], &["1", "1"])).unwrap();
        let report = check_assumptions(&chain, &AssumptionGrid::default());
        assert!(report.passed());
        assert_eq!(report.disturbance_at_equilibrium, 1.0);

        let even = GtfSystem::from_spec(&spec(&["x2^2", "u"], &["0", "0"])).unwrap();
        let report = check_assumptions(&even, &AssumptionGrid::default());
        assert!(!report.range_coverage[0].pass);
        assert!(report.range_coverage[1].pass);
    }

    #[test]
    fn spec_round_trip() {
        let sys = example_one();
        let json = serde_json::to_string(&sys.to_spec()).unwrap();
        let back: SystemSpec = serde_json::from_str(&json).unwrap();
        let again = GtfSystem::from_spec(&back).unwrap();
        assert_eq!(serde_json::to_string(&again.to_spec()).unwrap(), json);
    }

    #[test]
    fn toml_with_channel_arrays() {
        let text = r#"
n = 2
T = 6.283185307179586
f = ["x2", "u"]
Phi = ["x1", ["x1*x2", "sinT*x2"]]
"#;
        let spec: SystemSpec = toml::from_str(text).unwrap();
        let sys = GtfSystem::from_spec(&spec).unwrap();
        assert_eq!(sys.dist_dims(), vec![1, 2]);
        let d = sys.eval_rhs(0.0, &[1.0, 2.0], 0.0, &[1.0, 0.5, 0.0]).unwrap();
        assert_eq!(d, vec![3.0, 1.0]);
    }

    #[test]
    fn disturbances() {
        assert_eq!(make_disturbance(DisturbanceKind::Zero, 1.0, 0.1, 0, 5.0, 2).unwrap().linf(), 0.0);
        let c = make_disturbance(DisturbanceKind::Constant, 0.3, 0.1, 0, 5.0, 1).unwrap();
        assert!((c.linf() - 0.3).abs() < 1e-15);
        let a = make_disturbance(DisturbanceKind::PiecewiseRandom, 1.0, 0.1, 7, 5.0, 2).unwrap();
        let b = make_disturbance(DisturbanceKind::PiecewiseRandom, 1.0, 0.1, 7, 5.0, 2).unwrap();
        assert_eq!(a, b);
        assert!(a.linf() <= 1.0);
        let s = make_disturbance(DisturbanceKind::SinusoidHeld, 0.5, 0.1, 0, 5.0, 1).unwrap();
        assert!(s.linf() <= 0.5 + 1e-15);
        assert_eq!(a.at(0.15), &a.values()[1][..]);
        assert_eq!(a.at(100.0), a.values().last().unwrap().as_slice());
        assert!(matches!(
            make_disturbance(DisturbanceKind::Constant, -1.0, 0.1, 0, 1.0, 1),
            Err(SystemError::BadParameter(_))
        ));
        assert!(matches!(
            make_disturbance(DisturbanceKind::Constant, 1.0, 0.0, 0, 1.0, 1),
            Err(SystemError::BadParameter(_))
        ));
        let e = c.embed(2, &[1]).unwrap();
        assert_eq!(e.at(0.0), &[0.0, 0.3]);
    }
}
