//! Backstepping coordinates and the extended subsystems they produce.
//!
//! At stage `k` the state is `y = (z_1, …, z_{k+1})` and the control is the
//! next plant state `v = x_{k+2}` (or `u` at the last stage). Coordinates are
//! shifted so that the equilibrium sits at the origin:
//! `z_1 = x_1 - x*_1`, `z_{j+1} = x_{j+1} - x*_{j+1} - α_j(t, z_1..z_j)`.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::system::GtfSystem;

/// A scalar feedback `(t, z) ↦ value`, T-periodic in `t`.
pub trait StageMap: Send + Sync {
    fn eval(&self, t: f64, z: &[f64]) -> f64;
}

impl<F> StageMap for F
where
    F: Fn(f64, &[f64]) -> f64 + Send + Sync,
{
    fn eval(&self, t: f64, z: &[f64]) -> f64 {
        self(t, z)
    }
}

pub type SharedStage = Arc<dyn StageMap>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtendError {
    #[error("derivative of the stage law is unavailable at t = {t}, z = {z:?}")]
    DerivativeUnavailable { t: f64, z: Vec<f64> },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Vector field and disturbance map of an extended subsystem at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    /// `ψ(t, y, v)`, one entry per state.
    pub psi: Vec<f64>,
    /// `φ(t, y)`, one row per state, one column per disturbance channel.
    pub phi: Vec<Vec<f64>>,
}

/// Inner-block drift data that is independent of the newest coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerBlock {
    below: Prepared,
    alpha: f64,
}

/// Control-independent part of the extended dynamics at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub t: f64,
    level: usize,
    /// Shifted plant coordinates `x_1..x_{k+1}`.
    pub x_head: Vec<f64>,
    /// `ψ` of the inner block (`k` entries), which does not depend on the control.
    pub inner: Vec<f64>,
    offset: f64,
    /// `φ(t, y)` when requested, otherwise empty.
    pub phi: Vec<Vec<f64>>,
}

/// `ẏ = ψ(t, y, v) + Σ_j Δ_j φ_j(t, y)` for the stage whose lower laws are `stages`.
#[derive(Clone)]
pub struct ExtendedSubsystem {
    sys: Arc<GtfSystem>,
    stages: Vec<SharedStage>,
    h_diff: f64,
}

impl fmt::Debug for ExtendedSubsystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExtendedSubsystem")
            .field("k", &self.k())
            .field("channels", &self.channels())
            .field("h_diff", &self.h_diff)
            .finish()
    }
}

/// The first subsystem: `ẋ_1 = f_1(t, x_1, x_2) + δ_1 Φ_1(t, x_1)`.
pub fn base_subsystem(sys: Arc<GtfSystem>, h_diff: f64) -> ExtendedSubsystem {
    ExtendedSubsystem { sys, stages: Vec::new(), h_diff }
}

/// Appends the next integrator, with `alpha` assigned to the current control.
pub fn extend_subsystem(prev: &ExtendedSubsystem, alpha: SharedStage) -> Result<ExtendedSubsystem, ExtendError> {
    let k = prev.k();
    if k + 1 >= prev.sys.n() {
        return Err(ExtendError::DimensionMismatch(format!(
            "stage {k} already controls the plant input; nothing left to extend"
        )));
    }
    let h = prev.h_diff;
    for probe in [0.0, 0.5, -0.5] {
        let z = vec![probe; k + 1];
        for t in [0.0, 0.37 * prev.sys.period()] {
            let mut vals = vec![alpha.eval(t, &z), alpha.eval(t + h, &z), alpha.eval(t - h, &z)];
            for i in 0..=k {
                let mut zp = z.clone();
                zp[i] += h;
                vals.push(alpha.eval(t, &zp));
                zp[i] -= 2.0 * h;
                vals.push(alpha.eval(t, &zp));
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(ExtendError::DerivativeUnavailable { t, z });
            }
        }
    }
    let mut stages = prev.stages.clone();
    stages.push(alpha);
    Ok(ExtendedSubsystem { sys: prev.sys.clone(), stages, h_diff: h })
}

impl ExtendedSubsystem {
    /// Stage index; the state has `k + 1` entries.
    pub fn k(&self) -> usize {
        self.stages.len()
    }

    pub fn dim(&self) -> usize {
        self.k() + 1
    }

    pub fn system(&self) -> &Arc<GtfSystem> {
        &self.sys
    }

    pub fn period(&self) -> f64 {
        self.sys.period()
    }

    pub fn h_diff(&self) -> f64 {
        self.h_diff
    }

    pub fn stages(&self) -> &[SharedStage] {
        &self.stages
    }

    /// Whether the control of this stage is the plant input.
    pub fn is_last(&self) -> bool {
        self.dim() == self.sys.n()
    }

    /// Disturbance channels acting on this stage (rows `1..=k+1`).
    pub fn channels(&self) -> usize {
        self.sys.dist_dims()[..self.dim()].iter().sum()
    }

    /// Channels acting on the inner `z` block.
    pub fn inner_channels(&self) -> usize {
        self.sys.dist_dims()[..self.k()].iter().sum()
    }

    fn plant_f(&self, row: usize, t: f64, head: &[f64]) -> f64 {
        let n = self.sys.n();
        let mut x: Vec<f64> = head.to_vec();
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += if i < n { self.sys.x_star()[i] } else { self.sys.u_star() };
        }
        self.sys.eval_f(row, t, &x)
    }

    fn plant_phi(&self, row: usize, t: f64, head: &[f64]) -> Vec<f64> {
        let x: Vec<f64> = head.iter().zip(self.sys.x_star()).map(|(a, b)| a + b).collect();
        (0..self.sys.phi_exprs(row).len()).map(|c| self.sys.eval_phi(row, c, t, &x)).collect()
    }

    /// Shifted plant coordinates `x - x*` (first `y.len()` entries) from `y`.
    pub fn to_plant(&self, t: f64, y: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(y.len());
        for j in 0..y.len() {
            let offset = if j == 0 { 0.0 } else { self.stages[j - 1].eval(t, &y[..j]) };
            x.push(y[j] + offset);
        }
        x
    }

    /// `y` from shifted plant coordinates `x - x*`.
    pub fn from_plant(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = Vec::with_capacity(x.len());
        for j in 0..x.len() {
            let offset = if j == 0 { 0.0 } else { self.stages[j - 1].eval(t, &z[..j]) };
            z.push(x[j] - offset);
        }
        z
    }

    /// `∂α_level/∂t` and `∂α_level/∂z` by central differences.
    pub fn stage_gradient(&self, level: usize, t: f64, z: &[f64]) -> (f64, Vec<f64>) {
        let alpha = &self.stages[level - 1];
        let h = self.h_diff;
        let dt = (alpha.eval(t + h, z) - alpha.eval(t - h, z)) / (2.0 * h);
        let mut zp = z.to_vec();
        let dz = (0..z.len())
            .map(|i| {
                let c = zp[i];
                zp[i] = c + h;
                let a = alpha.eval(t, &zp);
                zp[i] = c - h;
                let b = alpha.eval(t, &zp);
                zp[i] = c;
                (a - b) / (2.0 * h)
            })
            .collect();
        (dt, dz)
    }

    fn prepare_at(&self, level: usize, t: f64, y: &[f64], with_phi: bool) -> Prepared {
        if level == 0 {
            let phi = if with_phi { vec![self.plant_phi(1, t, &y[..1])] } else { Vec::new() };
            return Prepared { t, level, x_head: vec![y[0]], inner: Vec::new(), offset: 0.0, phi };
        }
        let z = &y[..level];
        let s = y[level] + self.stages[level - 1].eval(t, z);
        let below = self.prepare_at(level - 1, t, z, with_phi);
        let mut inner = below.inner.clone();
        inner.push(self.top(&below, s));
        let (dt, dz) = self.stage_gradient(level, t, z);
        let offset = -dt - dz.iter().zip(&inner).map(|(a, b)| a * b).sum::<f64>();
        let mut x_head = below.x_head;
        x_head.push(s);
        let mut phi = Vec::new();
        if with_phi {
            let old = below.phi.first().map_or(0, Vec::len);
            let fresh = self.plant_phi(level + 1, t, &x_head);
            let total = old + fresh.len();
            for row in &below.phi {
                let mut r = row.clone();
                r.resize(total, 0.0);
                phi.push(r);
            }
            let mut last: Vec<f64> =
                (0..old).map(|j| -dz.iter().zip(&below.phi).map(|(d, row)| d * row[j]).sum::<f64>()).collect();
            last.extend(fresh);
            phi.push(last);
        }
        Prepared { t, level, x_head, inner, offset, phi }
    }

    /// Evaluates everything in `ψ(t, y, ·)` and `φ(t, y)` that does not
    /// depend on the control; see [`ExtendedSubsystem::top`].
    pub fn prepare(&self, t: f64, y: &[f64], with_phi: bool) -> Prepared {
        self.prepare_at(self.k(), t, y, with_phi)
    }

    /// `g_{k+1}(t, y, v)` from a prepared point.
    pub fn top(&self, p: &Prepared, v: f64) -> f64 {
        let mut head = p.x_head.clone();
        head.push(v);
        self.plant_f(p.level + 1, p.t, &head) + p.offset
    }

    /// `ψ(t, y, v)` and `φ(t, y)`.
    pub fn field(&self, t: f64, y: &[f64], v: f64) -> Field {
        let p = self.prepare(t, y, true);
        let mut psi = p.inner.clone();
        psi.push(self.top(&p, v));
        Field { psi, phi: p.phi }
    }

    pub fn psi(&self, t: f64, y: &[f64], v: f64) -> Vec<f64> {
        let p = self.prepare(t, y, false);
        let mut psi = p.inner.clone();
        psi.push(self.top(&p, v));
        psi
    }

    pub fn phi(&self, t: f64, y: &[f64]) -> Vec<Vec<f64>> {
        self.prepare(t, y, true).phi
    }

    /// `g_{k+1}(t, y, v)`, the dynamics of the newest coordinate.
    pub fn g_top(&self, t: f64, y: &[f64], v: f64) -> f64 {
        self.top(&self.prepare(t, y, false), v)
    }

    /// Everything in the inner drift `g(t, z, ·)` that does not depend on the
    /// newest coordinate.
    pub fn inner_block(&self, t: f64, z: &[f64]) -> InnerBlock {
        let k = self.k();
        assert!(k > 0, "the first stage has no inner block");
        InnerBlock { below: self.prepare_at(k - 1, t, z, false), alpha: self.stages[k - 1].eval(t, z) }
    }

    /// `g(t, z, s)` from a prepared inner block.
    pub fn inner_at(&self, block: &InnerBlock, s: f64) -> Vec<f64> {
        let mut inner = block.below.inner.clone();
        inner.push(self.top(&block.below, s + block.alpha));
        inner
    }

    /// `g(t, z, s)`: drift of the inner block when the newest coordinate equals `s`.
    pub fn inner_drift(&self, t: f64, z: &[f64], s: f64) -> Vec<f64> {
        self.inner_at(&self.inner_block(t, z), s)
    }

    /// Evaluates the shifted plant rows `1..=k+1` directly (for cross-checks).
    pub fn plant_rows(&self, t: f64, x: &[f64], v: f64, delta: &[f64]) -> Vec<f64> {
        let dims = self.sys.dist_dims();
        let mut offset = 0;
        (1..=self.dim())
            .map(|row| {
                let mut head = x[..row].to_vec();
                head.push(if row < self.dim() { x[row] } else { v });
                let phi = self.plant_phi(row, t, &x[..row]);
                let d: f64 = phi.iter().zip(&delta[offset..offset + dims[row - 1]]).map(|(a, b)| a * b).sum();
                offset += dims[row - 1];
                self.plant_f(row, t, &head) + d
            })
            .collect()
    }
}
