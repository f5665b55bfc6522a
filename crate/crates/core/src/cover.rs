//! Annulus cover of the state space: finite radius and gain ladders, region
//! classification, cell-wise constant controls, the blended global feedback
//! and the one-period funnel check.

use rustc_hash::FxHashMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backstepping::{box_grid, LocalSynthesis, StageLaw};
use crate::comparison::ComparisonFunction;
use crate::extended::{ExtendedSubsystem, Prepared, StageMap};
use crate::numerics::{dot, linspace, norm, plateau, root_nearest_zero, transition};
use crate::simulation::{integrate, member_seed, sample_ball, FnField, StepSpec};
use crate::system::{make_disturbance, DisturbanceKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoverError {
    #[error("ladder infeasible at q = {q}: {reason}")]
    LadderInfeasible { q: i32, reason: String },
    #[error("|y| = {norm} lies outside the ladder range [{lo}, {hi})")]
    OutOfRange { norm: f64, lo: f64, hi: f64 },
    #[error("no admissible control within |v| <= {limit} at t = {t}, y = {y:?}")]
    ControlNotFound { t: f64, y: Vec<f64>, limit: f64 },
    #[error("margin lost at t = {t}, y = {y:?}: inequality value {value:e}")]
    MarginLost { t: f64, y: Vec<f64>, value: f64 },
    #[error("coverage gap at t = {t}, y = {y:?}")]
    CoverageGap { t: f64, y: Vec<f64> },
    #[error("bad cover parameter: {0}")]
    BadParameter(String),
    #[error("simulation failed: {0}")]
    Simulation(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoverParams {
    pub q_lo: i32,
    pub q_hi: i32,
    /// Ratio between consecutive rungs above the dense inner block.
    pub outer_ratio: f64,
    /// Tube half-width; a quarter of the local radius when absent.
    pub sigma: Option<f64>,
    pub time_slabs: usize,
    /// Bump width as a fraction of the cell width, per axis.
    pub overlap: f64,
    pub max_depth: u32,
    pub tol_p: f64,
    /// Required slack of the cell inequalities relative to `2D`.
    pub slack: f64,
    pub control_limit: f64,
    /// Width of the switching band between the local feedback and the cells,
    /// in units of the collar phase.
    pub collar_width: f64,
    /// Fraction of the period spent sweeping the switching band outward.
    pub collar_sweep: f64,
    /// Samples for constant estimation on the tube (per axis).
    pub grid_samples: usize,
    /// Runs per rung when checking the inner funnel.
    pub ladder_runs: usize,
    pub ladder_steps: usize,
    pub coverage_samples: usize,
    pub seed: u64,
}

impl Default for CoverParams {
    fn default() -> Self {
        CoverParams {
            q_lo: -3,
            q_hi: 6,
            outer_ratio: 1.25,
            sigma: None,
            time_slabs: 4,
            overlap: 0.1,
            max_depth: 6,
            tol_p: 1e-8,
            slack: 1e-2,
            control_limit: 1e6,
            collar_width: 0.5,
            collar_sweep: 0.005,
            grid_samples: 9,
            ladder_runs: 8,
            ladder_steps: 400,
            coverage_samples: 2000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionTag {
    P,
    E,
    G,
}

/// Time-space tile before its control is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellBox {
    pub ring: i32,
    pub t_a: f64,
    pub t_b: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Bump half-widths: the bump is 1 on the tile and 0 beyond `h / 2` outside it.
    pub h_t: f64,
    pub h_y: Vec<f64>,
}

impl CellBox {
    fn new(ring: i32, t_a: f64, t_b: f64, lo: Vec<f64>, hi: Vec<f64>, overlap: f64) -> Self {
        let h_t = overlap * (t_b - t_a);
        let h_y = lo.iter().zip(&hi).map(|(a, b)| overlap * (b - a)).collect();
        CellBox { ring, t_a, t_b, lo, hi, h_t, h_y }
    }

    pub fn center(&self) -> (f64, Vec<f64>) {
        (0.5 * (self.t_a + self.t_b), self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect())
    }

    /// Diameter of the spatial support.
    pub fn diameter(&self) -> f64 {
        self.lo.iter().zip(&self.hi).zip(&self.h_y).map(|((a, b), h)| (b - a + h).powi(2)).sum::<f64>().sqrt()
    }

    /// Corners of the support in `(t, y)`.
    pub fn support_corners(&self) -> Vec<(f64, Vec<f64>)> {
        let d = self.lo.len();
        let mut out = Vec::with_capacity(1 << (d + 1));
        for mask in 0..(1usize << (d + 1)) {
            let t = if mask & 1 == 0 { self.t_a - self.h_t / 2.0 } else { self.t_b + self.h_t / 2.0 };
            let y = (0..d)
                .map(|i| {
                    if mask >> (i + 1) & 1 == 0 {
                        self.lo[i] - self.h_y[i] / 2.0
                    } else {
                        self.hi[i] + self.h_y[i] / 2.0
                    }
                })
                .collect();
            out.push((t, y));
        }
        out
    }

    fn split(&self, overlap: f64) -> Vec<CellBox> {
        let d = self.lo.len();
        let tm = 0.5 * (self.t_a + self.t_b);
        let mut out = Vec::with_capacity(1 << (d + 1));
        for mask in 0..(1usize << (d + 1)) {
            let (ta, tb) = if mask & 1 == 0 { (self.t_a, tm) } else { (tm, self.t_b) };
            let mut lo = Vec::with_capacity(d);
            let mut hi = Vec::with_capacity(d);
            for i in 0..d {
                let m = 0.5 * (self.lo[i] + self.hi[i]);
                if mask >> (i + 1) & 1 == 0 {
                    lo.push(self.lo[i]);
                    hi.push(m);
                } else {
                    lo.push(m);
                    hi.push(self.hi[i]);
                }
            }
            out.push(CellBox::new(self.ring, ta, tb, lo, hi, overlap));
        }
        out
    }

    fn bump(&self, t: f64, y: &[f64], period: f64) -> f64 {
        let mut p = 1.0;
        for i in 0..y.len() {
            p *= plateau(y[i], self.lo[i], self.hi[i], self.h_y[i] / 2.0);
            if p == 0.0 {
                return 0.0;
            }
        }
        let tau = t.rem_euclid(period);
        let pt = [tau - period, tau, tau + period]
            .iter()
            .map(|&s| plateau(s, self.t_a, self.t_b, self.h_t / 2.0))
            .fold(0.0, f64::max);
        p * pt
    }
}

/// Selected control of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellControl {
    pub region: RegionTag,
    pub control: f64,
    /// Verified slack: `-max` of the inequalities over the support corners,
    /// or `tol_p - |residual|` for tube cells.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverCell {
    #[serde(flatten)]
    pub cell: CellBox,
    pub region: RegionTag,
    pub control: f64,
    pub margin: f64,
    pub depth: u32,
    /// Grid tile and time slab this cell was split from.
    pub tile: [i64; 3],
    pub slab: usize,
}

/// Uniform tile grid of one ring on `[-r_{q+1}, r_{q+1}]^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingGrid {
    pub ring: i32,
    pub origin: f64,
    pub width: f64,
    pub per_axis: usize,
}

/// Transition from the local feedback to the cell controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Collar {
    /// Inside this radius the law is the local feedback.
    pub r_a: f64,
    /// Beyond this radius the law is carried by the cells alone.
    pub r_p: f64,
    /// Outer edge of the inner cutoff's support.
    pub r_bar: f64,
    pub width: f64,
    pub sweep: f64,
}

impl Collar {
    /// Collar phase: rises quickly over the sweep fraction of the period, then
    /// falls slowly, so the switching radius drifts inward and jumps back out.
    pub fn phase(&self, t: f64, period: f64) -> f64 {
        let tau = t.rem_euclid(period) / period;
        if tau < self.sweep {
            tau / self.sweep
        } else {
            1.0 - (tau - self.sweep) / (1.0 - self.sweep)
        }
    }

    /// Weight of the cells at `(t, |y|)`.
    pub fn cell_weight(&self, t: f64, n: f64, period: f64) -> f64 {
        if n <= self.r_a {
            return 0.0;
        }
        if n >= self.r_p {
            return 1.0;
        }
        let lambda = transition((n - self.r_a) / (self.r_p - self.r_a));
        transition((lambda * (1.0 + self.width) - self.phase(t, period)) / self.width)
    }

    /// Radial cutoff of the local feedback.
    pub fn cutoff(&self, n: f64) -> f64 {
        1.0 - transition((n - self.r_p) / (self.r_bar - self.r_p))
    }
}

type CellKey = (i32, [i64; 3], usize);

/// Ladders, per-ring constants and cells of one stage.
#[derive(Clone, Serialize, Deserialize)]
pub struct AnnulusCover {
    pub q_lo: i32,
    pub q_hi: i32,
    pub k: usize,
    pub period: f64,
    /// `r[q - q_lo]` for `q` in `[q_lo, q_hi + 5]`.
    pub r: Vec<f64>,
    /// `rho`, `R` and `d` for `q` in `[q_lo, q_hi + 4]`.
    pub rho: Vec<f64>,
    #[serde(rename = "R")]
    pub big_r: Vec<f64>,
    pub d: Vec<f64>,
    pub sigma: f64,
    pub kappa: f64,
    /// Per-ring constants for the ring `[r_q, r_{q+1})`, indexed by `q - ring_lo`.
    pub ring_lo: i32,
    #[serde(rename = "D")]
    pub big_d: Vec<f64>,
    pub m: Vec<f64>,
    pub eps: Vec<f64>,
    /// Largest cell control per ring.
    #[serde(rename = "M")]
    pub big_m: Vec<f64>,
    pub collar: Collar,
    pub time_slabs: usize,
    pub grids: Vec<RingGrid>,
    pub cells: Vec<CoverCell>,
    #[serde(skip)]
    index: FxHashMap<CellKey, Vec<usize>>,
}

impl fmt::Debug for AnnulusCover {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnnulusCover")
            .field("q_lo", &self.q_lo)
            .field("q_hi", &self.q_hi)
            .field("r", &self.r)
            .field("sigma", &self.sigma)
            .field("kappa", &self.kappa)
            .field("cells", &self.cells.len())
            .finish()
    }
}

impl AnnulusCover {
    pub fn q0(&self) -> i32 {
        -self.q_lo - 1
    }

    pub fn dim(&self) -> usize {
        self.k + 1
    }

    pub fn r_at(&self, q: i32) -> f64 {
        self.r[(q - self.q_lo) as usize]
    }

    pub fn rho_at(&self, q: i32) -> f64 {
        self.rho[(q - self.q_lo) as usize]
    }

    pub fn big_r_at(&self, q: i32) -> f64 {
        self.big_r[(q - self.q_lo) as usize]
    }

    pub fn d_at(&self, q: i32) -> f64 {
        self.d[(q - self.q_lo) as usize]
    }

    /// Rings carrying cells.
    pub fn ring_range(&self) -> std::ops::RangeInclusive<i32> {
        self.ring_lo..=self.q_hi + 1
    }

    pub fn big_d_at(&self, ring: i32) -> f64 {
        self.big_d[(ring - self.ring_lo) as usize]
    }

    pub fn eps_at(&self, ring: i32) -> f64 {
        self.eps[(ring - self.ring_lo) as usize]
    }

    /// Outer radius of the cell-covered domain.
    pub fn cover_radius(&self) -> f64 {
        self.r_at(self.q_hi + 2)
    }

    /// Rebuilds the lookup index after deserialisation.
    pub fn rebuild_index(&mut self) {
        self.index.clear();
        for (i, c) in self.cells.iter().enumerate() {
            self.index.entry((c.cell.ring, c.tile, c.slab)).or_default().push(i);
        }
    }

    /// Sum of bumps and of bump-weighted controls at `(t, y)`.
    pub fn bump_sums(&self, t: f64, y: &[f64]) -> (f64, f64) {
        let n = norm(y);
        let slabs = self.time_slabs.max(1);
        let tau = t.rem_euclid(self.period);
        let slab = ((tau / self.period * slabs as f64) as usize).min(slabs - 1);
        let near = nearby_slabs(slab, slabs);
        let (mut sp, mut spc) = (0.0, 0.0);
        for g in &self.grids {
            let inner = self.r_at(g.ring) - 2.0 * g.width;
            let outer = self.r_at(g.ring + 1) + 2.0 * g.width;
            if n < inner || n > outer {
                continue;
            }
            let base: Vec<i64> = y.iter().map(|v| ((v - g.origin) / g.width).floor() as i64).collect();
            let d = y.len();
            for combo in 0..3usize.pow(d as u32) {
                let mut tile = [0i64; 3];
                let mut c = combo;
                for i in 0..d {
                    tile[i] = base[i] + (c % 3) as i64 - 1;
                    c /= 3;
                }
                for &s in &near {
                    if let Some(ids) = self.index.get(&(g.ring, tile, s)) {
                        for &id in ids {
                            let cell = &self.cells[id];
                            let p = cell.cell.bump(t, y, self.period);
                            if p > 0.0 {
                                sp += p;
                                spc += p * cell.control;
                            }
                        }
                    }
                }
            }
        }
        (sp, spc)
    }
}

fn nearby_slabs(slab: usize, slabs: usize) -> Vec<usize> {
    let mut out = vec![(slab + slabs - 1) % slabs, slab, (slab + 1) % slabs];
    out.sort_unstable();
    out.dedup();
    out
}

fn slope_excess(r: &[f64], big_r: &[f64], q_lo: i32, q0: i32, two_kappa_t: f64) -> Option<i32> {
    let at = |v: &[f64], q: i32| v[(q - q_lo) as usize];
    (-q0..=0).find(|&q| at(r, q + 2).powi(2) - at(big_r, q - 1).powi(2) >= two_kappa_t)
}

fn rungs(r0: f64, s: f64, ratio: f64, q_lo: i32, q_top: i32) -> Vec<f64> {
    let q0 = -q_lo - 1;
    (q_lo..=q_top)
        .map(|q| if q <= 2 { r0 * (1.0 + s).powi(q + q0) } else { r0 * (1.0 + s).powi(2 + q0) * ratio.powi(q - 2) })
        .collect()
}

fn interpolants(r: &[f64], count: usize) -> (Vec<f64>, Vec<f64>) {
    let rho = (0..count).map(|i| r[i] + (r[i + 1] - r[i]) / 3.0).collect();
    let big_r = (0..count).map(|i| r[i] + 2.0 * (r[i + 1] - r[i]) / 3.0).collect();
    (rho, big_r)
}

fn kappa_for(k: usize, r0: f64, r: &[f64], rho: &[f64], q_lo: i32) -> f64 {
    let base = r0 * r0 / 6.0;
    if k == 0 {
        return base;
    }
    let i1 = (1 - q_lo) as usize;
    let d1 = r[i1 + 1].powi(2) / 12.0;
    base.min((rho[i1].powi(2) - d1) / 4.0)
}

/// Worst inner funnel excess `max_t (|z|² + |ω|² - bound(t))` of the inner
/// block started on the sphere of radius `r_start`.
#[allow(clippy::too_many_arguments)]
fn inner_funnel_need(
    ext: &ExtendedSubsystem,
    r_start: f64,
    big_r_start: f64,
    omega_max: f64,
    delta_max: f64,
    runs: usize,
    steps: usize,
    seed: u64,
) -> Result<f64, CoverError> {
    let k = ext.k();
    let period = ext.period();
    let inner_ch = ext.inner_channels();
    let h = period / steps as f64;
    let needs: Vec<f64> = (0..runs)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(member_seed(seed, i));
            let mut z0 = sample_ball(&mut rng, k, 1.0);
            let nz = norm(&z0).max(1e-12);
            z0.iter_mut().for_each(|v| *v *= r_start / nz);
            let t0 = rng.gen_range(0.0..period);
            let omega =
                make_disturbance(DisturbanceKind::PiecewiseRandom, omega_max, period / 10.0, rng.gen(), t0 + period, 1)
                    .map_err(|e| CoverError::Simulation(e.to_string()))?;
            let dist = make_disturbance(
                DisturbanceKind::PiecewiseRandom,
                delta_max,
                period / 10.0,
                rng.gen(),
                t0 + period,
                inner_ch.max(1),
            )
            .map_err(|e| CoverError::Simulation(e.to_string()))?;
            let field = FnField {
                dim: k,
                channels: inner_ch.max(1),
                f: |t: f64, z: &[f64], delta: &[f64]| {
                    let w = omega.at(t)[0];
                    let mut y = z.to_vec();
                    y.push(w);
                    let p = ext.prepare(t, &y, true);
                    (0..k)
                        .map(|i| {
                            p.inner[i] + p.phi[i].iter().take(inner_ch).zip(delta).map(|(a, b)| a * b).sum::<f64>()
                        })
                        .collect()
                },
            };
            let traj = integrate(&field, &z0, t0, period, StepSpec::new(h), &dist)
                .map_err(|e| CoverError::Simulation(e.to_string()))?;
            if !traj.completed() {
                return Ok(f64::INFINITY);
            }
            let mut need: f64 = 0.0;
            for (t, z) in traj.times.iter().zip(&traj.states) {
                let frac = (t - t0) / period;
                if frac <= 0.0 {
                    continue;
                }
                let w = omega.at(*t)[0];
                let v = dot(z, z) + w * w;
                need = need.max((v - big_r_start.powi(2) * (1.0 - frac)) / frac);
            }
            Ok(need)
        })
        .collect::<Result<Vec<_>, CoverError>>()?;
    Ok(needs.into_iter().fold(0.0, f64::max))
}

/// Builds the radius and gain ladders for a stage whose local feedback holds
/// on the ball of radius `2 * local_radius`.
pub fn build_ladder(
    ext: &ExtendedSubsystem,
    gamma_k: Option<&ComparisonFunction>,
    local_radius: f64,
    params: &CoverParams,
) -> Result<AnnulusCover, CoverError> {
    let (q_lo, q_hi) = (params.q_lo, params.q_hi);
    if q_lo > -2 || q_hi < q_lo {
        return Err(CoverError::BadParameter(format!("ladder range [{q_lo}, {q_hi}] needs q_lo <= -2 <= q_hi")));
    }
    if !(local_radius > 0.0) || !(params.outer_ratio > 1.0) || params.time_slabs == 0 {
        return Err(CoverError::BadParameter("radius, ratio and slab count must be positive".into()));
    }
    let k = ext.k();
    let period = ext.period();
    let q0 = -q_lo - 1;
    let q_top = q_hi + 5;
    let count = (q_hi + 4 - q_lo + 1) as usize;
    let r0 = local_radius;
    let sigma = params.sigma.unwrap_or(r0 / 4.0);
    if !(sigma > 0.0) {
        return Err(CoverError::BadParameter(format!("sigma must be positive, got {sigma}")));
    }

    // Largest dense growth factor that keeps the slope bound with 5% slack.
    let feasible = |s: f64| {
        let r = rungs(r0, s, params.outer_ratio, q_lo, q_top);
        let (rho, big_r) = interpolants(&r, count);
        let kappa = kappa_for(k, r0, &r, &rho, q_lo);
        kappa > 0.0 && slope_excess(&r, &big_r, q_lo, q0, 0.95 * 2.0 * kappa * period).is_none()
    };
    let s = if feasible(params.outer_ratio - 1.0) {
        params.outer_ratio - 1.0
    } else {
        let (mut lo, mut hi): (f64, f64) = (0.0, params.outer_ratio - 1.0);
        if !feasible(1e-4) {
            return Err(CoverError::LadderInfeasible {
                q: 0,
                reason: "slope bound fails even for a flat inner ladder".into(),
            });
        }
        lo = lo.max(1e-4);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if feasible(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    let r = rungs(r0, s, params.outer_ratio, q_lo, q_top);
    let (rho, mut big_r) = interpolants(&r, count);
    let d: Vec<f64> = (0..count).map(|i| r[i + 1].powi(2) / 12.0).collect();

    // Inner funnels: raise R_q until the block reaches it from r_{q+2} in one period.
    if k > 0 {
        for q in q_lo..=q_hi {
            let i = (q - q_lo) as usize;
            let delta_max = gamma_k.and_then(|g| g.inverse(d[i])).unwrap_or(0.0);
            let need = inner_funnel_need(
                ext,
                r[i + 2],
                big_r[i + 2],
                3.0 * sigma,
                delta_max,
                params.ladder_runs,
                params.ladder_steps,
                member_seed(params.seed, i),
            )?;
            if need.sqrt() >= big_r[i] {
                let target = need.sqrt() * 1.01;
                if target >= r[i + 1] - 0.05 * (r[i + 1] - r[i]) {
                    return Err(CoverError::LadderInfeasible {
                        q,
                        reason: format!("inner funnel needs R_q = {target:.4e} >= r_(q+1) = {:.4e}", r[i + 1]),
                    });
                }
                big_r[i] = target;
            }
        }
    }
    let kappa = kappa_for(k, r0, &r, &rho, q_lo);
    if let Some(q) = slope_excess(&r, &big_r, q_lo, q0, 2.0 * kappa * period) {
        return Err(CoverError::LadderInfeasible { q, reason: "funnel slope bound violated".into() });
    }
    for i in 0..count {
        if !(r[i] < rho[i] && rho[i] < big_r[i] && big_r[i] < r[i + 1]) {
            return Err(CoverError::LadderInfeasible {
                q: q_lo + i as i32,
                reason: "radius chain out of order".into(),
            });
        }
    }

    let ring_lo = -q0 + 1;
    let at = |v: &[f64], q: i32| v[(q - q_lo) as usize];
    let mut m = Vec::new();
    let mut big_d = Vec::new();
    let mut eps = Vec::new();
    for q in ring_lo..=q_hi + 1 {
        let mq = if k == 0 {
            1.0
        } else {
            let delta_max = gamma_k.and_then(|g| g.inverse(at(&d, q + 3))).unwrap_or(0.0);
            tube_coupling_max(ext, at(&r, q + 3), sigma, delta_max, params.grid_samples)
        };
        let reach =
            if q == ring_lo { at(&big_r, q + 3).powi(2) } else { at(&big_r, q + 3).powi(2) - at(&r, q - 2).powi(2) };
        m.push(mq);
        big_d.push((reach / period).max(3.0 * mq));
        let mut e = r0 / 2.0;
        if k > 0 {
            e = e.min(sigma * sigma / 2.0);
        }
        for i in (q - 1).max(q_lo)..=q + 1 {
            e = e.min((at(&r, i + 1) - at(&big_r, i)) / 5.0).min((at(&r, i + 1).powi(2) - at(&big_r, i).powi(2)) / 5.0);
            if i >= -q0 {
                e = e.min((at(&big_r, i) - at(&r, i)) / 5.0).min((at(&big_r, i).powi(2) - at(&r, i).powi(2)) / 5.0);
            }
        }
        eps.push(e);
    }
    let r_a = at(&r, -q0 + 1);
    let r_bar = r_a + 0.9 * (2.0 * r0 - r_a);
    let collar =
        Collar { r_a, r_p: r_a + 0.85 * (r_bar - r_a), r_bar, width: params.collar_width, sweep: params.collar_sweep };
    Ok(AnnulusCover {
        q_lo,
        q_hi,
        k,
        period,
        r,
        rho,
        big_r,
        d,
        sigma,
        kappa,
        ring_lo,
        big_m: vec![0.0; big_d.len()],
        big_d,
        m,
        eps,
        collar,
        time_slabs: params.time_slabs,
        grids: Vec::new(),
        cells: Vec::new(),
        index: FxHashMap::default(),
    })
}

/// `max 2|⟨z, g(t, z, ω) + φδ⟩| + 1` over the tube `|ω| <= 2σ` inside the ball of `radius`.
fn tube_coupling_max(ext: &ExtendedSubsystem, radius: f64, sigma: f64, delta_max: f64, samples: usize) -> f64 {
    let k = ext.k();
    let inner_ch = ext.inner_channels();
    let ts = linspace(0.0, ext.period(), 6);
    let omegas = linspace(-2.0 * sigma, 2.0 * sigma, 5);
    let zs: Vec<Vec<f64>> = box_grid(k, radius, samples).into_iter().filter(|z| norm(z) <= radius).collect();
    let mut best: f64 = 0.0;
    for &t in &ts[..5] {
        for z in &zs {
            for &w in &omegas {
                let mut y = z.clone();
                y.push(w);
                let p = ext.prepare(t, &y, true);
                let drift = dot(z, &p.inner).abs();
                let coupling: Vec<f64> =
                    (0..inner_ch).map(|j| (0..k).map(|i| z[i] * p.phi[i][j]).sum::<f64>()).collect();
                best = best.max(2.0 * (drift + delta_max * norm(&coupling)));
            }
        }
    }
    best + 1.0
}

/// Ring and region of `y`: ring `q` holds `r_q <= |y| < r_{q+1}`, so a point
/// on `|y| = r_{q+1}` belongs to the outer ring.
pub fn classify_point(cover: &AnnulusCover, y: &[f64]) -> Result<(RegionTag, i32), CoverError> {
    let n = norm(y);
    let lo = cover.r[0];
    let hi = *cover.r.last().unwrap();
    if !(n >= lo && n < hi) {
        return Err(CoverError::OutOfRange { norm: n, lo, hi });
    }
    let idx = cover.r.partition_point(|&rq| rq <= n) - 1;
    let ring = cover.q_lo + idx as i32;
    let s = y[cover.k].abs();
    let tag = if s <= cover.sigma {
        RegionTag::P
    } else if s <= 2.0 * cover.sigma {
        RegionTag::E
    } else {
        RegionTag::G
    };
    Ok((tag, ring))
}

/// Control-independent terms of the cell inequalities at one point.
struct PointTerms {
    prepared: Prepared,
    s: f64,
    /// `⟨z, g⟩ + worst ⟨y, φΔ⟩`.
    total: f64,
    /// Worst `z_{k+1} Σ Δ_j φ_{k+1,j}`.
    last: f64,
}

impl PointTerms {
    fn new(ext: &ExtendedSubsystem, t: f64, y: &[f64], delta_max: f64) -> Self {
        let k = ext.k();
        let prepared = ext.prepare(t, y, true);
        let s = y[k];
        let inner = if k > 0 { dot(&y[..k], &prepared.inner) } else { 0.0 };
        let channels = prepared.phi[k].len();
        let coupling: Vec<f64> = (0..channels).map(|j| (0..=k).map(|i| y[i] * prepared.phi[i][j]).sum()).collect();
        let last = delta_max * s.abs() * norm(&prepared.phi[k]);
        PointTerms { total: inner + delta_max * norm(&coupling), last, prepared, s }
    }

    /// `max` of the two strict inequalities' left sides minus right sides.
    fn value(&self, ext: &ExtendedSubsystem, v: f64, two_d: f64, tube: f64) -> f64 {
        let a = self.s * ext.top(&self.prepared, v);
        (a + self.total + two_d).max(a + self.last + tube)
    }
}

/// Chooses the constant control of a cell: the minimum-norm control meeting
/// both decrease inequalities at the centre under the worst disturbance,
/// re-verified on the support corners; tube cells get a control zeroing
/// `z_{k+1} g_{k+1}` at the centre.
pub fn select_cell_control(
    ext: &ExtendedSubsystem,
    cover: &AnnulusCover,
    cell: &CellBox,
    gamma_next: &ComparisonFunction,
    params: &CoverParams,
) -> Result<CellControl, CoverError> {
    let (tc, yc) = cell.center();
    let (region, _) = classify_point(cover, &yc)?;
    let k = cover.k;
    let limit = params.control_limit;
    if region == RegionTag::P {
        let half = 0.5 * (cell.hi[k] - cell.lo[k]) + cell.h_y[k] / 2.0;
        if half > cover.sigma {
            return Err(CoverError::MarginLost { t: tc, y: yc, value: half - cover.sigma });
        }
        let p = ext.prepare(tc, &yc, false);
        let s = yc[k];
        let residual = |w: f64| s * ext.top(&p, w);
        let w = if residual(0.0).abs() <= params.tol_p {
            0.0
        } else {
            root_nearest_zero(|w| ext.top(&p, w), limit).map_err(|_| CoverError::ControlNotFound {
                t: tc,
                y: yc.clone(),
                limit,
            })?
        };
        let res = residual(w).abs();
        if res > params.tol_p {
            return Err(CoverError::ControlNotFound { t: tc, y: yc, limit });
        }
        return Ok(CellControl { region, control: w, margin: params.tol_p - res });
    }
    let two_d = 2.0 * cover.big_d_at(cell.ring);
    let tube = 3.0 * cover.sigma * cover.sigma / cover.period;
    let delta_max = gamma_next.inverse(cover.d_at(cell.ring + 1)).unwrap_or(0.0);
    let centre = PointTerms::new(ext, tc, &yc, delta_max);
    let corners: Vec<PointTerms> =
        cell.support_corners().into_iter().map(|(t, y)| PointTerms::new(ext, t, &y, delta_max)).collect();
    let mut lost = None;
    for attempt in 0..4 {
        let slack = params.slack * 4f64.powi(attempt) * two_d;
        let control = min_norm_control(ext, &centre, two_d, tube, slack, limit)
            .ok_or_else(|| CoverError::ControlNotFound { t: tc, y: yc.clone(), limit })?;
        let mut worst = centre.value(ext, control, two_d, tube);
        let mut failed = None;
        for (c, pt) in cell.support_corners().into_iter().zip(&corners) {
            let value = pt.value(ext, control, two_d, tube);
            if !(value < 0.0) {
                failed = Some((c, value));
                break;
            }
            worst = worst.max(value);
        }
        match failed {
            None => return Ok(CellControl { region, control, margin: -worst }),
            Some(f) => lost = Some(f),
        }
    }
    let ((t, y), value) = lost.expect("at least one attempt");
    Err(CoverError::MarginLost { t, y, value })
}

/// Smallest `|v|` with the centre inequalities at most `-slack`.
fn min_norm_control(
    ext: &ExtendedSubsystem,
    centre: &PointTerms,
    two_d: f64,
    tube: f64,
    slack: f64,
    limit: f64,
) -> Option<f64> {
    if centre.value(ext, 0.0, two_d, tube) <= -slack {
        return Some(0.0);
    }
    let root = root_nearest_zero(|v| centre.value(ext, v, two_d, tube) + slack, limit).ok()?;
    let mut v = root;
    let mut step = 1e-9 * root.abs().max(1.0);
    while centre.value(ext, v, two_d, tube) > -slack {
        v += root.signum() * step;
        step *= 2.0;
        if v.abs() > limit {
            return None;
        }
    }
    Some(v)
}

fn tile_intersects(lo: &[f64], hi: &[f64], r_in: f64, r_out: f64) -> bool {
    let near: f64 = lo
        .iter()
        .zip(hi)
        .map(|(a, b)| {
            if *a > 0.0 {
                a * a
            } else if *b < 0.0 {
                b * b
            } else {
                0.0
            }
        })
        .sum();
    let far: f64 = lo.iter().zip(hi).map(|(a, b)| (a * a).max(b * b)).sum();
    near.sqrt() <= r_out && far.sqrt() >= r_in
}

fn fill_cell(
    ext: &ExtendedSubsystem,
    cover: &AnnulusCover,
    cell: CellBox,
    depth: u32,
    gamma_next: &ComparisonFunction,
    params: &CoverParams,
    out: &mut Vec<(CellBox, CellControl, u32)>,
) -> Result<(), CoverError> {
    let r_in = cover.r_at(cell.ring);
    let r_out = cover.r_at(cell.ring + 1);
    if !tile_intersects(&cell.lo, &cell.hi, r_in, r_out) {
        return Ok(());
    }
    match select_cell_control(ext, cover, &cell, gamma_next, params) {
        Ok(c) => {
            out.push((cell, c, depth));
            Ok(())
        }
        Err(CoverError::MarginLost { .. } | CoverError::OutOfRange { .. }) if depth < params.max_depth => {
            for child in cell.split(params.overlap) {
                fill_cell(ext, cover, child, depth + 1, gamma_next, params, out)?;
            }
            Ok(())
        }
        Err(CoverError::OutOfRange { .. }) => {
            // A tile whose centre falls inside the inner ball is carried by the local feedback.
            Ok(())
        }
        Err(e) => Err(e),
    }
}

/// Tiles every ring with time-space cells and selects their controls.
pub fn synthesize_cells(
    ext: &ExtendedSubsystem,
    cover: &mut AnnulusCover,
    gamma_next: &ComparisonFunction,
    params: &CoverParams,
) -> Result<(), CoverError> {
    let dim = cover.dim();
    if dim > 3 {
        return Err(CoverError::BadParameter(format!("cover supports dimension <= 3, got {dim}")));
    }
    let slabs = params.time_slabs;
    cover.time_slabs = slabs;
    let dt = cover.period / slabs as f64;
    let mut grids = Vec::new();
    let mut jobs = Vec::new();
    for ring in cover.ring_range() {
        let r_out = cover.r_at(ring + 1);
        let r_in = cover.r_at(ring);
        let target = 0.95 * cover.eps_at(ring) / ((1.0 + params.overlap) * (dim as f64).sqrt());
        let per_axis = ((2.0 * r_out / target).ceil() as usize).max(2);
        let width = 2.0 * r_out / per_axis as f64;
        let origin = -r_out;
        grids.push(RingGrid { ring, origin, width, per_axis });
        let axis: Vec<usize> = (0..per_axis).collect();
        let mut tiles: Vec<Vec<usize>> = vec![Vec::new()];
        for _ in 0..dim {
            tiles = tiles.into_iter().flat_map(|p| axis.iter().map(move |&a| [p.clone(), vec![a]].concat())).collect();
        }
        for tile in tiles {
            let lo: Vec<f64> = tile.iter().map(|&i| origin + i as f64 * width).collect();
            let hi: Vec<f64> = lo.iter().map(|a| a + width).collect();
            if !tile_intersects(&lo, &hi, r_in, r_out) {
                continue;
            }
            let mut key = [0i64; 3];
            for (i, &v) in tile.iter().enumerate() {
                key[i] = v as i64;
            }
            for slab in 0..slabs {
                let cell = CellBox::new(
                    ring,
                    slab as f64 * dt,
                    (slab + 1) as f64 * dt,
                    lo.clone(),
                    hi.clone(),
                    params.overlap,
                );
                jobs.push((key, slab, cell));
            }
        }
    }
    let filled: Vec<Vec<CoverCell>> = jobs
        .into_par_iter()
        .map(|(tile, slab, cell)| {
            let mut out = Vec::new();
            fill_cell(ext, cover, cell, 0, gamma_next, params, &mut out)?;
            Ok(out
                .into_iter()
                .map(|(cell, c, depth)| CoverCell {
                    cell,
                    region: c.region,
                    control: c.control,
                    margin: c.margin,
                    depth,
                    tile,
                    slab,
                })
                .collect())
        })
        .collect::<Result<_, CoverError>>()?;
    cover.cells = filled.into_iter().flatten().collect();
    cover.grids = grids;
    for (i, ring) in cover.ring_range().enumerate() {
        cover.big_m[i] =
            cover.cells.iter().filter(|c| c.cell.ring == ring).map(|c| c.control.abs()).fold(0.0, f64::max);
    }
    cover.rebuild_index();
    Ok(())
}

/// Global stage law: local feedback near the origin, normalised bump blend
/// of the cell controls elsewhere.
#[derive(Clone)]
pub struct BlendedLaw {
    cover: Arc<AnnulusCover>,
    local: Arc<StageLaw>,
}

impl fmt::Debug for BlendedLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlendedLaw").field("cover", &self.cover).finish()
    }
}

impl BlendedLaw {
    pub fn cover(&self) -> &Arc<AnnulusCover> {
        &self.cover
    }

    pub fn local(&self) -> &Arc<StageLaw> {
        &self.local
    }

    /// Total cell weight (after normalisation and the collar) at `(t, y)`.
    pub fn cell_weight(&self, t: f64, y: &[f64]) -> f64 {
        let n = norm(y);
        let (sp, _) = self.cover.bump_sums(t, y);
        self.cover.collar.cell_weight(t, n, self.cover.period) * sp / sp.max(1.0)
    }

    pub fn value(&self, t: f64, y: &[f64]) -> f64 {
        let collar = &self.cover.collar;
        let n = norm(y);
        if n <= collar.r_a {
            return self.local.eval(t, y);
        }
        let limit = self.cover.cover_radius() * (1.0 - 1e-9);
        let clamped: Vec<f64>;
        let y = if n > limit {
            clamped = y.iter().map(|v| v * limit / n).collect();
            &clamped[..]
        } else {
            y
        };
        let n = n.min(limit);
        let (sp, spc) = self.cover.bump_sums(t, y);
        let scale = sp.max(1.0);
        let wc = collar.cell_weight(t, n, self.cover.period);
        let mut v = wc * spc / scale;
        let nu_weight = collar.cutoff(n) * (1.0 - wc * sp / scale);
        if nu_weight > 0.0 {
            v += nu_weight * self.local.eval(t, y);
        }
        v
    }
}

impl StageMap for BlendedLaw {
    fn eval(&self, t: f64, y: &[f64]) -> f64 {
        self.value(t, y)
    }
}

/// Assembles the blended law and checks that every sampled point of the
/// cover domain is reached by the cells or the local feedback.
pub fn blend_feedback(
    cover: AnnulusCover,
    local: Arc<StageLaw>,
    params: &CoverParams,
) -> Result<BlendedLaw, CoverError> {
    let mut cover = cover;
    if cover.index.is_empty() && !cover.cells.is_empty() {
        cover.rebuild_index();
    }
    let dim = cover.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let r_hi = cover.cover_radius();
    let r_lo = cover.collar.r_a;
    for _ in 0..params.coverage_samples {
        let mut dir = sample_ball(&mut rng, dim, 1.0);
        let nd = norm(&dir).max(1e-12);
        let radius = rng.gen_range(r_lo..r_hi);
        dir.iter_mut().for_each(|v| *v *= radius / nd);
        let t = rng.gen_range(0.0..cover.period);
        let (sp, _) = cover.bump_sums(t, &dir);
        let p = cover.collar.cutoff(radius);
        if p < 1.0 && sp < 1.0 - 1e-9 {
            return Err(CoverError::CoverageGap { t, y: dir });
        }
    }
    Ok(BlendedLaw { cover: Arc::new(cover), local })
}

/// Ladders, cells and blended law for a stage from its local feedback.
pub fn build_cover_law(
    ext: &ExtendedSubsystem,
    gamma_k: Option<&ComparisonFunction>,
    local: &LocalSynthesis,
    params: &CoverParams,
) -> Result<(AnnulusCover, BlendedLaw), CoverError> {
    let mut cover = build_ladder(ext, gamma_k, local.local.radius, params)?;
    synthesize_cells(ext, &mut cover, &local.gamma, params)?;
    let law = blend_feedback(cover, local.local.law.clone(), params)?;
    Ok(((**law.cover()).clone(), law))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelSpec {
    pub runs_per_q: usize,
    pub seed: u64,
    pub steps: usize,
    /// Disturbance amplitude as a multiple of the gate radius `γ^{-1}(d_q)`.
    pub amplitude_scale: f64,
    pub tol: f64,
}

impl Default for FunnelSpec {
    fn default() -> Self {
        FunnelSpec { runs_per_q: 20, seed: 11, steps: 2000, amplitude_scale: 1.0, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelRow {
    pub q: i32,
    pub runs: usize,
    /// Runs whose disturbance exceeded the gate and were not counted.
    pub gated_out: usize,
    pub passed: usize,
    pub max_violation: f64,
}

impl FunnelRow {
    pub fn pass_rate(&self) -> f64 {
        let counted = self.runs - self.gated_out;
        if counted == 0 {
            1.0
        } else {
            self.passed as f64 / counted as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelWitness {
    pub q: i32,
    pub run: usize,
    pub t0: f64,
    pub y0: Vec<f64>,
    pub time: f64,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelReport {
    pub rows: Vec<FunnelRow>,
    pub violations: usize,
    pub max_violation: f64,
    pub witness: Option<FunnelWitness>,
    pub tol: f64,
}

impl FunnelReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// One-period funnel check of the closed stage loop for every in-range `q`.
pub fn verify_funnel(
    ext: &ExtendedSubsystem,
    law: &dyn StageMap,
    cover: &AnnulusCover,
    gamma_next: &ComparisonFunction,
    spec: &FunnelSpec,
) -> Result<FunnelReport, CoverError> {
    let dim = ext.dim();
    let channels = ext.channels();
    let period = cover.period;
    let h = period / spec.steps as f64;
    let field = FnField {
        dim,
        channels,
        f: |t: f64, y: &[f64], delta: &[f64]| {
            let v = law.eval(t, y);
            let f = ext.field(t, y, v);
            f.psi.iter().zip(&f.phi).map(|(p, row)| p + dot(row, delta)).collect()
        },
    };
    let mut rows = Vec::new();
    let mut witness: Option<FunnelWitness> = None;
    let mut violations = 0;
    let mut max_violation = f64::NEG_INFINITY;
    for q in cover.q_lo..=cover.q_hi {
        let r_start = cover.r_at(q + 2);
        let top = cover.big_r_at(q + 2).powi(2);
        let bottom = cover.big_r_at(q).powi(2);
        let gate = cover.d_at(q);
        let amplitude = spec.amplitude_scale * gamma_next.inverse(gate).unwrap_or(0.0);
        let results: Vec<Result<(bool, f64, Option<FunnelWitness>), CoverError>> = (0..spec.runs_per_q)
            .into_par_iter()
            .map(|run| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(member_seed(spec.seed, (q - cover.q_lo) as usize * 1_000_003 + run));
                let mut y0 = sample_ball(&mut rng, dim, r_start);
                if run % 2 == 0 {
                    let n = norm(&y0).max(1e-12);
                    y0.iter_mut().for_each(|v| *v *= r_start / n);
                }
                let t0 = (rng.gen_range(0.0..period) / h).floor() * h;
                let dist = make_disturbance(
                    DisturbanceKind::PiecewiseRandom,
                    amplitude,
                    period / 20.0,
                    rng.gen(),
                    t0 + period,
                    channels,
                )
                .map_err(|e| CoverError::Simulation(e.to_string()))?;
                if gamma_next.eval(dist.linf()) > gate * (1.0 + 1e-12) {
                    return Ok((true, f64::NEG_INFINITY, None));
                }
                let traj = integrate(&field, &y0, t0, period, StepSpec::new(h), &dist)
                    .map_err(|e| CoverError::Simulation(e.to_string()))?;
                let mut worst = f64::NEG_INFINITY;
                let mut wit = None;
                for (t, y) in traj.times.iter().zip(&traj.states) {
                    let bound = top - (t - t0) / period * (top - bottom);
                    let value = dot(y, y);
                    if value - bound > worst {
                        worst = value - bound;
                        wit = Some(FunnelWitness { q, run, t0, y0: y0.clone(), time: *t, value, bound });
                    }
                }
                if !traj.completed() {
                    worst = f64::INFINITY;
                }
                Ok((false, worst, wit))
            })
            .collect();
        let mut row = FunnelRow { q, runs: spec.runs_per_q, gated_out: 0, passed: 0, max_violation: f64::NEG_INFINITY };
        for res in results {
            let (gated, worst, wit) = res?;
            if gated {
                row.gated_out += 1;
                continue;
            }
            row.max_violation = row.max_violation.max(worst);
            if worst <= spec.tol {
                row.passed += 1;
            } else {
                violations += 1;
            }
            if worst > max_violation {
                max_violation = worst;
                if worst > spec.tol {
                    witness = wit;
                }
            }
        }
        rows.push(row);
    }
    Ok(FunnelReport { rows, violations, max_violation, witness, tol: spec.tol })
}
