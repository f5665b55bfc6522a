//! Small numerical kernels shared by the synthesis and checking code.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RootError {
    #[error("no sign change found within |v| <= {limit}")]
    NoBracket { limit: f64 },
    #[error("function returned a non-finite value at v = {at}")]
    NonFinite { at: f64 },
}

const GL8_NODES: [f64; 4] =
    [0.183_434_642_495_649_8, 0.525_532_409_916_329_0, 0.796_666_477_413_626_7, 0.960_289_856_497_536_3];
const GL8_WEIGHTS: [f64; 4] =
    [0.362_683_783_378_362_0, 0.313_706_645_877_887_3, 0.222_381_034_453_374_5, 0.101_228_536_290_376_3];

/// Eight-point Gauss-Legendre rule on `[0, 1]` as `(node, weight)` pairs.
pub fn gauss_legendre_unit() -> [(f64, f64); 8] {
    let mut out = [(0.0, 0.0); 8];
    for i in 0..4 {
        out[2 * i] = ((1.0 - GL8_NODES[i]) / 2.0, GL8_WEIGHTS[i] / 2.0);
        out[2 * i + 1] = ((1.0 + GL8_NODES[i]) / 2.0, GL8_WEIGHTS[i] / 2.0);
    }
    out
}

/// Integral of `f` over `[0, 1]` with the eight-point rule.
pub fn integrate_unit(mut f: impl FnMut(f64) -> f64) -> f64 {
    gauss_legendre_unit().iter().map(|&(x, w)| w * f(x)).sum()
}

pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// C-infinity step: 0 for `x <= 0`, 1 for `x >= 1`.
pub fn transition(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / x).exp();
    let b = (-1.0 / (1.0 - x)).exp();
    a / (a + b)
}

/// One-dimensional plateau: 1 on `[lo, hi]`, 0 outside `[lo - w, hi + w]`.
pub fn plateau(x: f64, lo: f64, hi: f64, w: f64) -> f64 {
    if x < lo {
        transition((x - (lo - w)) / w)
    } else if x > hi {
        transition(((hi + w) - x) / w)
    } else {
        1.0
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![(a + b) / 2.0],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Refines a root inside a sign-changing bracket (Illinois regula falsi
/// with periodic bisection).
pub fn refine_root(
    f: &mut impl FnMut(f64) -> f64,
    mut a: f64,
    mut fa: f64,
    mut b: f64,
    mut fb: f64,
) -> Result<f64, RootError> {
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    let mut side = 0i8;
    for iter in 0..200 {
        let width = (b - a).abs();
        if width <= 1e-14 * a.abs().max(b.abs()).max(1.0) {
            break;
        }
        let c = if iter % 4 == 3 {
            0.5 * (a + b)
        } else {
            let c = (a * fb - b * fa) / (fb - fa);
            if c.is_finite() && c > a.min(b) && c < a.max(b) {
                c
            } else {
                0.5 * (a + b)
            }
        };
        let fc = f(c);
        if !fc.is_finite() {
            return Err(RootError::NonFinite { at: c });
        }
        if fc == 0.0 {
            return Ok(c);
        }
        if (fc > 0.0) == (fb > 0.0) {
            b = c;
            fb = fc;
            if side == 1 {
                fa *= 0.5;
            }
            side = 1;
        } else {
            a = c;
            fa = fc;
            if side == -1 {
                fb *= 0.5;
            }
            side = -1;
        }
    }
    Ok(if fa.abs() < fb.abs() { a } else { b })
}

/// Root of `f` closest to zero, searching outward up to `|v| <= limit`.
pub fn root_nearest_zero(mut f: impl FnMut(f64) -> f64, limit: f64) -> Result<f64, RootError> {
    let f0 = f(0.0);
    if !f0.is_finite() {
        return Err(RootError::NonFinite { at: 0.0 });
    }
    if f0 == 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut flo_pos, mut flo_neg) = (0.0f64, f0, f0);
    while lo < limit {
        let hi = (lo + (lo * 0.25).max(1.0 / 32.0)).min(limit);
        let fp = f(hi);
        let fm = f(-hi);
        if !fp.is_finite() {
            return Err(RootError::NonFinite { at: hi });
        }
        if !fm.is_finite() {
            return Err(RootError::NonFinite { at: -hi });
        }
        let pos = (fp > 0.0) != (flo_pos > 0.0) || fp == 0.0;
        let neg = (fm > 0.0) != (flo_neg > 0.0) || fm == 0.0;
        match (pos, neg) {
            (true, false) => return refine_root(&mut f, lo, flo_pos, hi, fp),
            (false, true) => return refine_root(&mut f, -lo, flo_neg, -hi, fm),
            (true, true) => {
                let r1 = refine_root(&mut f, lo, flo_pos, hi, fp)?;
                let r2 = refine_root(&mut f, -lo, flo_neg, -hi, fm)?;
                return Ok(if r1.abs() <= r2.abs() { r1 } else { r2 });
            }
            (false, false) => {}
        }
        lo = hi;
        flo_pos = fp;
        flo_neg = fm;
    }
    Err(RootError::NoBracket { limit })
}

/// Newton iteration from `start`, falling back to `None` when it stalls.
pub fn newton(mut f: impl FnMut(f64) -> f64, start: f64, h: f64) -> Option<f64> {
    let mut x = start;
    for _ in 0..60 {
        let fx = f(x);
        if !fx.is_finite() {
            return None;
        }
        if fx.abs() < 1e-13 {
            return Some(x);
        }
        let d = central_diff(&mut f, x, h);
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        let step = fx / d;
        x -= step;
        if step.abs() <= 1e-13 * x.abs().max(1.0) {
            return Some(x);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_is_exact_for_polynomials() {
        for p in 0..16 {
            let v = integrate_unit(|x| x.powi(p));
            assert!((v - 1.0 / (p as f64 + 1.0)).abs() < 1e-14, "degree {p}");
        }
    }

    #[test]
    fn transition_is_a_smooth_step() {
        assert_eq!(transition(-1.0), 0.0);
        assert_eq!(transition(1.5), 1.0);
        assert!((transition(0.5) - 0.5).abs() < 1e-15);
        for x in linspace(0.01, 0.99, 50) {
            assert!((transition(x) + transition(1.0 - x) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn plateau_shape() {
        assert_eq!(plateau(0.5, 0.0, 1.0, 0.1), 1.0);
        assert_eq!(plateau(-0.2, 0.0, 1.0, 0.1), 0.0);
        assert!((plateau(-0.05, 0.0, 1.0, 0.1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cube_root() {
        for w in [-27.0, -0.3, 1e-6, 2.0, 1e5] {
            let v = root_nearest_zero(|v| v * v * v - w, 1e6).unwrap();
            assert!((v - f64::cbrt(w)).abs() <= 1e-10 * f64::cbrt(w).abs().max(1.0), "{w}");
        }
    }

    #[test]
    fn picks_root_closest_to_zero() {
        let v = root_nearest_zero(|v| (v - 3.0) * (v + 0.7) * (v - 5.0), 1e6).unwrap();
        assert!((v + 0.7).abs() < 1e-12);
    }

    #[test]
    fn reports_missing_bracket() {
        assert!(matches!(root_nearest_zero(|v| v.tanh() + 2.0, 1e3), Err(RootError::NoBracket { .. })));
    }

    #[test]
    fn newton_converges() {
        let r = newton(|x| x * x - 2.0, 1.0, 1e-6).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-12);
    }
}
