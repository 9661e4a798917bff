//! Globally adaptive Gauss–Kronrod (7/15) quadrature on finite, half-infinite
//! and infinite intervals.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{HybridError, Result};

/// Absolute tolerance used for every density functional.
pub const ABS_TOL: f64 = 1e-10;
pub const REL_TOL: f64 = 1e-12;
const MAX_INTERVALS: usize = 2000;
/// Results whose error estimate stays above this are treated as divergent.
const ACCEPT_TOL: f64 = 1e-6;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_225,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights for the odd Kronrod nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy)]
struct Segment {
    lo: f64,
    hi: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn kronrod<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64) -> Segment {
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let fc = f(center);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (j, (&x, &w)) in XGK.iter().zip(WGK.iter()).take(7).enumerate() {
        let dx = half * x;
        let pair = f(center - dx) + f(center + dx);
        kron += w * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    Segment {
        lo,
        hi,
        value: kron * half,
        error: ((kron - gauss) * half).abs(),
    }
}

/// Integrate `f` over `[lo, hi]`; either bound may be infinite.
pub fn integrate<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64) -> Result<f64> {
    integrate_tol(f, lo, hi, ABS_TOL, REL_TOL)
}

pub fn integrate_tol<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<f64> {
    if lo.is_nan() || hi.is_nan() {
        return Err(HybridError::numerical("quadrature bound is NaN"));
    }
    if lo == hi {
        return Ok(0.0);
    }
    if lo > hi {
        return integrate_tol(f, hi, lo, abs_tol, rel_tol).map(|v| -v);
    }
    let guard = |y: f64, jac: f64| -> f64 {
        if !y.is_finite() || jac == 0.0 {
            return 0.0;
        }
        let v = f(y);
        if v == 0.0 {
            0.0
        } else {
            v * jac
        }
    };
    // Mass left beyond the last representable node of an infinite range
    // must vanish; a transformed integrand that stays O(1/h) there diverges.
    let tail = |g: &dyn Fn(f64) -> f64, t_end: f64, inward: f64| -> Result<()> {
        let h = 1e-12;
        let edge = (g(t_end + inward * h) * h).abs();
        if edge.is_finite() && edge <= ACCEPT_TOL {
            Ok(())
        } else {
            Err(HybridError::numerical(
                "quadrature: integrand does not decay at infinity",
            ))
        }
    };
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => adapt(&|y| f(y), lo, hi, abs_tol, rel_tol),
        (true, false) => {
            let g = |t: f64| {
                let s = 1.0 - t;
                guard(lo + t / s, 1.0 / (s * s))
            };
            let v = adapt(&g, 0.0, 1.0, abs_tol, rel_tol)?;
            tail(&g, 1.0, -1.0)?;
            Ok(v)
        }
        (false, true) => {
            let g = |t: f64| {
                let s = 1.0 - t;
                guard(hi - t / s, 1.0 / (s * s))
            };
            let v = adapt(&g, 0.0, 1.0, abs_tol, rel_tol)?;
            tail(&g, 1.0, -1.0)?;
            Ok(v)
        }
        (false, false) => {
            let g = |t: f64| {
                let s = 1.0 - t * t;
                guard(t / s, (1.0 + t * t) / (s * s))
            };
            let v = adapt(&g, -1.0, 1.0, abs_tol, rel_tol)?;
            tail(&g, 1.0, -1.0)?;
            tail(&g, -1.0, 1.0)?;
            Ok(v)
        }
    }
}

/// Integrate over `[lo, hi]` split at `breaks`, with infinite tails mapped at
/// scale `scale` from the outermost break. Suited to densities whose bulk sits
/// far from unit scale.
pub fn integrate_split<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    breaks: &[f64],
    scale: f64,
) -> Result<f64> {
    let mut points: Vec<f64> = breaks
        .iter()
        .copied()
        .filter(|b| b.is_finite() && *b > lo && *b < hi)
        .collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    if points.is_empty() || !(scale > 0.0 && scale.is_finite()) {
        return integrate(f, lo, hi);
    }
    let mut total = 0.0;
    let first = points[0];
    let last = points[points.len() - 1];
    total += if lo.is_finite() {
        integrate(&f, lo, first)?
    } else {
        integrate(|t| scale * f(first - scale * t), 0.0, f64::INFINITY)?
    };
    for w in points.windows(2) {
        total += integrate(&f, w[0], w[1])?;
    }
    total += if hi.is_finite() {
        integrate(&f, last, hi)?
    } else {
        integrate(|t| scale * f(last + scale * t), 0.0, f64::INFINITY)?
    };
    Ok(total)
}

fn adapt<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64, abs_tol: f64, rel_tol: f64) -> Result<f64> {
    let first = kronrod(f, lo, hi);
    let mut total = first.value;
    let mut total_err = first.error;
    let mut heap = BinaryHeap::new();
    heap.push(first);
    while total_err > abs_tol.max(rel_tol * total.abs()) && heap.len() < MAX_INTERVALS {
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.lo + worst.hi);
        if mid <= worst.lo || mid >= worst.hi {
            heap.push(worst);
            break;
        }
        let left = kronrod(f, worst.lo, mid);
        let right = kronrod(f, mid, worst.hi);
        total += left.value + right.value - worst.value;
        total_err += left.error + right.error - worst.error;
        heap.push(left);
        heap.push(right);
    }
    // Re-sum to shed accumulated cancellation in the running totals.
    let (value, error) = heap
        .iter()
        .fold((0.0, 0.0), |(v, e), s| (v + s.value, e + s.error));
    if !value.is_finite() {
        return Err(HybridError::numerical(
            "quadrature produced a non-finite value",
        ));
    }
    if error > ACCEPT_TOL.max(1e-8 * value.abs()) {
        return Err(HybridError::numerical(format!(
            "quadrature did not converge (error estimate {error:.3e})"
        )));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exact() {
        let v = integrate(|x| x * x, 0.0, 3.0).unwrap();
        assert!((v - 9.0).abs() < 1e-13);
    }

    #[test]
    fn gaussian_over_real_line() {
        let v = integrate(|x| (-0.5 * x * x).exp(), f64::NEG_INFINITY, f64::INFINITY).unwrap();
        assert!((v - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn exponential_tail() {
        let v = integrate(|x| (-x).exp(), 1.0, f64::INFINITY).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-11);
        let w = integrate(|x| x.exp(), f64::NEG_INFINITY, 0.0).unwrap();
        assert!((w - 1.0).abs() < 1e-11);
    }

    #[test]
    fn integrable_endpoint_singularity() {
        let v = integrate(|x| 1.0 / x.sqrt(), 0.0, 1.0).unwrap();
        assert!((v - 2.0).abs() < 1e-8);
    }

    #[test]
    fn divergent_integral_fails() {
        assert!(integrate(|x| 1.0 / x, 1.0, f64::INFINITY).is_err());
        assert!(integrate(|x| 1.0 / x, 0.0, 1.0).is_err());
        assert!(integrate(|x| 1.0 / x.abs().max(1.0), f64::NEG_INFINITY, f64::INFINITY).is_err());
    }

    #[test]
    fn split_handles_wide_scales() {
        // Exponential with mean 20 and its second moment 2 * 20^2.
        let f = |y: f64| y * y * (-y / 20.0).exp() / 20.0;
        let v = integrate_split(f, 0.0, f64::INFINITY, &[5.0, 14.0, 40.0], 20.0).unwrap();
        assert!((v - 800.0).abs() < 1e-8);
    }

    #[test]
    fn reversed_bounds() {
        let v = integrate(|x| x, 1.0, 0.0).unwrap();
        assert!((v + 0.5).abs() < 1e-14);
    }
}
