//! Empirical likelihood ratio through its Lagrange dual.
//!
//! Weights are `w_i = 1 / (n (1 + λᵗm_i))`. The multiplier here is unscaled;
//! a convention that writes `1 + λᵗm_i/√n` has multiplier `√n` times this one.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::controls::{sample_constraint_matrix, ControlSet};
use crate::error::{HybridError, Result};

/// Stop when `‖n⁻¹ Σ m_i / (1 + λᵗm_i)‖∞` falls below this.
pub const GRADIENT_TOL: f64 = 1e-10;
pub const MAX_ITER: usize = 100;
/// Any `1 + λᵗm_i` beyond this marks a multiplier running off to infinity.
const DIVERGENCE: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ElStatus {
    Converged,
    HullViolation,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ELSolution {
    pub lambda: Vec<f64>,
    /// `log R_n`; `-∞` on hull violation.
    pub log_ratio: f64,
    pub weights: Vec<f64>,
    pub status: ElStatus,
    pub iterations: usize,
}

impl ELSolution {
    fn hull(n: usize, q: usize, iterations: usize) -> Self {
        ELSolution {
            lambda: vec![f64::NAN; q],
            log_ratio: f64::NEG_INFINITY,
            weights: vec![0.0; n],
            status: ElStatus::HullViolation,
            iterations,
        }
    }

    fn centered(n: usize, q: usize) -> Self {
        ELSolution {
            lambda: vec![0.0; q],
            log_ratio: 0.0,
            weights: vec![1.0 / n as f64; n],
            status: ElStatus::Converged,
            iterations: 0,
        }
    }
}

/// `log*`: the logarithm, continued quadratically below `eps`.
fn log_star(z: f64, eps: f64) -> (f64, f64, f64) {
    if z >= eps {
        (z.ln(), 1.0 / z, -1.0 / (z * z))
    } else {
        let r = z / eps;
        (
            eps.ln() - 1.5 + 2.0 * r - 0.5 * r * r,
            (2.0 - r) / eps,
            -1.0 / (eps * eps),
        )
    }
}

struct Dual<'a> {
    m: &'a DMatrix<f64>,
    eps: f64,
}

impl Dual<'_> {
    fn z(&self, lambda: &DVector<f64>) -> DVector<f64> {
        (self.m * lambda).add_scalar(1.0)
    }

    fn value(&self, lambda: &DVector<f64>) -> f64 {
        self.z(lambda)
            .iter()
            .map(|&z| log_star(z, self.eps).0)
            .sum()
    }

    /// Value, averaged gradient and negated averaged Hessian.
    fn derivatives(&self, lambda: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let n = self.m.nrows();
        let q = self.m.ncols();
        let z = self.z(lambda);
        let mut value = 0.0;
        let mut grad = DVector::zeros(q);
        let mut curv = DMatrix::zeros(q, q);
        for i in 0..n {
            let (v, d1, d2) = log_star(z[i], self.eps);
            value += v;
            let row = self.m.row(i).transpose();
            grad.axpy(d1, &row, 1.0);
            curv.ger(-d2, &row, &row, 1.0);
        }
        (value, grad / n as f64, curv / n as f64)
    }
}

/// Solve the EL dual for the n×q constraint matrix `m`.
pub fn solve_el(m: &DMatrix<f64>) -> Result<ELSolution> {
    let (n, q) = m.shape();
    if n < q + 1 {
        return Err(HybridError::InvalidInput(format!(
            "empirical likelihood needs n > q (n = {n}, q = {q})"
        )));
    }
    if let Some(i) = (0..n).find(|&i| m.row(i).iter().any(|v| !v.is_finite())) {
        return Err(HybridError::numerical_at("non-finite constraint row", i));
    }
    if m.iter().all(|&v| v == 0.0) {
        return Ok(ELSolution::centered(n, q));
    }
    if q == 1 {
        let (lo, hi) = m
            .column(0)
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        if !(lo < 0.0 && hi > 0.0) {
            return Ok(ELSolution::hull(n, q, 0));
        }
    }
    let nf = n as f64;
    let eps = 1.0 / nf;
    let dual = Dual { m, eps };
    // Gradient components are compared in units of their column scale so the
    // stopping rule is invariant to rescaling the constraints.
    let scale: Vec<f64> = m
        .column_iter()
        .map(|c| (c.norm_squared() / nf).sqrt())
        .collect();
    if scale.contains(&0.0) {
        return Ok(ELSolution::hull(n, q, 0));
    }
    let done = |lambda: &DVector<f64>, grad: &DVector<f64>| {
        let scaled = grad
            .iter()
            .zip(&scale)
            .map(|(g, s)| (g / s).abs())
            .fold(0.0, f64::max);
        scaled <= GRADIENT_TOL && lambda.dot(grad).abs() <= 1e-12
    };
    let mut lambda = DVector::zeros(q);
    let (mut value, mut grad, mut curv) = dual.derivatives(&lambda);
    let mut iterations = 0;
    let mut converged = done(&lambda, &grad);
    while !converged && iterations < MAX_ITER {
        iterations += 1;
        let Some(chol) = curv.clone().cholesky() else {
            // Singular second moment of the constraints: their span misses
            // some direction, so zero cannot be interior to the hull.
            return Ok(ELSolution::hull(n, q, iterations));
        };
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut accepted = false;
        // Near the optimum the objective is flat to rounding; there a step is
        // judged by the gradient it leaves behind.
        let flat = 1e-13 * value.abs().max(1.0);
        for _ in 0..60 {
            let trial = &lambda + &step * t;
            let v = dual.value(&trial);
            let ascent = v.is_finite()
                && (v > value + flat
                    || (v >= value - flat && dual.derivatives(&trial).1.amax() < grad.amax()));
            if ascent {
                lambda = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let (v, g, c) = dual.derivatives(&lambda);
        debug_assert!(v >= value - flat, "dual objective decreased");
        value = v;
        grad = g;
        curv = c;
        if dual.z(&lambda).amax() > DIVERGENCE {
            return Ok(ELSolution::hull(n, q, iterations));
        }
        converged = done(&lambda, &grad);
        if !accepted && !converged {
            // No representable ascent left: stationary up to rounding.
            converged = grad.dot(&step) <= 1e-24;
            break;
        }
    }
    let z = dual.z(&lambda);
    // A multiplier drifting off to infinity shows up as weights that no
    // longer sum to one; a solution outside the log region as z below 1/n.
    let mass = z.iter().map(|zi| 1.0 / (nf * zi)).sum::<f64>();
    if z.iter().any(|&zi| zi <= eps) || (mass - 1.0).abs() > 1e-8 {
        return Ok(ELSolution::hull(n, q, iterations));
    }
    let weights: Vec<f64> = z.iter().map(|&zi| 1.0 / (nf * zi)).collect();
    let log_ratio = -z.iter().map(|zi| zi.ln()).sum::<f64>();
    Ok(ELSolution {
        lambda: lambda.as_slice().to_vec(),
        log_ratio: log_ratio.min(0.0),
        weights,
        status: if converged {
            ElStatus::Converged
        } else {
            ElStatus::MaxIter
        },
        iterations,
    })
}

/// `log R_n(μ)` for the controls at the given control value; `-∞` when the
/// constraint is infeasible.
pub fn el_loglik_at(cs: &dyn ControlSet, data: &[f64], mu: &[f64]) -> Result<f64> {
    let m = sample_constraint_matrix(cs, data, mu)?;
    Ok(solve_el(&m)?.log_ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controls::{moment_control, quantile_control};
    use crate::models::{NormalModel, ParametricModel};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn column(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn two_point_closed_form() {
        let s = solve_el(&column(&[-0.25, 0.75])).unwrap();
        assert_eq!(s.status, ElStatus::Converged);
        // Weights solve w1 + w2 = 1 and -0.25 w1 + 0.75 w2 = 0.
        assert!((s.weights[0] - 0.75).abs() < 1e-8 && (s.weights[1] - 0.25).abs() < 1e-8);
        let expect = (2.0f64 * 0.75).ln() + (2.0f64 * 0.25).ln();
        assert!((s.log_ratio - expect).abs() < 1e-8);
        assert!((s.log_ratio + 0.287682).abs() < 1e-6);
    }

    #[test]
    fn centered_constraints_give_uniform_weights() {
        let m = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, -1.0, 0.5, 2.0, -1.0, -2.0, 0.0]);
        let s = solve_el(&m).unwrap();
        assert_eq!(s.status, ElStatus::Converged);
        assert!(s.lambda.iter().all(|l| l.abs() < 1e-12));
        assert!(s.log_ratio.abs() < 1e-14);
        assert!(s.weights.iter().all(|w| (w - 0.25).abs() < 1e-14));
    }

    #[test]
    fn mean_outside_hull() {
        let s = solve_el(&column(&[-1.5, -0.5])).unwrap();
        assert_eq!(s.status, ElStatus::HullViolation);
        assert_eq!(s.log_ratio, f64::NEG_INFINITY);
        // Two dimensions, zero outside the hull though each coordinate straddles it.
        let m = DMatrix::from_row_slice(3, 2, &[2.0, 1.0, -1.0, 1.0, 1.0, -0.5]);
        let s = solve_el(&m).unwrap();
        assert_eq!(s.status, ElStatus::HullViolation);
        // Zero on the boundary of the hull.
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0]);
        assert_eq!(solve_el(&m).unwrap().status, ElStatus::HullViolation);
    }

    #[test]
    fn degenerate_rows() {
        let zeros = DMatrix::zeros(3, 2);
        let s = solve_el(&zeros).unwrap();
        assert_eq!(s.status, ElStatus::Converged);
        assert_eq!(s.log_ratio, 0.0);
        let collinear = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, -1.0, -1.0, 2.0, 2.0]);
        assert_eq!(
            solve_el(&collinear).unwrap().status,
            ElStatus::HullViolation
        );
        assert!(solve_el(&DMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn mean_control_zero_at_sample_mean() {
        let model: Arc<dyn ParametricModel> = Arc::new(NormalModel);
        let cs = moment_control(model, &[1]).unwrap();
        let data = NormalModel.sample(&[0.0, 1.0], 40, 3);
        let mean = data.iter().sum::<f64>() / 40.0;
        assert!(el_loglik_at(&cs, &data, &[mean]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn log_ratio_unimodal_in_mean() {
        let model: Arc<dyn ParametricModel> = Arc::new(NormalModel);
        let cs = moment_control(model, &[1]).unwrap();
        for seed in 0..5 {
            let data = NormalModel.sample(&[0.0, 1.0], 30, seed);
            let mean = data.iter().sum::<f64>() / 30.0;
            let grid: Vec<f64> = (-20..=20).map(|k| mean + 0.05 * k as f64).collect();
            let vals: Vec<f64> = grid
                .iter()
                .map(|&mu| el_loglik_at(&cs, &data, &[mu]).unwrap())
                .collect();
            for k in 0..20 {
                assert!(vals[k] <= vals[k + 1] + 1e-12);
                assert!(vals[40 - k] <= vals[39 - k] + 1e-12);
            }
        }
    }

    #[test]
    fn median_control_maximal_at_sample_median() {
        let model: Arc<dyn ParametricModel> = Arc::new(NormalModel);
        let cs = quantile_control(model, &[0.5]).unwrap();
        let mut data = NormalModel.sample(&[0.0, 1.0], 41, 9);
        data.sort_by(f64::total_cmp);
        let at_median = el_loglik_at(&cs, &data, &[data[20]]).unwrap();
        let best = data
            .iter()
            .map(|&mu| el_loglik_at(&cs, &data, &[mu]).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((at_median - best).abs() < 1e-12);
    }

    fn check_invariants(m: &DMatrix<f64>, s: &ELSolution) {
        let sum: f64 = s.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-10);
        assert!(s.weights.iter().all(|&w| w > 0.0));
        for j in 0..m.ncols() {
            let wm: f64 = s
                .weights
                .iter()
                .zip(m.column(j).iter())
                .map(|(w, v)| w * v)
                .sum();
            assert!(wm.abs() < 1e-8);
        }
        let n = m.nrows() as f64;
        let direct: f64 = s.weights.iter().map(|w| (n * w).ln()).sum();
        assert!((direct - s.log_ratio).abs() < 1e-9);
        assert!(s.log_ratio <= 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn converged_solutions_satisfy_constraints(
            rows in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 8..40),
            shift in (-0.5f64..0.5, -0.5f64..0.5),
        ) {
            let n = rows.len();
            let mut m = DMatrix::zeros(n, 2);
            for (i, (a, b)) in rows.iter().enumerate() {
                m[(i, 0)] = a - shift.0;
                m[(i, 1)] = b - shift.1;
            }
            let s = solve_el(&m).unwrap();
            if s.status == ElStatus::Converged {
                check_invariants(&m, &s);
            } else {
                prop_assert_eq!(s.log_ratio, f64::NEG_INFINITY);
            }
        }

        #[test]
        fn scaling_equivariance(
            rows in prop::collection::vec(-3.0f64..3.0, 6..30),
            shift in -0.8f64..0.8,
            c in 0.01f64..100.0,
        ) {
            let m = DMatrix::from_iterator(rows.len(), 1, rows.iter().map(|v| v - shift));
            let a = solve_el(&m).unwrap();
            let b = solve_el(&(&m * c)).unwrap();
            prop_assert_eq!(a.status, b.status);
            if a.status == ElStatus::Converged {
                prop_assert!((a.lambda[0] - c * b.lambda[0]).abs() <= 1e-7 * a.lambda[0].abs().max(1.0));
                prop_assert!((a.log_ratio - b.log_ratio).abs() < 1e-9);
                for (x, y) in a.weights.iter().zip(&b.weights) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }
}
