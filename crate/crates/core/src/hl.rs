//! The hybrid log-likelihood `h_n(θ) = (1−a) ℓ_n(θ) + a log R_n(μ(θ))`, its
//! maximizer, profiles, deviances and confidence curves.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use serde::Serialize;

use crate::asymptotics::{estimate_blocks, kappa_a, AsymptoticBlocks};
use crate::controls::ControlSet;
use crate::el::el_loglik_at;
use crate::error::{HybridError, Result};
use crate::focus::Focus;
use crate::linalg::quad_form;
use crate::models::{empirical_fisher, seeded_rng, ParametricModel, Reparam};
use crate::optim::{bfgs, nelder_mead, BfgsOptions, NelderMeadOptions};
use crate::special::chi2_cdf;

/// Relative size of the deterministic restart perturbations.
pub const JITTER: f64 = 0.05;
pub const RESTARTS: usize = 3;
/// Constraint tolerance for profiles.
pub const PROFILE_TOL: f64 = 1e-6;

/// A hybrid likelihood problem: model, controls, data, balance and focus.
#[derive(Clone)]
pub struct HLProblem {
    pub model: Arc<dyn ParametricModel>,
    pub controls: Arc<dyn ControlSet>,
    pub data: Vec<f64>,
    pub a: f64,
    pub focus: Focus,
}

impl fmt::Debug for HLProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HLProblem")
            .field("model", &self.model.name())
            .field("controls", &self.controls)
            .field("n", &self.data.len())
            .field("a", &self.a)
            .field("focus", &self.focus)
            .finish()
    }
}

impl HLProblem {
    pub fn new(
        model: Arc<dyn ParametricModel>,
        controls: Arc<dyn ControlSet>,
        data: Vec<f64>,
        a: f64,
        focus: Focus,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(HybridError::InvalidInput("empty sample".into()));
        }
        let (lo, hi) = model.support();
        if let Some(i) = data
            .iter()
            .position(|&y| !y.is_finite() || y < lo || y > hi)
        {
            return Err(HybridError::InvalidInput(format!(
                "observation {i} ({}) lies outside the {} support",
                data[i],
                model.name()
            )));
        }
        check_balance(a)?;
        Ok(HLProblem {
            model,
            controls,
            data,
            a,
            focus,
        })
    }

    pub fn with_a(&self, a: f64) -> Result<Self> {
        check_balance(a)?;
        Ok(HLProblem { a, ..self.clone() })
    }

    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        HLProblem::new(
            self.model.clone(),
            self.controls.clone(),
            data,
            self.a,
            self.focus.clone(),
        )
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }

    /// Parametric log-likelihood `ℓ_n(θ)`.
    pub fn loglik(&self, theta: &[f64]) -> f64 {
        loglik(self.model.as_ref(), &self.data, theta)
    }
}

fn check_balance(a: f64) -> Result<()> {
    if (0.0..1.0).contains(&a) {
        Ok(())
    } else {
        Err(HybridError::InvalidInput(format!(
            "balance parameter {a} outside [0, 1)"
        )))
    }
}

pub fn loglik(model: &dyn ParametricModel, data: &[f64], theta: &[f64]) -> f64 {
    if !model.in_support(theta) {
        return f64::NEG_INFINITY;
    }
    let v: f64 = data.iter().map(|&y| model.log_density(y, theta)).sum();
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// `h_n(θ)`; `-∞` outside the parameter space or where the empirical
/// likelihood constraint is infeasible.
pub fn hl_loglik(prob: &HLProblem, theta: &[f64]) -> f64 {
    let l = prob.loglik(theta);
    if prob.a == 0.0 || l == f64::NEG_INFINITY {
        return l;
    }
    let el = prob
        .controls
        .mu_of_theta(theta)
        .and_then(|mu| el_loglik_at(prob.controls.as_ref(), &prob.data, &mu))
        .unwrap_or(f64::NEG_INFINITY);
    if el == f64::NEG_INFINITY {
        return el;
    }
    (1.0 - prob.a) * l + prob.a * el
}

/// Maximum likelihood fit of the working model.
#[derive(Debug, Clone, Serialize)]
pub struct MlFit {
    pub theta: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
}

/// Quasi-Newton maximum likelihood on the unconstrained scale.
pub fn ml_fit(model: &dyn ParametricModel, data: &[f64]) -> Result<MlFit> {
    ml_fit_from(model, data, &model.initial_guess(data))
}

pub fn ml_fit_from(model: &dyn ParametricModel, data: &[f64], start: &[f64]) -> Result<MlFit> {
    let n = data.len() as f64;
    let rp = Reparam::for_model(model);
    let fg = |x: &[f64]| {
        let theta = rp.from_free(x);
        if !model.in_support(&theta) {
            return (f64::INFINITY, vec![f64::NAN; x.len()]);
        }
        let mut value = 0.0;
        let mut grad = vec![0.0; x.len()];
        for &y in data {
            value += model.log_density(y, &theta);
            for (g, s) in grad.iter_mut().zip(model.score(y, &theta)) {
                *g += s;
            }
        }
        let grad = rp.grad_to_free(&theta, &grad);
        (-value / n, grad.iter().map(|g| -g / n).collect())
    };
    let x0 = rp.to_free(start);
    let mut best = bfgs(fg, &x0, &BfgsOptions::default());
    if !best.converged {
        // Polish with the simplex and a second quasi-Newton pass.
        let nm = nelder_mead(|x| fg(x).0, &best.x, &NelderMeadOptions::new(x0.len()));
        let again = bfgs(fg, &nm.x, &BfgsOptions::default());
        if again.value <= best.value {
            best = again;
        }
    }
    let theta = rp.from_free(&best.x);
    let value = loglik(model, data, &theta);
    if !value.is_finite() {
        return Err(HybridError::OptimizationFailure(
            "maximum likelihood search left the parameter space".into(),
        ));
    }
    Ok(MlFit {
        theta,
        loglik: value,
        converged: best.converged,
    })
}

/// Summary of the multi-start search.
#[derive(Debug, Clone, Serialize)]
pub struct OptimizerTrace {
    pub starts: usize,
    pub feasible_starts: usize,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct HLFit {
    pub a: f64,
    pub theta_hat: Vec<f64>,
    pub h_max: f64,
    pub psi_hat: f64,
    pub blocks: AsymptoticBlocks,
    pub cov_sandwich: nalgebra::DMatrix<f64>,
    /// `κ_a`; the standard error of `ψ̂` is `κ_a/√n`.
    pub kappa: f64,
    pub se_psi: f64,
    /// Focus gradient at `θ̂`.
    pub c: Vec<f64>,
    pub ml: MlFit,
    pub trace: OptimizerTrace,
}

/// Simplex step sizes on the free scale, from the ML standard errors.
fn simplex_steps(model: &dyn ParametricModel, data: &[f64], theta: &[f64]) -> Vec<f64> {
    let rp = Reparam::for_model(model);
    let positive = model.positive_params();
    let n = data.len() as f64;
    let se: Option<Vec<f64>> = empirical_fisher(model, data, theta)
        .ok()
        .and_then(|j| crate::linalg::sym_inverse(&j, "J").ok())
        .map(|inv| (0..theta.len()).map(|i| (inv[(i, i)] / n).sqrt()).collect());
    let _ = rp;
    (0..theta.len())
        .map(|i| {
            let fallback = if positive[i] {
                0.1
            } else {
                0.1 * theta[i].abs().max(1e-3)
            };
            match &se {
                Some(se) if se[i].is_finite() && se[i] > 0.0 => {
                    let s = if positive[i] { se[i] / theta[i] } else { se[i] };
                    (2.0 * s).min(if positive[i] { 1.0 } else { f64::INFINITY })
                }
                _ => fallback,
            }
        })
        .collect()
}

/// Deterministic perturbations of `theta` at relative scale `JITTER`.
pub fn jittered_starts(model: &dyn ParametricModel, theta: &[f64], count: usize) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(0);
    (0..count)
        .map(|_| {
            let cand: Vec<f64> = theta
                .iter()
                .map(|&t| {
                    let u: f64 = rng.random_range(-1.0..1.0);
                    if t == 0.0 {
                        JITTER * u
                    } else {
                        t * (1.0 + JITTER * u)
                    }
                })
                .collect();
            if model.in_support(&cand) {
                cand
            } else {
                theta.to_vec()
            }
        })
        .collect()
}

/// Maximize `h_n` with a simplex search from the ML fit (or `theta_init`)
/// plus deterministic restarts, then compute the limit matrices at `θ̂`.
pub fn maximize_hl(prob: &HLProblem, theta_init: Option<&[f64]>) -> Result<HLFit> {
    let model = prob.model.as_ref();
    let p = model.dim();
    let q = prob.controls.q();
    if prob.n() < p + q {
        return Err(HybridError::InvalidInput(format!(
            "need at least p + q = {} observations, have {}",
            p + q,
            prob.n()
        )));
    }
    if let Some(t) = theta_init {
        if t.len() != p || !model.in_support(t) {
            return Err(HybridError::InvalidInput(
                "initial value outside the parameter space".into(),
            ));
        }
    }
    let ml = ml_fit(model, &prob.data)?;
    let start = theta_init
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| ml.theta.clone());
    let (theta_hat, h_max, trace) =
        maximize_objective(model, &prob.data, &start, |t| hl_loglik(prob, t))?;
    finish_fit(prob, theta_hat, h_max, ml, trace)
}

/// Multi-start simplex maximization of `objective` on the model's free scale.
pub(crate) fn maximize_objective<F: Fn(&[f64]) -> f64>(
    model: &dyn ParametricModel,
    data: &[f64],
    start: &[f64],
    objective: F,
) -> Result<(Vec<f64>, f64, OptimizerTrace)> {
    let rp = Reparam::for_model(model);
    let n = data.len() as f64;
    let steps = simplex_steps(model, data, start);
    let mut opts = NelderMeadOptions::new(start.len());
    opts.initial_step = steps;
    let neg = |x: &[f64]| -objective(&rp.from_free(x)) / n;

    let mut starts = vec![start.to_vec()];
    starts.extend(jittered_starts(model, start, RESTARTS));
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    let mut evaluations = 0;
    let mut feasible = 0;
    let start_value = objective(start);
    if start_value.is_finite() {
        best = Some((start.to_vec(), start_value, false));
    }
    for s in &starts {
        let x0 = rp.to_free(s);
        if !neg(&x0).is_finite() {
            continue;
        }
        feasible += 1;
        let m = nelder_mead(neg, &x0, &opts);
        evaluations += m.evals;
        let theta = rp.from_free(&m.x);
        let value = objective(&theta);
        if !value.is_finite() {
            continue;
        }
        let better = match &best {
            None => true,
            Some((_, v, _)) => value > *v,
        };
        if better {
            best = Some((theta, value, m.converged));
        }
    }
    let Some((theta, value, converged)) = best else {
        return Err(HybridError::OptimizationFailure(
            "the objective is infeasible at every start".into(),
        ));
    };
    Ok((
        theta,
        value,
        OptimizerTrace {
            starts: starts.len(),
            feasible_starts: feasible,
            evaluations,
            converged,
        },
    ))
}

fn finish_fit(
    prob: &HLProblem,
    theta_hat: Vec<f64>,
    h_max: f64,
    ml: MlFit,
    trace: OptimizerTrace,
) -> Result<HLFit> {
    let model = prob.model.as_ref();
    let blocks = estimate_blocks(prob, &theta_hat)?;
    let c = prob.focus.gradient(model, &theta_hat)?;
    let kappa = kappa_a(&blocks, &c)?;
    let psi_hat = prob.focus.value(model, &theta_hat)?;
    Ok(HLFit {
        a: prob.a,
        cov_sandwich: blocks.sandwich.clone(),
        se_psi: kappa / (prob.n() as f64).sqrt(),
        theta_hat,
        h_max,
        psi_hat,
        blocks,
        kappa,
        c,
        ml,
        trace,
    })
}

/// Constrained maximum `max { f(x) : g(x) = target }` by an augmented
/// Lagrangian with a quadratic penalty escalated tenfold per round.
///
/// `f` and `g` act on unconstrained coordinates. Returns the maximizer and
/// the constraint residual reached.
pub fn profile_maximize<F, G>(
    f: F,
    g: G,
    x0: &[f64],
    target: f64,
    rho0: f64,
    opts: &NelderMeadOptions,
) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> f64,
{
    let mut x = x0.to_vec();
    let mut lambda = 0.0;
    let mut rho = rho0;
    let mut residual = g(&x) - target;
    for _ in 0..14 {
        let obj = |z: &[f64]| {
            let r = g(z) - target;
            -(f(z) - lambda * r - rho * r * r)
        };
        let m = nelder_mead(obj, &x, opts);
        if m.value.is_finite() {
            x = m.x;
        }
        residual = g(&x) - target;
        if residual.abs() <= PROFILE_TOL {
            return Ok((x, residual));
        }
        lambda += 2.0 * rho * residual;
        rho *= 10.0;
    }
    Err(HybridError::ProfileInfeasible {
        target,
        reached: target + residual,
    })
}

/// Result of profiling `h_n` at a focus value.
#[derive(Debug, Clone, Serialize)]
pub struct ProfilePoint {
    pub psi: f64,
    pub theta: Vec<f64>,
    pub h: f64,
}

/// `max { h_n(θ) : ψ(θ) = ψ_value }`, started from `start` (e.g. the HL fit).
pub fn profile_hl_from(
    prob: &HLProblem,
    psi_value: f64,
    start: &[f64],
    scale: f64,
) -> Result<ProfilePoint> {
    let model = prob.model.as_ref();
    let rp = Reparam::for_model(model);
    let n = prob.n() as f64;
    let psi = |theta: &[f64]| prob.focus.value(model, theta).unwrap_or(f64::NAN);
    let f = |x: &[f64]| hl_loglik(prob, &rp.from_free(x)) / n;
    let g = |x: &[f64]| psi(&rp.from_free(x));
    let mut opts = NelderMeadOptions::new(start.len());
    opts.initial_step = simplex_steps(model, &prob.data, start);
    // Per-observation objective: its curvature along ψ is about 1/scale².
    let rho0 = 1.0 / scale.max(1e-12).powi(2);
    let (x, _) = profile_maximize(f, g, &rp.to_free(start), psi_value, rho0, &opts)?;
    let mut theta = rp.from_free(&x);
    // Project onto the constraint along the focus gradient.
    for _ in 0..3 {
        let r = psi(&theta) - psi_value;
        if r == 0.0 {
            break;
        }
        let Ok(c) = prob.focus.gradient(model, &theta) else {
            break;
        };
        let cc: f64 = c.iter().map(|v| v * v).sum();
        if !(cc > 0.0) {
            break;
        }
        let cand: Vec<f64> = theta
            .iter()
            .zip(&c)
            .map(|(t, ci)| t - r * ci / cc)
            .collect();
        if !model.in_support(&cand)
            || !hl_loglik(prob, &cand).is_finite()
            || (psi(&cand) - psi_value).abs() >= r.abs()
        {
            break;
        }
        theta = cand;
    }
    let h = hl_loglik(prob, &theta);
    if !h.is_finite() {
        return Err(HybridError::ProfileInfeasible {
            target: psi_value,
            reached: psi(&theta),
        });
    }
    Ok(ProfilePoint {
        psi: psi_value,
        theta,
        h,
    })
}

/// Profile from the HL fit.
pub fn profile_hl(prob: &HLProblem, psi_value: f64, fit: &HLFit) -> Result<ProfilePoint> {
    let scale = fit.kappa.max(1e-12);
    profile_hl_from(prob, psi_value, &fit.theta_hat, scale)
}

/// `Δ_n(ψ) = 2 (h_max − h_prof(ψ))`, floored at zero.
pub fn deviance(prob: &HLProblem, psi_value: f64, fit: &HLFit) -> Result<f64> {
    if psi_value == fit.psi_hat {
        return Ok(0.0);
    }
    let prof = profile_hl(prob, psi_value, fit)?;
    Ok((2.0 * (fit.h_max - prof.h)).max(0.0))
}

/// Scale factor `k = cᵗ(J*)⁻¹K*(J*)⁻¹c / cᵗ(J*)⁻¹c` for the deviance.
pub fn deviance_scale(blocks: &AsymptoticBlocks, c: &[f64]) -> Result<f64> {
    let cv = DVector::from_column_slice(c);
    let num = quad_form(&blocks.sandwich, &cv);
    let den = quad_form(&blocks.jstar_inv, &cv);
    let k = num / den;
    if !(k > 0.0) || !k.is_finite() {
        return Err(HybridError::DegenerateFocus(format!(
            "deviance scale factor {k} is not positive"
        )));
    }
    Ok(k)
}

#[derive(Debug, Clone, Serialize)]
pub struct CcPoint {
    pub psi: f64,
    pub deviance: f64,
    pub cc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfidenceCurve {
    pub k_hat: f64,
    pub points: Vec<CcPoint>,
}

/// `cc(ψ) = Γ₁(Δ_n(ψ)/k̂)` at one focus value.
pub fn confidence_point(prob: &HLProblem, fit: &HLFit, k_hat: f64, psi: f64) -> Result<CcPoint> {
    let d = deviance(prob, psi, fit)?;
    Ok(CcPoint {
        psi,
        deviance: d,
        cc: chi2_cdf(d / k_hat, 1.0),
    })
}

pub fn confidence_curve(
    prob: &HLProblem,
    fit: &HLFit,
    psi_grid: &[f64],
) -> Result<ConfidenceCurve> {
    if let Some(v) = psi_grid.iter().find(|v| !v.is_finite()) {
        return Err(HybridError::InvalidGrid(format!(
            "non-finite focus value {v}"
        )));
    }
    let k_hat = deviance_scale(&fit.blocks, &fit.c)?;
    let points = psi_grid
        .iter()
        .map(|&psi| confidence_point(prob, fit, k_hat, psi))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConfidenceCurve { k_hat, points })
}
