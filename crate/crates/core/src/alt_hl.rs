//! The alternative hybrid estimator, which replaces the empirical likelihood
//! term by a quadratic form in the averaged controls, and its divergence.

use nalgebra::{DMatrix, DVector};

use crate::asymptotics::{estimate_blocks, kappa_a, AsymptoticBlocks};
use crate::controls::{sample_constraint_matrix, ControlSet, Controls, Functional};
use crate::error::{HybridError, Result};
use crate::hl::{maximize_objective, ml_fit, HLProblem, OptimizerTrace};
use crate::linalg::{mean_cross, quad_form, sym_inverse, symmetrize};
use crate::models::{expect_on, Density, ModelAt, ParametricModel};

/// `V_n(θ) = n^{-1/2} Σ m_i` and `W_n(θ) = n⁻¹ Σ m_i m_iᵗ`.
pub fn v_and_w(
    controls: &dyn ControlSet,
    data: &[f64],
    theta: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mu = controls.mu_of_theta(theta)?;
    let m = sample_constraint_matrix(controls, data, &mu)?;
    let n = data.len() as f64;
    let v = DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n.sqrt()));
    Ok((v, mean_cross(&m, &m)))
}

/// `N_n(θ) = (1−a) ℓ_n(θ) − ½ a V_nᵗ W_n⁻¹ V_n`; `-∞` when undefined.
pub fn alt_objective(prob: &HLProblem, theta: &[f64]) -> f64 {
    let l = prob.loglik(theta);
    if prob.a == 0.0 || l == f64::NEG_INFINITY {
        return l;
    }
    let Ok((v, w)) = v_and_w(prob.controls.as_ref(), &prob.data, theta) else {
        return f64::NEG_INFINITY;
    };
    let Ok(w_inv) = sym_inverse(&w, "W_n") else {
        return f64::NEG_INFINITY;
    };
    let quad = quad_form(&w_inv, &v);
    if !quad.is_finite() {
        return f64::NEG_INFINITY;
    }
    (1.0 - prob.a) * l - 0.5 * prob.a * quad
}

#[derive(Debug, Clone)]
pub struct AltHLFit {
    pub theta_tilde: Vec<f64>,
    pub n_max: f64,
    /// `V_n` at `θ̃`.
    pub v_n: Vec<f64>,
    pub divergence_estimate: f64,
    pub psi_tilde: f64,
    /// Limit quantities borrowed from the hybrid estimator, which shares the
    /// first-order behaviour under the model.
    pub blocks: AsymptoticBlocks,
    pub kappa: f64,
    pub se_psi: f64,
    pub first_order_equivalence_only: bool,
    pub trace: OptimizerTrace,
}

/// Maximizer of `N_n` only, from the ML fit.
pub fn alt_argmax(prob: &HLProblem) -> Result<(Vec<f64>, f64, OptimizerTrace)> {
    let model = prob.model.as_ref();
    let ml = ml_fit(model, &prob.data)?;
    if prob.a == 0.0 {
        let trace = OptimizerTrace {
            starts: 1,
            feasible_starts: 1,
            evaluations: 0,
            converged: ml.converged,
        };
        return Ok((ml.theta, ml.loglik, trace));
    }
    maximize_objective(model, &prob.data, &ml.theta, |t| alt_objective(prob, t))
}

pub fn maximize_alt(prob: &HLProblem) -> Result<AltHLFit> {
    let model = prob.model.as_ref();
    let (theta, n_max, trace) = alt_argmax(prob)?;
    let (v, w) = v_and_w(prob.controls.as_ref(), &prob.data, &theta)?;
    let divergence_estimate = divergence_estimate(model, &prob.data, &theta, &v, &w, prob.a)?;
    let blocks = estimate_blocks(prob, &theta)?;
    let c = prob.focus.gradient(model, &theta)?;
    let kappa = kappa_a(&blocks, &c)?;
    Ok(AltHLFit {
        psi_tilde: prob.focus.value(model, &theta)?,
        theta_tilde: theta,
        n_max,
        v_n: v.as_slice().to_vec(),
        divergence_estimate,
        blocks,
        kappa,
        se_psi: kappa / (prob.n() as f64).sqrt(),
        first_order_equivalence_only: true,
        trace,
    })
}

/// `x/(1+x)` part of the divergence from the sample: with `v̂ = V_n/√n` and
/// `W_n` the uncentred second moment, `v̂ᵗW_n⁻¹v̂ = x̂/(1+x̂)` for `x̂` built on
/// the centred covariance.
fn el_side(v: &DVector<f64>, w: &DMatrix<f64>, n: f64) -> Result<f64> {
    let w_inv = sym_inverse(w, "W_n")?;
    Ok(quad_form(&w_inv, &(v / n.sqrt())))
}

fn divergence_estimate(
    model: &dyn ParametricModel,
    data: &[f64],
    theta: &[f64],
    v: &DVector<f64>,
    w: &DMatrix<f64>,
    a: f64,
) -> Result<f64> {
    let n = data.len() as f64;
    let kl = if a < 1.0 {
        kl_estimate(model, data, theta)?
    } else {
        0.0
    };
    let ratio = if a > 0.0 { el_side(v, w, n)? } else { 0.0 };
    Ok((1.0 - a) * kl + 0.5 * a * ratio)
}

/// Silverman's rule-of-thumb bandwidth.
pub fn silverman_bandwidth(data: &[f64]) -> f64 {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let sd = (data.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |u: f64| {
        let pos = u * (n - 1.0);
        let (i, frac) = (pos.floor() as usize, pos.fract());
        let next = sorted[(i + 1).min(sorted.len() - 1)];
        sorted[i] + frac * (next - sorted[i])
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Leave-one-out Gaussian kernel log-density at each observation.
pub fn loo_kde_log_density(data: &[f64]) -> Vec<f64> {
    let n = data.len();
    let h = silverman_bandwidth(data);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| data[i].total_cmp(&data[j]));
    let sorted: Vec<f64> = order.iter().map(|&i| data[i]).collect();
    // Kernel terms beyond this many bandwidths are below e^{-40}.
    let reach = 9.0 * h;
    let norm = ((n - 1) as f64 * h * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let mut out = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        let y = sorted[rank];
        let mut sum = 0.0;
        for &x in sorted[..rank].iter().rev().take_while(|&&x| y - x <= reach) {
            sum += (-0.5 * ((y - x) / h).powi(2)).exp();
        }
        for &x in sorted[rank + 1..].iter().take_while(|&&x| x - y <= reach) {
            sum += (-0.5 * ((y - x) / h).powi(2)).exp();
        }
        out[i] = if sum > 0.0 {
            sum.ln() - norm
        } else {
            // Isolated point: keep the nearest kernel term on the log scale.
            let left = if rank > 0 {
                y - sorted[rank - 1]
            } else {
                f64::INFINITY
            };
            let right = sorted.get(rank + 1).map_or(f64::INFINITY, |x| x - y);
            -0.5 * (left.min(right) / h).powi(2) - norm
        };
    }
    out
}

/// Sample-average Kullback–Leibler estimate against `f(·, θ)`, floored at zero.
pub fn kl_estimate(model: &dyn ParametricModel, data: &[f64], theta: &[f64]) -> Result<f64> {
    if data.len() < 3 {
        return Err(HybridError::InvalidInput(
            "need at least 3 observations for a density estimate".into(),
        ));
    }
    let kde = loo_kde_log_density(data);
    let n = data.len() as f64;
    let mut sum = 0.0;
    for (i, (&y, k)) in data.iter().zip(&kde).enumerate() {
        let lf = model.log_density(y, theta);
        if !lf.is_finite() || !k.is_finite() {
            return Err(HybridError::numerical_at(
                "log-density undefined in the divergence estimate",
                i,
            ));
        }
        sum += k - lf;
    }
    Ok((sum / n).max(0.0))
}

/// `d_a(f, f_θ) = (1−a) KL(f, f_θ) + ½ a x/(1+x)`, `x = vᵗΣ⁻¹v`, with
/// `v = E_f m(Y, μ(θ))` and `Σ` its covariance under `f`, by quadrature.
pub fn divergence_da(
    truth: &dyn Density,
    controls: &Controls,
    theta: &[f64],
    a: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&a) {
        return Err(HybridError::InvalidInput(format!(
            "balance parameter {a} outside [0, 1]"
        )));
    }
    let model = controls.model().clone();
    let (lo, hi) = truth.support();
    let (mut breaks, scale) = truth.bulk();
    let mu = controls.mu_of_theta(theta)?;
    breaks.extend(mu.iter().copied());
    for it in controls.items() {
        if let Functional::Cell { lo, hi, .. } = *it {
            breaks.extend([lo, hi]);
        }
    }
    let kl = if a < 1.0 {
        let v = expect_on(
            truth,
            |y| {
                let lf = truth.log_density(y);
                let lm = model.log_density(y, theta);
                if lf == lm {
                    0.0
                } else {
                    lf - lm
                }
            },
            lo,
            hi,
            &breaks,
            scale,
        )?;
        if !v.is_finite() {
            return Err(HybridError::numerical("Kullback-Leibler integral diverges"));
        }
        v.max(0.0)
    } else {
        0.0
    };
    let q = controls.q();
    let mut v = DVector::zeros(q);
    let mut s = DMatrix::zeros(q, q);
    for j in 0..q {
        v[j] = expect_on(truth, |y| controls.m(y, &mu)[j], lo, hi, &breaks, scale)?;
        for k in j..q {
            let e = expect_on(
                truth,
                |y| {
                    let m = controls.m(y, &mu);
                    m[j] * m[k]
                },
                lo,
                hi,
                &breaks,
                scale,
            )?;
            s[(j, k)] = e;
            s[(k, j)] = e;
        }
    }
    let cov = symmetrize(&(s - &v * v.transpose()));
    let x = quad_form(&sym_inverse(&cov, "Sigma")?, &v).max(0.0);
    Ok((1.0 - a) * kl + 0.5 * a * x / (1.0 + x))
}

/// Large-sample form of `N_n` for partition controls:
/// `(1−a) ℓ_n(θ) − ½ a n Q_n/(1+Q_n)` with `Q_n = Σ_j (p̂_j − p_j(θ))²/p̂_j`
/// over all cells, including the one dropped from the controls.
pub fn partition_objective(prob: &HLProblem, controls: &Controls, theta: &[f64]) -> Result<f64> {
    let cells: Vec<(f64, f64)> = controls
        .items()
        .iter()
        .map(|it| match *it {
            Functional::Cell {
                lo,
                hi,
                closed: false,
            } => Ok((lo, hi)),
            _ => Err(HybridError::InvalidInput(
                "partition form needs partition cell controls".into(),
            )),
        })
        .collect::<Result<_>>()?;
    let model = controls.model();
    let at = ModelAt::new(model.as_ref(), theta);
    let n = prob.n() as f64;
    let mut q = 0.0;
    let mut rest_hat = 1.0;
    let mut rest = 1.0;
    for &(lo, hi) in &cells {
        let p = at.cdf(hi) - at.cdf(lo);
        let count = prob.data.iter().filter(|&&y| y >= lo && y < hi).count() as f64;
        let p_hat = count / n;
        if p_hat == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        q += (p_hat - p).powi(2) / p_hat;
        rest_hat -= p_hat;
        rest -= p;
    }
    if rest_hat <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    q += (rest_hat - rest).powi(2) / rest_hat;
    Ok((1.0 - prob.a) * prob.loglik(theta) - 0.5 * prob.a * n * q / (1.0 + q))
}
