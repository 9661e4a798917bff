//! Local misspecification: the wide-model fit, `D_n` and `Q`, bias and
//! standard deviation limits of the hybrid estimator, the fic risk estimate,
//! the limit mse oracle and the goodness-of-fit test.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::asymptotics::{
    kappa_a, population_blocks, raw_blocks, AsymptoticBlocks, MatrixJson, RawBlocks,
};
use crate::controls::{ControlSet, Controls};
use crate::error::{HybridError, Result};
use crate::focus::Focus;
use crate::hl::{ml_fit, HLProblem};
use crate::linalg::{is_full_rank_psd, mean_cross, quad_form, sym_inverse, symmetrize};
use crate::models::{score_matrix, ModelAt, Reparam, WideModel};
use crate::optim::{bfgs, nelder_mead, BfgsOptions, NelderMeadOptions};
use crate::special::chi2_sf;

/// Default grid `0, 0.01, ..., 0.95`.
pub fn default_a_grid() -> Vec<f64> {
    (0..=95).map(|k| k as f64 / 100.0).collect()
}

/// Maximum likelihood in the wide model.
#[derive(Debug, Clone)]
pub struct WideFit {
    pub theta_gamma_hat: Vec<f64>,
    pub loglik: f64,
    /// `√n (γ̂ − γ₀)`.
    pub d_n: DVector<f64>,
    /// Averaged outer product of the (p+r)-score at the wide fit.
    pub j_wide: DMatrix<f64>,
    /// `(J₁₁ − J₁₀ J₀₀⁻¹ J₀₁)⁻¹`.
    pub q: DMatrix<f64>,
    pub p: usize,
}

impl WideFit {
    pub fn theta_hat(&self) -> &[f64] {
        &self.theta_gamma_hat[..self.p]
    }

    pub fn gamma_hat(&self) -> &[f64] {
        &self.theta_gamma_hat[self.p..]
    }
}

/// `Q = (J₁₁ − J₁₀ J₀₀⁻¹ J₀₁)⁻¹` from a joint (p+r)×(p+r) information matrix.
pub fn q_from_joint(j_wide: &DMatrix<f64>, p: usize) -> Result<DMatrix<f64>> {
    let r = j_wide.nrows() - p;
    let j00 = j_wide.view((0, 0), (p, p)).into_owned();
    let j01 = j_wide.view((0, p), (p, r)).into_owned();
    let j11 = j_wide.view((p, p), (r, r)).into_owned();
    let j00_inv = sym_inverse(&j00, "J00")?;
    let schur = symmetrize(&(&j11 - j01.transpose() * j00_inv * &j01));
    sym_inverse(&schur, "J11.0")
}

fn wide_failure(e: HybridError) -> HybridError {
    match e {
        HybridError::WideFitFailure(_) => e,
        other => HybridError::WideFitFailure(other.to_string()),
    }
}

pub fn fit_wide(wm: &dyn WideModel, data: &[f64]) -> Result<WideFit> {
    let narrow = wm.narrow();
    let p = narrow.dim();
    let r = wm.r();
    let n = data.len();
    if n < p + r {
        return Err(HybridError::InvalidInput(format!(
            "need at least {} observations",
            p + r
        )));
    }
    let ml = ml_fit(narrow.as_ref(), data).map_err(wide_failure)?;
    let mut positive = narrow.positive_params();
    positive.extend(wm.gamma_positive());
    let rp = Reparam::new(positive);
    let split = |x: &[f64]| {
        let full = rp.from_free(x);
        let gamma = full[p..].to_vec();
        (full, gamma)
    };
    let nf = n as f64;
    let fg = |x: &[f64]| {
        let (full, gamma) = split(x);
        if !narrow.in_support(&full[..p]) || !wm.gamma_in_support(&gamma) {
            return (f64::INFINITY, vec![f64::NAN; x.len()]);
        }
        let mut value = 0.0;
        let mut grad = vec![0.0; p + r];
        for &y in data {
            value += wm.log_density_wide(y, &full[..p], &gamma);
            for (g, s) in grad.iter_mut().zip(wm.score_wide(y, &full[..p], &gamma)) {
                *g += s;
            }
        }
        let grad = rp.grad_to_free(&full, &grad);
        (-value / nf, grad.iter().map(|g| -g / nf).collect())
    };
    let mut start = ml.theta.clone();
    start.extend(wm.gamma0());
    let x0 = rp.to_free(&start);
    let mut best = bfgs(fg, &x0, &BfgsOptions::default());
    if !best.converged {
        let nm = nelder_mead(|x| fg(x).0, &best.x, &NelderMeadOptions::new(x0.len()));
        let again = bfgs(fg, &nm.x, &BfgsOptions::default());
        if again.value <= best.value {
            best = again;
        }
    }
    if !best.value.is_finite() || !best.x.iter().all(|v| v.is_finite() && v.abs() < 700.0) {
        return Err(HybridError::WideFitFailure(
            "wide maximum likelihood diverged".into(),
        ));
    }
    let (full, gamma) = split(&best.x);
    let grad_norm = fg(&best.x).1.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !best.converged && !(grad_norm < 1e-6) {
        return Err(HybridError::WideFitFailure(format!(
            "wide maximum likelihood did not converge (gradient norm {grad_norm:.3e})"
        )));
    }
    let mut scores = DMatrix::zeros(n, p + r);
    for (i, &y) in data.iter().enumerate() {
        let s = wm.score_wide(y, &full[..p], &gamma);
        if s.iter().any(|v| !v.is_finite()) {
            return Err(HybridError::WideFitFailure(format!(
                "non-finite wide score at observation {i}"
            )));
        }
        for (k, v) in s.into_iter().enumerate() {
            scores[(i, k)] = v;
        }
    }
    let j_wide = mean_cross(&scores, &scores);
    if !is_full_rank_psd(&j_wide) {
        return Err(HybridError::WideFitFailure(
            "singular wide information matrix".into(),
        ));
    }
    let q = q_from_joint(&j_wide, p).map_err(wide_failure)?;
    let sqrt_n = nf.sqrt();
    let d_n = DVector::from_iterator(
        r,
        gamma
            .iter()
            .zip(wm.gamma0())
            .map(|(g, g0)| sqrt_n * (g - g0)),
    );
    Ok(WideFit {
        loglik: -best.value * nf,
        theta_gamma_hat: full,
        d_n,
        j_wide,
        q,
        p,
    })
}

/// Cross blocks with the extension score `S = ∂ log f/∂γ` at `(θ, γ₀)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossBlocks {
    /// p×r, `E u Sᵗ`.
    pub j01: DMatrix<f64>,
    /// q×r, `E m Sᵗ`.
    pub k01: DMatrix<f64>,
}

/// Empirical cross blocks at the narrow θ.
pub fn cross_blocks(
    wm: &dyn WideModel,
    controls: &dyn ControlSet,
    data: &[f64],
    theta: &[f64],
) -> Result<CrossBlocks> {
    let narrow = wm.narrow();
    let u = score_matrix(narrow.as_ref(), data, theta)?;
    let mu = controls.mu_of_theta(theta)?;
    let m = crate::controls::sample_constraint_matrix(controls, data, &mu)?;
    let r = wm.r();
    let mut s = DMatrix::zeros(data.len(), r);
    for (i, &y) in data.iter().enumerate() {
        let row = wm.score_gamma(y, theta);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(HybridError::numerical_at("non-finite extension score", i));
        }
        for (k, v) in row.into_iter().enumerate() {
            s[(i, k)] = v;
        }
    }
    Ok(CrossBlocks {
        j01: mean_cross(&u, &s),
        k01: mean_cross(&m, &s),
    })
}

/// `L₀₁ = (1−a) J₀₁ − a ξ₀ᵗ W⁻¹ K₀₁`, p×r.
pub fn l01(blocks: &AsymptoticBlocks, cross: &CrossBlocks) -> DMatrix<f64> {
    let a = blocks.a;
    &cross.j01 * (1.0 - a) - blocks.xi0.transpose() * &blocks.w_inv * &cross.k01 * a
}

/// `ω_hl = L₁₀ (J*)⁻¹ ∂ψ/∂θ − ∂ψ/∂γ` and `τ₀,hl = κ_a`.
pub fn omega_tau(
    blocks: &AsymptoticBlocks,
    cross: &CrossBlocks,
    dpsi_dtheta: &[f64],
    dpsi_dgamma: &[f64],
) -> Result<(DVector<f64>, f64)> {
    let p = blocks.j.nrows();
    let q = blocks.w.nrows();
    let r = cross.j01.ncols();
    if dpsi_dtheta.len() != p
        || dpsi_dgamma.len() != r
        || cross.j01.nrows() != p
        || cross.k01.nrows() != q
        || cross.k01.ncols() != r
    {
        return Err(HybridError::InvalidInput(format!(
            "dimension mismatch: p = {p}, q = {q}, r = {r}, focus gradients {} and {}",
            dpsi_dtheta.len(),
            dpsi_dgamma.len()
        )));
    }
    let c = DVector::from_column_slice(dpsi_dtheta);
    let omega = l01(blocks, cross).transpose() * &blocks.jstar_inv * &c
        - DVector::from_column_slice(dpsi_dgamma);
    let tau = kappa_a(blocks, dpsi_dtheta)?;
    Ok((omega, tau))
}

#[derive(Debug, Clone, Serialize)]
pub struct FicRow {
    pub a: f64,
    pub omega: Vec<f64>,
    /// Truncated bias estimate `{ωᵗ(DDᵗ − Q)ω}₊`.
    pub bias2: f64,
    pub tau2: f64,
    pub fic: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FocusedCurves {
    pub rows: Vec<FicRow>,
    pub a_star: f64,
    pub theta_ml: Vec<f64>,
    pub d_n: Vec<f64>,
    pub q: MatrixJson,
    pub j01: MatrixJson,
    pub k01: MatrixJson,
    /// `L₀₁` at `a_star`.
    pub l01: MatrixJson,
}

fn matrix_json(m: &DMatrix<f64>) -> MatrixJson {
    MatrixJson {
        rows: m.nrows(),
        cols: m.ncols(),
        data: crate::linalg::row_major(m),
    }
}

fn check_grid(a_grid: &[f64]) -> Result<()> {
    if a_grid.is_empty() {
        return Err(HybridError::InvalidGrid(
            "empty grid of balance parameters".into(),
        ));
    }
    if let Some(a) = a_grid.iter().find(|a| !(0.0..1.0).contains(*a)) {
        return Err(HybridError::InvalidGrid(format!(
            "balance parameter {a} outside [0, 1)"
        )));
    }
    Ok(())
}

fn check_wide(prob: &HLProblem, wm: &dyn WideModel) -> Result<()> {
    let narrow = wm.narrow();
    if narrow.name() != prob.model.name() {
        return Err(HybridError::InvalidInput(format!(
            "wide model {} extends {}, not {}",
            wm.name(),
            narrow.name(),
            prob.model.name()
        )));
    }
    Ok(())
}

/// Smallest index attaining the minimum.
fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// `fic(a) = {ω̂(a)ᵗ(D_n D_nᵗ − Q̂) ω̂(a)}₊ + τ̂(a)²`, all plug-ins at the narrow ML fit.
pub fn fic_curve(prob: &HLProblem, wm: &dyn WideModel, a_grid: &[f64]) -> Result<FocusedCurves> {
    check_grid(a_grid)?;
    check_wide(prob, wm)?;
    let model = prob.model.as_ref();
    let wf = fit_wide(wm, &prob.data)?;
    let ml = ml_fit(model, &prob.data)?;
    let theta = &ml.theta;
    let raw = raw_blocks(model, prob.controls.as_ref(), &prob.data, theta)?;
    raw.check_rank()?;
    let cross = cross_blocks(wm, prob.controls.as_ref(), &prob.data, theta)?;
    let c = prob.focus.gradient(model, theta)?;
    let dg = prob.focus.dgamma(wm, theta)?;
    let ddt = &wf.d_n * wf.d_n.transpose();
    let centred = ddt - &wf.q;
    let rows = a_grid
        .iter()
        .map(|&a| {
            let blocks = AsymptoticBlocks::assemble(&raw, a)?;
            let (omega, tau) = omega_tau(&blocks, &cross, &c, &dg)?;
            let bias2 = quad_form(&centred, &omega).max(0.0);
            let tau2 = tau * tau;
            Ok(FicRow {
                a,
                omega: omega.as_slice().to_vec(),
                bias2,
                tau2,
                fic: bias2 + tau2,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fics: Vec<f64> = rows.iter().map(|r| r.fic).collect();
    let a_star = rows[argmin(&fics)].a;
    let l = l01(&AsymptoticBlocks::assemble(&raw, a_star)?, &cross);
    Ok(FocusedCurves {
        rows,
        a_star,
        theta_ml: ml.theta.clone(),
        d_n: wf.d_n.as_slice().to_vec(),
        q: matrix_json(&wf.q),
        j01: matrix_json(&cross.j01),
        k01: matrix_json(&cross.k01),
        l01: matrix_json(&l),
    })
}

/// Population blocks at `(θ₀, γ₀)` under the narrow model.
#[derive(Debug, Clone)]
pub struct PopulationWide {
    pub raw: RawBlocks,
    pub cross: CrossBlocks,
    pub j_wide: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

pub fn population_wide(
    wm: &dyn WideModel,
    controls: &Controls,
    theta0: &[f64],
) -> Result<PopulationWide> {
    let narrow = wm.narrow();
    if controls.model().name() != narrow.name() {
        return Err(HybridError::InvalidInput(format!(
            "controls are built on {}, the wide model extends {}",
            controls.model().name(),
            narrow.name()
        )));
    }
    let p = narrow.dim();
    let r = wm.r();
    let truth = ModelAt::new(narrow.as_ref(), theta0);
    let pop = population_blocks(controls, theta0, &truth, &|y| wm.score_gamma(y, theta0), r)?;
    let q = q_from_joint(&pop.j_wide, p)?;
    Ok(PopulationWide {
        cross: CrossBlocks {
            j01: pop.j_wide.view((0, p), (p, r)).into_owned(),
            k01: pop.k01,
        },
        raw: pop.raw,
        j_wide: pop.j_wide,
        q,
    })
}

/// Symmetric square root of a PSD matrix.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

#[derive(Debug, Clone, Serialize)]
pub struct MseRow {
    pub a: f64,
    pub bias2: f64,
    pub tau2: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MseCurve {
    pub rows: Vec<MseRow>,
    pub a_min: f64,
    pub q: MatrixJson,
}

/// Limit risk `mse(a) = (ω(a)ᵗδ)² + τ(a)²` of `√n(ψ̂_a − ψ_true)` under
/// `f(·, θ₀, γ₀ + δ/√n)`, by quadrature.
pub fn mse_oracle(
    wm: &dyn WideModel,
    controls: &Controls,
    focus: &Focus,
    theta0: &[f64],
    delta: &[f64],
    a_grid: &[f64],
) -> Result<MseCurve> {
    check_grid(a_grid)?;
    if delta.len() != wm.r() {
        return Err(HybridError::InvalidInput(format!(
            "δ has length {}, expected {}",
            delta.len(),
            wm.r()
        )));
    }
    let narrow = wm.narrow();
    let pw = population_wide(wm, controls, theta0)?;
    pw.raw.check_rank()?;
    let c = focus.gradient(narrow.as_ref(), theta0)?;
    let dg = focus.dgamma(wm, theta0)?;
    let dv = DVector::from_column_slice(delta);
    let rows = a_grid
        .iter()
        .map(|&a| {
            let blocks = AsymptoticBlocks::assemble(&pw.raw, a)?;
            let (omega, tau) = omega_tau(&blocks, &pw.cross, &c, &dg)?;
            let bias2 = omega.dot(&dv).powi(2);
            let tau2 = tau * tau;
            if !bias2.is_finite() || !tau2.is_finite() {
                return Err(HybridError::numerical(format!(
                    "non-finite limit risk at a = {a}"
                )));
            }
            Ok(MseRow {
                a,
                bias2,
                tau2,
                mse: bias2 + tau2,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mses: Vec<f64> = rows.iter().map(|r| r.mse).collect();
    let a_min = rows[argmin(&mses)].a;
    Ok(MseCurve {
        rows,
        a_min,
        q: matrix_json(&pw.q),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GofVerdict {
    pub reject: bool,
    pub statistic: f64,
    pub threshold: f64,
    pub rho: f64,
    /// Null rejection level `P{χ²₁ > 1}`.
    pub alpha: f64,
    pub d_n: Vec<f64>,
    pub omega: Vec<f64>,
}

/// Goodness-of-fit test for moment-type controls: reject the working model
/// when `(ω̂ᵗD_n)² / ω̂ᵗQ̂ω̂ > 1`, with `ω̂` the maximum likelihood bias vector
/// for the focus.
pub fn gof_test(prob: &HLProblem, wm: &dyn WideModel) -> Result<GofVerdict> {
    if !prob.controls.mean_type() {
        return Err(HybridError::UnsupportedControls(
            "the goodness-of-fit test needs controls of the form g(y) − μ(θ)".into(),
        ));
    }
    check_wide(prob, wm)?;
    let model = prob.model.as_ref();
    let wf = fit_wide(wm, &prob.data)?;
    let ml = ml_fit(model, &prob.data)?;
    let theta = &ml.theta;
    let raw = raw_blocks(model, prob.controls.as_ref(), &prob.data, theta)?;
    let cross = cross_blocks(wm, prob.controls.as_ref(), &prob.data, theta)?;
    let c = prob.focus.gradient(model, theta)?;
    let dg = prob.focus.dgamma(wm, theta)?;
    let blocks = AsymptoticBlocks::assemble(&raw, 0.0)?;
    let (omega, _) = omega_tau(&blocks, &cross, &c, &dg)?;
    let num = omega.dot(&wf.d_n).powi(2);
    let den = quad_form(&wf.q, &omega);
    let statistic = if num == 0.0 {
        0.0
    } else if den > 0.0 {
        num / den
    } else {
        return Err(HybridError::DegenerateFocus(
            "the focus has no bias direction in the wide model".into(),
        ));
    };
    let threshold = 1.0;
    Ok(GofVerdict {
        reject: statistic > threshold,
        statistic,
        threshold,
        rho: 1.0,
        alpha: chi2_sf(threshold, 1.0),
        d_n: wf.d_n.as_slice().to_vec(),
        omega: omega.as_slice().to_vec(),
    })
}
