//! Plug-in limit quantities of the hybrid estimator: the joint score/control
//! covariance blocks, `J*`, `K*`, the sandwich and the focus standard deviation.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::controls::{ControlSet, Controls, Functional};
use crate::error::{HybridError, Result};
use crate::hl::{ml_fit, HLProblem};
use crate::linalg::{is_full_rank_psd, mean_cross, quad_form, row_major, sym_inverse, symmetrize};
use crate::models::{expect_on, score_matrix, Density, ModelAt, ParametricModel};

/// Covariance blocks of `(u, m)` and the control derivative matrix, before
/// any balance parameter is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RawBlocks {
    /// p×p, `E u uᵗ`.
    pub j: DMatrix<f64>,
    /// q×q, `E m mᵗ`.
    pub w: DMatrix<f64>,
    /// p×q, `E u mᵗ`.
    pub c: DMatrix<f64>,
    /// q×p.
    pub xi0: DMatrix<f64>,
}

impl RawBlocks {
    /// `Σ = [[J, C], [Cᵗ, W]]`.
    pub fn sigma(&self) -> DMatrix<f64> {
        let p = self.j.nrows();
        let q = self.w.nrows();
        let mut s = DMatrix::zeros(p + q, p + q);
        s.view_mut((0, 0), (p, p)).copy_from(&self.j);
        s.view_mut((0, p), (p, q)).copy_from(&self.c);
        s.view_mut((p, 0), (q, p)).copy_from(&self.c.transpose());
        s.view_mut((p, p), (q, q)).copy_from(&self.w);
        s
    }

    /// Fails with `DegenerateControls` when Σ is rank deficient.
    pub fn check_rank(&self) -> Result<()> {
        if is_full_rank_psd(&self.sigma()) {
            Ok(())
        } else {
            Err(HybridError::DegenerateControls(
                "the joint covariance of scores and controls is singular; the controls lie in the \
                 span of the model scores (they tread on one another's toes)"
                    .into(),
            ))
        }
    }
}

/// Limit matrices at a given balance parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticBlocks {
    pub a: f64,
    pub j: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub xi0: DMatrix<f64>,
    pub w_inv: DMatrix<f64>,
    pub jstar: DMatrix<f64>,
    pub jstar_inv: DMatrix<f64>,
    pub kstar: DMatrix<f64>,
    pub sandwich: DMatrix<f64>,
}

impl AsymptoticBlocks {
    /// Apply the balance parameter `a` to raw blocks, after checking Σ.
    pub fn new(raw: &RawBlocks, a: f64) -> Result<Self> {
        raw.check_rank()?;
        Self::assemble(raw, a)
    }

    /// As [`AsymptoticBlocks::new`] without the rank check on Σ.
    pub fn assemble(raw: &RawBlocks, a: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&a) {
            return Err(HybridError::InvalidInput(format!(
                "balance parameter {a} outside [0, 1)"
            )));
        }
        let RawBlocks { j, w, c, xi0 } = raw.clone();
        let w_inv = sym_inverse(&w, "W")?;
        let xi_w_xi = symmetrize(&(xi0.transpose() * &w_inv * &xi0));
        let cross = &c * &w_inv * &xi0;
        let cross = &cross + cross.transpose();
        let b = 1.0 - a;
        let (jstar, kstar) = if a == 0.0 {
            (j.clone(), j.clone())
        } else {
            (
                symmetrize(&(&j * b + &xi_w_xi * a)),
                symmetrize(&(&j * (b * b) + &xi_w_xi * (a * a) - cross * (a * b))),
            )
        };
        let jstar_inv = sym_inverse(&jstar, "J*")?;
        let sandwich = if a == 0.0 {
            jstar_inv.clone()
        } else {
            symmetrize(&(&jstar_inv * &kstar * &jstar_inv))
        };
        Ok(AsymptoticBlocks {
            a,
            j,
            w,
            c,
            xi0,
            w_inv,
            jstar,
            jstar_inv,
            kstar,
            sandwich,
        })
    }

    pub fn raw(&self) -> RawBlocks {
        RawBlocks {
            j: self.j.clone(),
            w: self.w.clone(),
            c: self.c.clone(),
            xi0: self.xi0.clone(),
        }
    }

    /// Same raw blocks at another balance parameter.
    pub fn at(&self, a: f64) -> Result<Self> {
        Self::assemble(&self.raw(), a)
    }

    pub fn summary(&self) -> BlocksSummary {
        let mat = |m: &DMatrix<f64>| MatrixJson {
            rows: m.nrows(),
            cols: m.ncols(),
            data: row_major(m),
        };
        BlocksSummary {
            a: self.a,
            j: mat(&self.j),
            w: mat(&self.w),
            c: mat(&self.c),
            xi0: mat(&self.xi0),
            jstar: mat(&self.jstar),
            kstar: mat(&self.kstar),
            sandwich: mat(&self.sandwich),
        }
    }
}

/// A matrix as row-major data with its dimensions.
#[derive(Debug, Clone, Serialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlocksSummary {
    pub a: f64,
    pub j: MatrixJson,
    pub w: MatrixJson,
    pub c: MatrixJson,
    pub xi0: MatrixJson,
    pub jstar: MatrixJson,
    pub kstar: MatrixJson,
    pub sandwich: MatrixJson,
}

/// Empirical blocks at θ: `Ĵ`, `Ŵ`, `Ĉ` as averaged outer products, `ξ̂₀` from the controls.
pub fn raw_blocks(
    model: &dyn ParametricModel,
    controls: &dyn ControlSet,
    data: &[f64],
    theta: &[f64],
) -> Result<RawBlocks> {
    let u = score_matrix(model, data, theta)?;
    let mu = controls.mu_of_theta(theta)?;
    let m = crate::controls::sample_constraint_matrix(controls, data, &mu)?;
    Ok(RawBlocks {
        j: mean_cross(&u, &u),
        w: mean_cross(&m, &m),
        c: mean_cross(&u, &m),
        xi0: controls.xi0(data, theta)?,
    })
}

/// Plug-in blocks for `prob` at θ.
pub fn estimate_blocks(prob: &HLProblem, theta: &[f64]) -> Result<AsymptoticBlocks> {
    let raw = raw_blocks(
        prob.model.as_ref(),
        prob.controls.as_ref(),
        &prob.data,
        theta,
    )?;
    AsymptoticBlocks::new(&raw, prob.a)
}

/// `κ = (cᵗ (J*)⁻¹ K* (J*)⁻¹ c)^{1/2}`.
pub fn kappa_a(blocks: &AsymptoticBlocks, c: &[f64]) -> Result<f64> {
    let cv = DVector::from_column_slice(c);
    if cv.len() != blocks.sandwich.nrows() {
        return Err(HybridError::InvalidInput(format!(
            "focus gradient has length {}, expected {}",
            cv.len(),
            blocks.sandwich.nrows()
        )));
    }
    if cv.iter().all(|&v| v == 0.0) {
        return Err(HybridError::DegenerateFocus(
            "focus gradient is zero".into(),
        ));
    }
    let v = quad_form(&blocks.sandwich, &cv);
    if !(v > 0.0) || !v.is_finite() {
        return Err(HybridError::numerical(format!(
            "focus variance {v} is not positive"
        )));
    }
    Ok(v.sqrt())
}

/// Outcome of the efficiency-cap rule for the balance parameter.
#[derive(Debug, Clone, Serialize)]
pub struct EfficiencySelection {
    pub a: f64,
    pub kappa0: f64,
    /// `(a, κ_a, κ_a/κ₀)` over the grid.
    pub curve: Vec<(f64, f64, f64)>,
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

/// κ_a/κ₀ over a grid, with blocks at the given θ (typically the ML fit).
pub fn kappa_curve(
    raw: &RawBlocks,
    c: &[f64],
    a_grid: &[f64],
) -> Result<(f64, Vec<(f64, f64, f64)>)> {
    raw.check_rank()?;
    let kappa0 = kappa_a(&AsymptoticBlocks::assemble(raw, 0.0)?, c)?;
    let curve = a_grid
        .iter()
        .map(|&a| {
            let k = kappa_a(&AsymptoticBlocks::assemble(raw, a)?, c)?;
            Ok((a, k, k / kappa0))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((kappa0, curve))
}

/// Largest grid value of `a` whose focus standard deviation stays within
/// `(1 + ε) κ₀`, all evaluated at the ML fit.
pub fn select_a_efficiency(
    prob: &HLProblem,
    eps: f64,
    a_grid: &[f64],
) -> Result<EfficiencySelection> {
    check_grid(a_grid)?;
    if !(eps >= 0.0) {
        return Err(HybridError::InvalidInput(format!(
            "efficiency slack {eps} must be nonnegative"
        )));
    }
    let ml = ml_fit(prob.model.as_ref(), &prob.data)?;
    let raw = raw_blocks(
        prob.model.as_ref(),
        prob.controls.as_ref(),
        &prob.data,
        &ml.theta,
    )?;
    let c = prob.focus.gradient(prob.model.as_ref(), &ml.theta)?;
    let (kappa0, curve) = kappa_curve(&raw, &c, a_grid)?;
    let cap = (1.0 + eps) * kappa0;
    let a = curve
        .iter()
        .filter(|(_, k, _)| *k <= cap)
        .map(|(a, _, _)| *a)
        .fold(None, |best: Option<f64>, a| {
            Some(best.map_or(a, |b| b.max(a)))
        })
        .ok_or_else(|| HybridError::InvalidGrid("no grid value meets the efficiency cap".into()))?;
    Ok(EfficiencySelection { a, kappa0, curve })
}

/// Population versions of the blocks under `truth` (quadrature), with the
/// score taken from `model` at θ and controls centred at `μ(θ)`. Extra
/// directions `extra(y)` (length r) are returned as `E m extraᵗ` (q×r) and
/// the joint second moment of `(u, extra)`.
pub struct PopulationBlocks {
    pub raw: RawBlocks,
    /// `E [u; s] [u; s]ᵗ`, (p+r)×(p+r).
    pub j_wide: DMatrix<f64>,
    /// q×r, `E m sᵗ`.
    pub k01: DMatrix<f64>,
}

pub fn population_blocks(
    controls: &Controls,
    theta: &[f64],
    truth: &dyn Density,
    extra: &dyn Fn(f64) -> Vec<f64>,
    r: usize,
) -> Result<PopulationBlocks> {
    let model = controls.model().clone();
    let p = model.dim();
    let q = controls.q();
    let mu = controls.mu_of_theta(theta)?;
    let (lo, hi) = truth.support();
    let (mut breaks, scale) = truth.bulk();
    breaks.extend(mu.iter().copied());
    for it in controls.items() {
        if let Functional::Cell { lo, hi, .. } = *it {
            breaks.extend([lo, hi]);
        }
    }
    let d = p + q + r;
    let vector = |y: f64| {
        let mut v = model.score(y, theta);
        v.extend(controls.m(y, &mu));
        v.extend(extra(y));
        v
    };
    let mut all = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let v = expect_on(
                truth,
                |y| {
                    let x = vector(y);
                    x[a] * x[b]
                },
                lo,
                hi,
                &breaks,
                scale,
            )?;
            all[(a, b)] = v;
            all[(b, a)] = v;
        }
    }
    let mut j_wide = DMatrix::zeros(p + r, p + r);
    let idx: Vec<usize> = (0..p).chain(p + q..d).collect();
    for (a, &ia) in idx.iter().enumerate() {
        for (b, &ib) in idx.iter().enumerate() {
            j_wide[(a, b)] = all[(ia, ib)];
        }
    }
    let raw = RawBlocks {
        j: all.view((0, 0), (p, p)).into_owned(),
        w: all.view((p, p), (q, q)).into_owned(),
        c: all.view((0, p), (p, q)).into_owned(),
        xi0: controls.xi0(&[], theta)?,
    };
    Ok(PopulationBlocks {
        raw,
        j_wide,
        k01: all.view((p, p + q), (q, r)).into_owned(),
    })
}

/// Population blocks when the model itself is the truth.
pub fn model_population_blocks(controls: &Controls, theta: &[f64]) -> Result<RawBlocks> {
    let model = controls.model().clone();
    let at = ModelAt::new(model.as_ref(), theta);
    Ok(population_blocks(controls, theta, &at, &|_| Vec::new(), 0)?.raw)
}
