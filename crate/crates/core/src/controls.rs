//! Control functions `m(y, μ)` with `E m(Y, μ) = 0`, the model-implied
//! control values `μ(θ)`, and their Jacobian.

use std::fmt::{self, Debug};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{HybridError, Result};
use crate::models::{expect_on, Density, ModelAt, ParametricModel};

/// How the derivative matrix ξ₀ is formed for a control component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Xi0Mode {
    /// `m` is differentiable in μ: rows `E ∂m/∂μ · ∂μ/∂θ`.
    Smooth,
    /// Indicator controls: rows `f(μ) ∂μ/∂θ`.
    Quantile,
}

/// A scalar functional of a distribution, each paired with its natural control.
#[derive(Debug, Clone, PartialEq)]
pub enum Functional {
    /// `E Y^k`, control `y^k − μ`.
    Moment(u32),
    /// `P(Y ∈ A)`, control `1{y ∈ A} − μ`. `closed` includes the upper end.
    Cell { lo: f64, hi: f64, closed: bool },
    /// `F⁻¹(α)`, control `1{y ≤ μ} − α`.
    Quantile(f64),
}

impl Functional {
    pub fn label(&self) -> String {
        match self {
            Functional::Moment(k) => format!("E[Y^{k}]"),
            Functional::Cell { lo, hi, closed } => {
                format!("P[{lo}, {hi}{}", if *closed { "]" } else { ")" })
            }
            Functional::Quantile(a) => format!("q({a})"),
        }
    }

    pub fn xi0_mode(&self) -> Xi0Mode {
        match self {
            Functional::Quantile(_) => Xi0Mode::Quantile,
            _ => Xi0Mode::Smooth,
        }
    }

    fn contains(&self, y: f64) -> bool {
        match *self {
            Functional::Cell { lo, hi, closed } => y >= lo && (y < hi || (closed && y == hi)),
            _ => false,
        }
    }

    /// The control function `m(y, μ)`.
    pub fn m(&self, y: f64, mu: f64) -> f64 {
        match *self {
            Functional::Moment(k) => y.powi(k as i32) - mu,
            Functional::Cell { .. } => f64::from(u8::from(self.contains(y))) - mu,
            Functional::Quantile(a) => f64::from(u8::from(y <= mu)) - a,
        }
    }

    /// Interval carrying the integrand of the functional, and the weight `h`.
    fn region(&self, support: (f64, f64)) -> (f64, f64) {
        match *self {
            Functional::Cell { lo, hi, .. } => (lo.max(support.0), hi.min(support.1)),
            _ => support,
        }
    }

    /// Value of the functional under `density`.
    pub fn value(&self, density: &dyn Density) -> Result<f64> {
        match *self {
            Functional::Moment(k) => {
                if let Some(v) = density.moment(k) {
                    return Ok(v);
                }
                let (breaks, scale) = density.bulk();
                let (lo, hi) = density.support();
                expect_on(density, |y| y.powi(k as i32), lo, hi, &breaks, scale)
            }
            Functional::Cell { lo, hi, .. } => {
                let (slo, shi) = density.support();
                let upper = if hi >= shi { 1.0 } else { density.cdf(hi) };
                let lower = if lo <= slo { 0.0 } else { density.cdf(lo) };
                Ok(upper - lower)
            }
            Functional::Quantile(a) => {
                let q = density.quantile(a);
                // One Newton polish on the CDF.
                let f = density.density(q);
                if f > 0.0 && f.is_finite() {
                    let step = (density.cdf(q) - a) / f;
                    if step.abs() < 1e-6 * q.abs().max(1.0) {
                        return Ok(q - step);
                    }
                }
                Ok(q)
            }
        }
    }

    /// Derivative of the functional along a family of densities whose log
    /// derivative at `density` is `dir(y)` (a `dim`-vector). `mu` is the current
    /// functional value (used by quantiles).
    pub fn derivative(
        &self,
        density: &dyn Density,
        mu: f64,
        dir: &dyn Fn(f64) -> Vec<f64>,
        dim: usize,
    ) -> Result<Vec<f64>> {
        let (breaks, scale) = density.bulk();
        let support = density.support();
        let (lo, hi) = match *self {
            Functional::Quantile(_) => (support.0, mu),
            _ => self.region(support),
        };
        let weight = |y: f64| match *self {
            Functional::Moment(k) => y.powi(k as i32),
            _ => 1.0,
        };
        let mut out = Vec::with_capacity(dim);
        for j in 0..dim {
            let v = expect_on(density, |y| weight(y) * dir(y)[j], lo, hi, &breaks, scale)?;
            out.push(v);
        }
        if let Functional::Quantile(_) = self {
            let f = density.density(mu);
            if !(f > 0.0) {
                return Err(HybridError::numerical(format!(
                    "density vanishes at quantile {mu}"
                )));
            }
            out.iter_mut().for_each(|v| *v = -*v / f);
        }
        Ok(out)
    }
}

/// Estimating functions `m(y, μ)` together with the map `θ ↦ μ(θ)`.
pub trait ControlSet: Send + Sync + Debug {
    fn q(&self) -> usize;
    fn m(&self, y: f64, mu: &[f64]) -> Vec<f64>;
    fn mu_of_theta(&self, theta: &[f64]) -> Result<Vec<f64>>;
    /// p×q matrix whose column j is `∂μ_j/∂θ`.
    fn dmu_dtheta(&self, theta: &[f64]) -> Result<DMatrix<f64>>;
    fn xi0_modes(&self) -> Vec<Xi0Mode>;
    /// Plug-in estimate of ξ₀ (q×p) at θ.
    fn xi0(&self, data: &[f64], theta: &[f64]) -> Result<DMatrix<f64>>;
    /// True when every component has the form `m_j = g_j(y) − μ_j`.
    fn mean_type(&self) -> bool {
        false
    }
    fn labels(&self) -> Vec<String> {
        (0..self.q()).map(|j| format!("mu{j}")).collect()
    }
}

/// A set of controls built from [`Functional`]s evaluated through a model.
#[derive(Clone)]
pub struct Controls {
    model: Arc<dyn ParametricModel>,
    items: Vec<Functional>,
}

impl Debug for Controls {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Controls")
            .field("model", &self.model.name())
            .field("items", &self.items)
            .finish()
    }
}

impl Controls {
    pub fn new(model: Arc<dyn ParametricModel>, items: Vec<Functional>) -> Result<Self> {
        if items.is_empty() {
            return Err(HybridError::InvalidInput(
                "no control functions given".into(),
            ));
        }
        Ok(Controls { model, items })
    }

    pub fn items(&self) -> &[Functional] {
        &self.items
    }

    pub fn model(&self) -> &Arc<dyn ParametricModel> {
        &self.model
    }

    /// Stack two control sets on the same model.
    pub fn concat(mut self, other: Controls) -> Self {
        self.items.extend(other.items);
        self
    }

    /// `μ` under an arbitrary density.
    pub fn mu_under(&self, density: &dyn Density) -> Result<Vec<f64>> {
        self.items.iter().map(|it| it.value(density)).collect()
    }
}

impl ControlSet for Controls {
    fn q(&self) -> usize {
        self.items.len()
    }

    fn m(&self, y: f64, mu: &[f64]) -> Vec<f64> {
        self.items
            .iter()
            .zip(mu)
            .map(|(it, &m)| it.m(y, m))
            .collect()
    }

    fn mu_of_theta(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.mu_under(&ModelAt::new(self.model.as_ref(), theta))
    }

    fn dmu_dtheta(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        let model = self.model.as_ref();
        let density = ModelAt::new(model, theta);
        let p = model.dim();
        let mu = self.mu_of_theta(theta)?;
        let score = |y: f64| model.score(y, theta);
        let mut out = DMatrix::zeros(p, self.items.len());
        for (j, it) in self.items.iter().enumerate() {
            let col = it.derivative(&density, mu[j], &score, p)?;
            for i in 0..p {
                out[(i, j)] = col[i];
            }
        }
        Ok(out)
    }

    fn xi0_modes(&self) -> Vec<Xi0Mode> {
        self.items.iter().map(Functional::xi0_mode).collect()
    }

    fn xi0(&self, _data: &[f64], theta: &[f64]) -> Result<DMatrix<f64>> {
        // For m = g − μ the derivative in μ is −1 exactly; for indicator
        // controls the smoothed derivative is the density at μ.
        let dmu = self.dmu_dtheta(theta)?;
        let mu = self.mu_of_theta(theta)?;
        let mut xi = dmu.transpose();
        for (j, it) in self.items.iter().enumerate() {
            let factor = match it.xi0_mode() {
                Xi0Mode::Smooth => -1.0,
                Xi0Mode::Quantile => self.model.log_density(mu[j], theta).exp(),
            };
            xi.row_mut(j).scale_mut(factor);
        }
        Ok(xi)
    }

    fn mean_type(&self) -> bool {
        self.items.iter().all(|it| it.xi0_mode() == Xi0Mode::Smooth)
    }

    fn labels(&self) -> Vec<String> {
        self.items.iter().map(Functional::label).collect()
    }
}

/// `m_j(y, μ_j) = y^{k_j} − μ_j`.
pub fn moment_control(model: Arc<dyn ParametricModel>, powers: &[u32]) -> Result<Controls> {
    if let Some(k) = powers.iter().find(|&&k| k == 0) {
        return Err(HybridError::InvalidInput(format!(
            "moment power {k} is constant"
        )));
    }
    Controls::new(
        model,
        powers.iter().map(|&k| Functional::Moment(k)).collect(),
    )
}

/// `m_j(y, μ_j) = 1{y ≤ μ_j} − α_j`.
pub fn quantile_control(model: Arc<dyn ParametricModel>, levels: &[f64]) -> Result<Controls> {
    if let Some(&a) = levels.iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
        return Err(HybridError::InvalidLevel(a));
    }
    Controls::new(
        model,
        levels.iter().map(|&a| Functional::Quantile(a)).collect(),
    )
}

/// Cell-probability controls `1{y ∈ A_j} − p_j`.
///
/// Standalone cells are closed intervals, must be disjoint up to shared
/// endpoints, and must not jointly exhaust the support. A partition must tile
/// the support with half-open cells; its last cell is dropped.
pub fn cell_control(
    model: Arc<dyn ParametricModel>,
    cells: &[(f64, f64)],
    partition: bool,
) -> Result<Controls> {
    let (slo, shi) = model.support();
    if cells.is_empty() {
        return Err(HybridError::InvalidCells("no cells given".into()));
    }
    for &(lo, hi) in cells {
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(HybridError::InvalidCells(format!(
                "empty or malformed cell [{lo}, {hi}]"
            )));
        }
        if hi <= slo || lo >= shi {
            return Err(HybridError::InvalidCells(format!(
                "cell [{lo}, {hi}] misses the support"
            )));
        }
    }
    let mut sorted = cells.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in sorted.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(HybridError::InvalidCells(format!(
                "cells [{}, {}] and [{}, {}] overlap",
                w[0].0, w[0].1, w[1].0, w[1].1
            )));
        }
    }
    let contiguous = sorted.windows(2).all(|w| w[1].0 == w[0].1);
    let covers = contiguous && sorted[0].0 <= slo && sorted[sorted.len() - 1].1 >= shi;
    if partition {
        if !covers {
            return Err(HybridError::InvalidCells(
                "partition cells must tile the support".into(),
            ));
        }
        if sorted.len() < 2 {
            return Err(HybridError::InvalidCells(
                "a partition needs at least two cells".into(),
            ));
        }
        let items = sorted[..sorted.len() - 1]
            .iter()
            .map(|&(lo, hi)| Functional::Cell {
                lo,
                hi,
                closed: false,
            })
            .collect();
        return Controls::new(model, items);
    }
    if covers {
        let what = if sorted.len() == 1 {
            "cell covers the whole support (probability one)"
        } else {
            "cells exhaust the support; declare them as a partition"
        };
        return Err(HybridError::InvalidCells(what.into()));
    }
    let items = cells
        .iter()
        .map(|&(lo, hi)| Functional::Cell {
            lo,
            hi,
            closed: true,
        })
        .collect();
    Controls::new(model, items)
}

/// n×q matrix with row i equal to `m(Y_i, μ)`.
pub fn sample_constraint_matrix(
    cs: &dyn ControlSet,
    data: &[f64],
    mu: &[f64],
) -> Result<DMatrix<f64>> {
    let q = cs.q();
    if mu.len() != q {
        return Err(HybridError::InvalidInput(format!(
            "control value has length {}, expected {q}",
            mu.len()
        )));
    }
    let mut out = DMatrix::zeros(data.len(), q);
    for (i, &y) in data.iter().enumerate() {
        let row = cs.m(y, mu);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(HybridError::numerical_at("non-finite control value", i));
        }
        for j in 0..q {
            out[(i, j)] = row[j];
        }
    }
    Ok(out)
}
