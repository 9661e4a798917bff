//! Scalar focus parameters `ψ(θ)` and their gradients.

use std::fmt;
use std::sync::Arc;

use crate::controls::{Controls, Functional};
use crate::error::{HybridError, Result};
use crate::models::{fd_gradient, Density, ModelAt, ParametricModel, WideAt, WideModel};

pub type FocusFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// The quantity of final interest.
#[derive(Clone)]
pub enum Focus {
    /// A distribution functional evaluated through the model.
    Functional(Functional),
    /// A raw parameter coordinate.
    Theta(usize),
    /// Any smooth function of θ; gradient by central differences.
    Custom { name: String, f: FocusFn },
}

impl fmt::Debug for Focus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl Focus {
    pub fn moment(k: u32) -> Self {
        Focus::Functional(Functional::Moment(k))
    }

    pub fn cell_prob(lo: f64, hi: f64) -> Self {
        Focus::Functional(Functional::Cell {
            lo,
            hi,
            closed: true,
        })
    }

    pub fn quantile(level: f64) -> Result<Self> {
        if !(level > 0.0 && level < 1.0) {
            return Err(HybridError::InvalidLevel(level));
        }
        Ok(Focus::Functional(Functional::Quantile(level)))
    }

    /// The j-th control parameter.
    pub fn control(controls: &Controls, j: usize) -> Result<Self> {
        controls
            .items()
            .get(j)
            .cloned()
            .map(Focus::Functional)
            .ok_or_else(|| HybridError::InvalidInput(format!("no control component {j}")))
    }

    pub fn custom(
        name: impl Into<String>,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Focus::Custom {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Focus::Functional(it) => it.label(),
            Focus::Theta(k) => format!("theta[{k}]"),
            Focus::Custom { name, .. } => name.clone(),
        }
    }

    fn check_theta(&self, p: usize) -> Result<()> {
        match self {
            Focus::Theta(k) if *k >= p => Err(HybridError::InvalidInput(format!(
                "focus coordinate {k} out of range for a {p}-parameter model"
            ))),
            _ => Ok(()),
        }
    }

    /// `ψ(θ)`.
    pub fn value(&self, model: &dyn ParametricModel, theta: &[f64]) -> Result<f64> {
        self.check_theta(theta.len())?;
        match self {
            Focus::Functional(it) => it.value(&ModelAt::new(model, theta)),
            Focus::Theta(k) => Ok(theta[*k]),
            Focus::Custom { f, .. } => Ok(f(theta)),
        }
    }

    /// `c = ∂ψ/∂θ`.
    pub fn gradient(&self, model: &dyn ParametricModel, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta.len())?;
        match self {
            Focus::Functional(it) => {
                let density = ModelAt::new(model, theta);
                let mu = it.value(&density)?;
                it.derivative(&density, mu, &|y| model.score(y, theta), theta.len())
            }
            Focus::Theta(k) => {
                let mut c = vec![0.0; theta.len()];
                c[*k] = 1.0;
                Ok(c)
            }
            Focus::Custom { f, .. } => Ok(fd_gradient(|t| f(t), theta)),
        }
    }

    /// `∂ψ/∂γ` at `(θ, γ₀)` in the wide model. Foci defined on θ alone do
    /// not move with γ.
    pub fn dgamma(&self, wide: &dyn WideModel, theta: &[f64]) -> Result<Vec<f64>> {
        let r = wide.r();
        match self {
            Focus::Functional(it) => {
                let narrow = wide.narrow();
                let density = ModelAt::new(narrow.as_ref(), theta);
                let mu = it.value(&density)?;
                it.derivative(&density, mu, &|y| wide.score_gamma(y, theta), r)
            }
            _ => Ok(vec![0.0; r]),
        }
    }

    /// Value of the focus under a data-generating wide model at `(θ, γ)`.
    pub fn wide_value(&self, wide: &dyn WideModel, theta: &[f64], gamma: &[f64]) -> Result<f64> {
        match self {
            Focus::Functional(it) => it.value(&WideAt {
                model: wide,
                theta,
                gamma,
            }),
            _ => self.value(wide.narrow().as_ref(), theta),
        }
    }

    /// Value under an arbitrary density, for foci that are distribution functionals.
    pub fn value_under(&self, density: &dyn Density) -> Option<Result<f64>> {
        match self {
            Focus::Functional(it) => Some(it.value(density)),
            _ => None,
        }
    }
}
