//! Parametric working models, their wide extensions, and the density handles
//! the quadrature-based functionals integrate against.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal};

use crate::error::{HybridError, Result};
use crate::quadrature;
use crate::special::{
    beta_reg, digamma, gamma_p, ln_beta, ln_gamma, normal_cdf, normal_quantile, LN_SQRT_2PI,
};

/// Central-difference step for coordinate `x`.
pub fn fd_step(x: f64) -> f64 {
    1e-6f64.max(1e-6 * x.abs())
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|j| {
            let h = fd_step(x[j]);
            work[j] = x[j] + h;
            let up = f(&work);
            work[j] = x[j] - h;
            let down = f(&work);
            work[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Deterministic generator for a given seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A univariate density on an interval.
pub trait Density: Send + Sync {
    fn log_density(&self, y: f64) -> f64;
    fn support(&self) -> (f64, f64);

    fn density(&self, y: f64) -> f64 {
        let v = self.log_density(y).exp();
        if v.is_nan() {
            0.0
        } else {
            v
        }
    }

    fn cdf(&self, y: f64) -> f64 {
        cdf_by_quadrature(self, y)
    }

    fn quantile(&self, u: f64) -> f64 {
        invert_cdf(|y| self.cdf(y), self.support(), u, 1e-13)
    }

    /// Closed-form `E Y^k` when available.
    fn moment(&self, _k: u32) -> Option<f64> {
        None
    }

    /// Split points and tail scale that keep quadrature against this density
    /// well conditioned.
    fn bulk(&self) -> (Vec<f64>, f64) {
        let qs: Vec<f64> = [0.01, 0.25, 0.5, 0.75, 0.99]
            .iter()
            .map(|&u| self.quantile(u))
            .collect();
        let scale = (qs[4] - qs[0]).max(1e-8);
        (qs, scale)
    }
}

/// Distribution function by integrating the density from the lower support end.
pub fn cdf_by_quadrature<D: Density + ?Sized>(density: &D, y: f64) -> f64 {
    let (lo, hi) = density.support();
    if y <= lo {
        return 0.0;
    }
    if y >= hi {
        return 1.0;
    }
    quadrature::integrate(|t| density.density(t), lo, y)
        .unwrap_or(f64::NAN)
        .clamp(0.0, 1.0)
}

/// `∫ h(y) f(y) dy` over the support of `density`.
pub fn expectation<D: Density + ?Sized, H: Fn(f64) -> f64>(density: &D, h: H) -> Result<f64> {
    let (lo, hi) = density.support();
    let (breaks, scale) = density.bulk();
    expect_on(density, h, lo, hi, &breaks, scale)
}

/// `∫_lo^hi h(y) f(y) dy` split at `breaks`.
pub fn expect_on<D: Density + ?Sized, H: Fn(f64) -> f64>(
    density: &D,
    h: H,
    lo: f64,
    hi: f64,
    breaks: &[f64],
    scale: f64,
) -> Result<f64> {
    quadrature::integrate_split(
        |y| {
            let d = density.density(y);
            if d == 0.0 {
                0.0
            } else {
                h(y) * d
            }
        },
        lo,
        hi,
        breaks,
        scale,
    )
}

/// A parametric family `f(y, θ)` for scalar observations.
pub trait ParametricModel: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn param_names(&self) -> Vec<String>;
    fn log_density(&self, y: f64, theta: &[f64]) -> f64;

    /// `∂ log f / ∂θ`; central differences unless overridden.
    fn score(&self, y: f64, theta: &[f64]) -> Vec<f64> {
        fd_gradient(|t| self.log_density(y, t), theta)
    }

    fn in_support(&self, theta: &[f64]) -> bool;

    /// Coordinates constrained to be positive; optimizers move them on the log scale.
    fn positive_params(&self) -> Vec<bool>;

    /// Observation support `(lo, hi)`, possibly infinite.
    fn support(&self) -> (f64, f64);

    fn cdf(&self, y: f64, theta: &[f64]) -> f64 {
        cdf_by_quadrature(&ModelAt::new(self, theta), y)
    }

    /// Draw `n` observations using `rng`. Defaults to inverse-CDF sampling.
    fn sample_with(&self, theta: &[f64], n: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                invert_cdf(|y| self.cdf(y, theta), self.support(), u, 1e-12)
            })
            .collect()
    }

    fn sample(&self, theta: &[f64], n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded_rng(seed);
        self.sample_with(theta, n, &mut rng)
    }

    /// Starting value for maximum likelihood.
    fn initial_guess(&self, data: &[f64]) -> Vec<f64>;

    /// Closed-form `E_θ Y^k`, if the family has one.
    fn moment(&self, _k: u32, _theta: &[f64]) -> Option<f64> {
        None
    }

    /// Closed-form quantile function, if the family has one.
    fn quantile(&self, _u: f64, _theta: &[f64]) -> Option<f64> {
        None
    }
}

/// `f(·, θ)` viewed as a fixed density.
pub struct ModelAt<'a, M: ParametricModel + ?Sized> {
    pub model: &'a M,
    pub theta: &'a [f64],
}

impl<'a, M: ParametricModel + ?Sized> ModelAt<'a, M> {
    pub fn new(model: &'a M, theta: &'a [f64]) -> Self {
        ModelAt { model, theta }
    }
}

impl<M: ParametricModel + ?Sized> Density for ModelAt<'_, M> {
    fn log_density(&self, y: f64) -> f64 {
        self.model.log_density(y, self.theta)
    }
    fn support(&self) -> (f64, f64) {
        self.model.support()
    }
    fn cdf(&self, y: f64) -> f64 {
        self.model.cdf(y, self.theta)
    }
    fn quantile(&self, u: f64) -> f64 {
        self.model
            .quantile(u, self.theta)
            .unwrap_or_else(|| invert_cdf(|y| self.cdf(y), self.support(), u, 1e-13))
    }
    fn moment(&self, k: u32) -> Option<f64> {
        self.model.moment(k, self.theta)
    }
}

/// Owned variant of [`ModelAt`], convenient as a "truth" handle.
#[derive(Debug, Clone)]
pub struct FittedDensity {
    pub model: Arc<dyn ParametricModel>,
    pub theta: Vec<f64>,
}

impl Density for FittedDensity {
    fn log_density(&self, y: f64) -> f64 {
        self.model.log_density(y, &self.theta)
    }
    fn support(&self) -> (f64, f64) {
        self.model.support()
    }
    fn cdf(&self, y: f64) -> f64 {
        self.model.cdf(y, &self.theta)
    }
    fn quantile(&self, u: f64) -> f64 {
        ModelAt::new(self.model.as_ref(), &self.theta).quantile(u)
    }
    fn moment(&self, k: u32) -> Option<f64> {
        self.model.moment(k, &self.theta)
    }
}

/// Root of `cdf(y) = u` on the support by bracketing bisection.
pub fn invert_cdf<F: Fn(f64) -> f64>(cdf: F, support: (f64, f64), u: f64, tol: f64) -> f64 {
    let (slo, shi) = support;
    let mut lo = if slo.is_finite() { slo } else { -1.0 };
    let mut hi = if shi.is_finite() { shi } else { 1.0 };
    if !slo.is_finite() {
        while cdf(lo) > u {
            lo *= 2.0;
        }
    }
    if !shi.is_finite() {
        while cdf(hi) < u && hi < 1e300 {
            hi *= 2.0;
        }
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        let c = cdf(mid);
        if (c - u).abs() <= tol || hi - lo <= 1e-15 * mid.abs().max(1e-300) {
            return mid;
        }
        if c < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn mean_var(data: &[f64]) -> (f64, f64) {
    let n = data.len().max(1) as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Normal family with parameters (ξ, σ).
#[derive(Debug, Clone, Default)]
pub struct NormalModel;

impl ParametricModel for NormalModel {
    fn name(&self) -> &str {
        "normal"
    }
    fn dim(&self) -> usize {
        2
    }
    fn param_names(&self) -> Vec<String> {
        vec!["xi".into(), "sigma".into()]
    }
    fn log_density(&self, y: f64, theta: &[f64]) -> f64 {
        let (xi, sigma) = (theta[0], theta[1]);
        if sigma <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let z = (y - xi) / sigma;
        -LN_SQRT_2PI - sigma.ln() - 0.5 * z * z
    }
    fn score(&self, y: f64, theta: &[f64]) -> Vec<f64> {
        let (xi, sigma) = (theta[0], theta[1]);
        let d = y - xi;
        vec![d / (sigma * sigma), -1.0 / sigma + d * d / sigma.powi(3)]
    }
    fn in_support(&self, theta: &[f64]) -> bool {
        theta.len() == 2 && theta[0].is_finite() && theta[1] > 0.0 && theta[1].is_finite()
    }
    fn positive_params(&self) -> Vec<bool> {
        vec![false, true]
    }
    fn support(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }
    fn cdf(&self, y: f64, theta: &[f64]) -> f64 {
        normal_cdf((y - theta[0]) / theta[1])
    }
    fn sample_with(&self, theta: &[f64], n: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        let dist = Normal::new(theta[0], theta[1]).expect("valid normal parameters");
        (0..n).map(|_| dist.sample(rng)).collect()
    }
    fn initial_guess(&self, data: &[f64]) -> Vec<f64> {
        let (m, v) = mean_var(data);
        vec![m, v.sqrt().max(1e-8)]
    }
    fn moment(&self, k: u32, theta: &[f64]) -> Option<f64> {
        // E(ξ + σZ)^k by the binomial expansion with E Z^{2j} = (2j-1)!!.
        let (xi, sigma) = (theta[0], theta[1]);
        let mut total = 0.0;
        let mut binom = 1.0;
        let mut double_fact = 1.0;
        for j in 0..=k {
            if j > 0 {
                binom *= f64::from(k - j + 1) / f64::from(j);
            }
            if j % 2 == 0 {
                if j > 0 {
                    double_fact *= f64::from(j - 1);
                }
                total += binom * xi.powi((k - j) as i32) * sigma.powi(j as i32) * double_fact;
            }
        }
        Some(total)
    }
    fn quantile(&self, u: f64, theta: &[f64]) -> Option<f64> {
        Some(theta[0] + theta[1] * normal_quantile(u))
    }
}

/// Gamma family, shape `b` and rate `c`: `f = c^b y^{b-1} e^{-cy} / Γ(b)`.
#[derive(Debug, Clone, Default)]
pub struct GammaModel;

impl ParametricModel for GammaModel {
    fn name(&self) -> &str {
        "gamma"
    }
    fn dim(&self) -> usize {
        2
    }
    fn param_names(&self) -> Vec<String> {
        vec!["shape".into(), "rate".into()]
    }
    fn log_density(&self, y: f64, theta: &[f64]) -> f64 {
        let (b, c) = (theta[0], theta[1]);
        if y <= 0.0 || b <= 0.0 || c <= 0.0 {
            return f64::NEG_INFINITY;
        }
        b * c.ln() + (b - 1.0) * y.ln() - c * y - ln_gamma(b)
    }
    fn score(&self, y: f64, theta: &[f64]) -> Vec<f64> {
        let (b, c) = (theta[0], theta[1]);
        vec![c.ln() + y.ln() - digamma(b), b / c - y]
    }
    fn in_support(&self, theta: &[f64]) -> bool {
        theta.len() == 2 && theta.iter().all(|v| *v > 0.0 && v.is_finite())
    }
    fn positive_params(&self) -> Vec<bool> {
        vec![true, true]
    }
    fn support(&self) -> (f64, f64) {
        (0.0, f64::INFINITY)
    }
    fn cdf(&self, y: f64, theta: &[f64]) -> f64 {
        gamma_p(theta[0], theta[1] * y)
    }
    fn sample_with(&self, theta: &[f64], n: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        let dist = Gamma::new(theta[0], 1.0 / theta[1]).expect("valid gamma parameters");
        (0..n).map(|_| dist.sample(rng)).collect()
    }
    fn initial_guess(&self, data: &[f64]) -> Vec<f64> {
        let (m, v) = mean_var(data);
        let v = v.max(1e-12);
        vec![(m * m / v).max(1e-3), (m / v).max(1e-8)]
    }
    fn moment(&self, k: u32, theta: &[f64]) -> Option<f64> {
        let (b, c) = (theta[0], theta[1]);
        Some((0..k).map(|i| (b + f64::from(i)) / c).product())
    }
}

/// Beta family with shapes (b, c).
#[derive(Debug, Clone, Default)]
pub struct BetaModel;

impl ParametricModel for BetaModel {
    fn name(&self) -> &str {
        "beta"
    }
    fn dim(&self) -> usize {
        2
    }
    fn param_names(&self) -> Vec<String> {
        vec!["b".into(), "c".into()]
    }
    fn log_density(&self, y: f64, theta: &[f64]) -> f64 {
        let (b, c) = (theta[0], theta[1]);
        if !(y > 0.0 && y < 1.0) || b <= 0.0 || c <= 0.0 {
            return f64::NEG_INFINITY;
        }
        (b - 1.0) * y.ln() + (c - 1.0) * (-y).ln_1p() - ln_beta(b, c)
    }
    fn score(&self, y: f64, theta: &[f64]) -> Vec<f64> {
        let (b, c) = (theta[0], theta[1]);
        let both = digamma(b + c);
        vec![y.ln() - digamma(b) + both, (-y).ln_1p() - digamma(c) + both]
    }
    fn in_support(&self, theta: &[f64]) -> bool {
        theta.len() == 2 && theta.iter().all(|v| *v > 0.0 && v.is_finite())
    }
    fn positive_params(&self) -> Vec<bool> {
        vec![true, true]
    }
    fn support(&self) -> (f64, f64) {
        (0.0, 1.0)
    }
    fn cdf(&self, y: f64, theta: &[f64]) -> f64 {
        if y <= 0.0 {
            0.0
        } else if y >= 1.0 {
            1.0
        } else {
            beta_reg(theta[0], theta[1], y)
        }
    }
    fn sample_with(&self, theta: &[f64], n: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        let dist = Beta::new(theta[0], theta[1]).expect("valid beta parameters");
        (0..n).map(|_| dist.sample(rng)).collect()
    }
    fn initial_guess(&self, data: &[f64]) -> Vec<f64> {
        let (m, v) = mean_var(data);
        let common = (m * (1.0 - m) / v.max(1e-12) - 1.0).max(1e-2);
        vec![(m * common).max(1e-3), ((1.0 - m) * common).max(1e-3)]
    }
    fn moment(&self, k: u32, theta: &[f64]) -> Option<f64> {
        let (b, c) = (theta[0], theta[1]);
        Some(
            (0..k)
                .map(|i| (b + f64::from(i)) / (b + c + f64::from(i)))
                .product(),
        )
    }
}

/// One-parameter family `θ y^{θ-1}` on (0, 1), i.e. Beta(θ, 1).
#[derive(Debug, Clone, Default)]
pub struct BetaOneModel;

impl ParametricModel for BetaOneModel {
    fn name(&self) -> &str {
        "beta_one"
    }
    fn dim(&self) -> usize {
        1
    }
    fn param_names(&self) -> Vec<String> {
        vec!["theta".into()]
    }
    fn log_density(&self, y: f64, theta: &[f64]) -> f64 {
        let t = theta[0];
        if !(y > 0.0 && y < 1.0) || t <= 0.0 {
            return f64::NEG_INFINITY;
        }
        t.ln() + (t - 1.0) * y.ln()
    }
    fn score(&self, y: f64, theta: &[f64]) -> Vec<f64> {
        vec![1.0 / theta[0] + y.ln()]
    }
    fn in_support(&self, theta: &[f64]) -> bool {
        theta.len() == 1 && theta[0] > 0.0 && theta[0].is_finite()
    }
    fn positive_params(&self) -> Vec<bool> {
        vec![true]
    }
    fn support(&self) -> (f64, f64) {
        (0.0, 1.0)
    }
    fn cdf(&self, y: f64, theta: &[f64]) -> f64 {
        y.clamp(0.0, 1.0).powf(theta[0])
    }
    fn sample_with(&self, theta: &[f64], n: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                // u in [0, 1); 1 - u in (0, 1].
                (1.0 - u).powf(1.0 / theta[0])
            })
            .collect()
    }
    fn initial_guess(&self, data: &[f64]) -> Vec<f64> {
        let s: f64 = data.iter().map(|y| y.ln()).sum();
        vec![(-(data.len() as f64) / s).max(1e-6)]
    }
    fn moment(&self, k: u32, theta: &[f64]) -> Option<f64> {
        Some(theta[0] / (theta[0] + f64::from(k)))
    }
    fn quantile(&self, u: f64, theta: &[f64]) -> Option<f64> {
        Some(u.powf(1.0 / theta[0]))
    }
}

/// Names accepted by [`builtin_model`].
pub const BUILTIN_MODELS: [&str; 4] = ["normal", "gamma", "beta", "beta_one"];

pub fn builtin_model(name: &str) -> Result<Arc<dyn ParametricModel>> {
    match name {
        "normal" => Ok(Arc::new(NormalModel)),
        "gamma" => Ok(Arc::new(GammaModel)),
        "beta" => Ok(Arc::new(BetaModel)),
        "beta_one" => Ok(Arc::new(BetaOneModel)),
        other => Err(HybridError::UnsupportedModel(other.to_string())),
    }
}

/// `Ĵ = n⁻¹ Σ u(Yᵢ,θ) u(Yᵢ,θ)ᵗ`.
pub fn empirical_fisher(
    model: &dyn ParametricModel,
    data: &[f64],
    theta: &[f64],
) -> Result<DMatrix<f64>> {
    let scores = score_matrix(model, data, theta)?;
    Ok(crate::linalg::mean_cross(&scores, &scores))
}

/// n×p matrix of scores, row i = u(Yᵢ, θ).
pub fn score_matrix(
    model: &dyn ParametricModel,
    data: &[f64],
    theta: &[f64],
) -> Result<DMatrix<f64>> {
    let p = model.dim();
    let mut out = DMatrix::zeros(data.len(), p);
    for (i, &y) in data.iter().enumerate() {
        let u = model.score(y, theta);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(HybridError::numerical_at("non-finite score", i));
        }
        for j in 0..p {
            out[(i, j)] = u[j];
        }
    }
    Ok(out)
}

/// A parametric extension `f(y, θ, γ)` that equals the working model at `γ = γ₀`.
pub trait WideModel: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn narrow(&self) -> Arc<dyn ParametricModel>;
    fn r(&self) -> usize;
    fn gamma0(&self) -> Vec<f64>;
    fn log_density_wide(&self, y: f64, theta: &[f64], gamma: &[f64]) -> f64;

    /// Score in (θ, γ), length p + r.
    fn score_wide(&self, y: f64, theta: &[f64], gamma: &[f64]) -> Vec<f64> {
        let p = theta.len();
        let mut joint = theta.to_vec();
        joint.extend_from_slice(gamma);
        fd_gradient(|x| self.log_density_wide(y, &x[..p], &x[p..]), &joint)
    }

    /// `S(y) = ∂ log f(y, θ, γ₀) / ∂γ`.
    fn score_gamma(&self, y: f64, theta: &[f64]) -> Vec<f64> {
        let p = theta.len();
        self.score_wide(y, theta, &self.gamma0())[p..].to_vec()
    }

    fn gamma_positive(&self) -> Vec<bool>;
    fn gamma_in_support(&self, gamma: &[f64]) -> bool;

    fn cdf_wide(&self, y: f64, theta: &[f64], gamma: &[f64]) -> f64 {
        let at = WideAt {
            model: self,
            theta,
            gamma,
        };
        cdf_by_quadrature(&at, y)
    }

    fn sample_wide_with(
        &self,
        theta: &[f64],
        gamma: &[f64],
        n: usize,
        rng: &mut dyn RngCore,
    ) -> Vec<f64> {
        let support = self.narrow().support();
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                invert_cdf(|y| self.cdf_wide(y, theta, gamma), support, u, 1e-12)
            })
            .collect()
    }

    fn sample_wide(&self, theta: &[f64], gamma: &[f64], n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded_rng(seed);
        self.sample_wide_with(theta, gamma, n, &mut rng)
    }
}

/// `f(·, θ, γ)` as a fixed density.
pub struct WideAt<'a, W: WideModel + ?Sized> {
    pub model: &'a W,
    pub theta: &'a [f64],
    pub gamma: &'a [f64],
}

impl<W: WideModel + ?Sized> Density for WideAt<'_, W> {
    fn log_density(&self, y: f64) -> f64 {
        self.model.log_density_wide(y, self.theta, self.gamma)
    }
    fn support(&self) -> (f64, f64) {
        self.model.narrow().support()
    }
    fn cdf(&self, y: f64) -> f64 {
        self.model.cdf_wide(y, self.theta, self.gamma)
    }
}

/// Owned wide density, for use as a data-generating truth.
#[derive(Debug, Clone)]
pub struct WideDensity {
    pub model: Arc<dyn WideModel>,
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Density for WideDensity {
    fn log_density(&self, y: f64) -> f64 {
        self.model.log_density_wide(y, &self.theta, &self.gamma)
    }
    fn support(&self) -> (f64, f64) {
        self.model.narrow().support()
    }
    fn cdf(&self, y: f64) -> f64 {
        self.model.cdf_wide(y, &self.theta, &self.gamma)
    }
}

/// Beta(θ, 1) inside Beta(θ, γ) with γ₀ = 1.
#[derive(Debug, Clone, Default)]
pub struct BetaOneInBeta;

impl WideModel for BetaOneInBeta {
    fn name(&self) -> &str {
        "beta_one_in_beta"
    }
    fn narrow(&self) -> Arc<dyn ParametricModel> {
        Arc::new(BetaOneModel)
    }
    fn r(&self) -> usize {
        1
    }
    fn gamma0(&self) -> Vec<f64> {
        vec![1.0]
    }
    fn log_density_wide(&self, y: f64, theta: &[f64], gamma: &[f64]) -> f64 {
        if gamma[0] == 1.0 {
            return BetaOneModel.log_density(y, theta);
        }
        BetaModel.log_density(y, &[theta[0], gamma[0]])
    }
    fn score_wide(&self, y: f64, theta: &[f64], gamma: &[f64]) -> Vec<f64> {
        BetaModel.score(y, &[theta[0], gamma[0]])
    }
    fn score_gamma(&self, y: f64, theta: &[f64]) -> Vec<f64> {
        // ∂/∂γ log Beta(y; θ, γ) at γ = 1.
        vec![(-y).ln_1p() - digamma(1.0) + digamma(theta[0] + 1.0)]
    }
    fn gamma_positive(&self) -> Vec<bool> {
        vec![true]
    }
    fn gamma_in_support(&self, gamma: &[f64]) -> bool {
        gamma.len() == 1 && gamma[0] > 0.0 && gamma[0].is_finite()
    }
    fn cdf_wide(&self, y: f64, theta: &[f64], gamma: &[f64]) -> f64 {
        BetaModel.cdf(y, &[theta[0], gamma[0]])
    }
    fn sample_wide_with(
        &self,
        theta: &[f64],
        gamma: &[f64],
        n: usize,
        rng: &mut dyn RngCore,
    ) -> Vec<f64> {
        BetaModel.sample_with(&[theta[0], gamma[0]], n, rng)
    }
}

/// Gamma(b, c) inside the generalized gamma with power γ,
/// `f = γ c^{bγ} y^{bγ-1} exp(-(cy)^γ) / Γ(b)`, γ₀ = 1.
///
/// This extension is a stand-in chosen for its closed-form score; nothing
/// singles it out as the natural alternative for a given dataset.
#[derive(Debug, Clone, Default)]
pub struct GammaInGenGamma;

impl WideModel for GammaInGenGamma {
    fn name(&self) -> &str {
        "gamma_in_gengamma"
    }
    fn narrow(&self) -> Arc<dyn ParametricModel> {
        Arc::new(GammaModel)
    }
    fn r(&self) -> usize {
        1
    }
    fn gamma0(&self) -> Vec<f64> {
        vec![1.0]
    }
    fn log_density_wide(&self, y: f64, theta: &[f64], gamma: &[f64]) -> f64 {
        let g = gamma[0];
        if g == 1.0 {
            return GammaModel.log_density(y, theta);
        }
        let (b, c) = (theta[0], theta[1]);
        if y <= 0.0 || b <= 0.0 || c <= 0.0 || g <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let lcy = (c * y).ln();
        g.ln() + b * g * lcy - y.ln() - (g * lcy).exp() - ln_gamma(b)
    }
    fn score_wide(&self, y: f64, theta: &[f64], gamma: &[f64]) -> Vec<f64> {
        let (b, c, g) = (theta[0], theta[1], gamma[0]);
        let lcy = (c * y).ln();
        let pow = (g * lcy).exp();
        vec![
            g * lcy - digamma(b),
            b * g / c - g * pow / c,
            1.0 / g + b * lcy - pow * lcy,
        ]
    }
    fn score_gamma(&self, y: f64, theta: &[f64]) -> Vec<f64> {
        let (b, c) = (theta[0], theta[1]);
        let lcy = (c * y).ln();
        vec![1.0 + b * lcy - c * y * lcy]
    }
    fn gamma_positive(&self) -> Vec<bool> {
        vec![true]
    }
    fn gamma_in_support(&self, gamma: &[f64]) -> bool {
        gamma.len() == 1 && gamma[0] > 0.0 && gamma[0].is_finite()
    }
    fn cdf_wide(&self, y: f64, theta: &[f64], gamma: &[f64]) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        gamma_p(theta[0], (theta[1] * y).powf(gamma[0]))
    }
    fn sample_wide_with(
        &self,
        theta: &[f64],
        gamma: &[f64],
        n: usize,
        rng: &mut dyn RngCore,
    ) -> Vec<f64> {
        let dist = Gamma::new(theta[0], 1.0).expect("valid gamma shape");
        (0..n)
            .map(|_| {
                let x: f64 = dist.sample(rng);
                x.powf(1.0 / gamma[0]) / theta[1]
            })
            .collect()
    }
}

pub const BUILTIN_WIDE_MODELS: [&str; 2] = ["beta_one_in_beta", "gamma_in_gengamma"];

pub fn builtin_wide(name: &str) -> Result<Arc<dyn WideModel>> {
    match name {
        "beta_one_in_beta" => Ok(Arc::new(BetaOneInBeta)),
        "gamma_in_gengamma" => Ok(Arc::new(GammaInGenGamma)),
        other => Err(HybridError::UnsupportedModel(other.to_string())),
    }
}

/// Maps between model coordinates and unconstrained optimizer coordinates.
#[derive(Debug, Clone)]
pub struct Reparam {
    positive: Vec<bool>,
}

impl Reparam {
    pub fn new(positive: Vec<bool>) -> Self {
        Reparam { positive }
    }

    pub fn for_model(model: &dyn ParametricModel) -> Self {
        Reparam::new(model.positive_params())
    }

    pub fn to_free(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.positive)
            .map(|(&t, &pos)| if pos { t.ln() } else { t })
            .collect()
    }

    pub fn from_free(&self, free: &[f64]) -> Vec<f64> {
        free.iter()
            .zip(&self.positive)
            .map(|(&f, &pos)| if pos { f.exp() } else { f })
            .collect()
    }

    /// Chain rule: gradient in θ to gradient in free coordinates.
    pub fn grad_to_free(&self, theta: &[f64], grad: &[f64]) -> Vec<f64> {
        grad.iter()
            .zip(theta)
            .zip(&self.positive)
            .map(|((&g, &t), &pos)| if pos { g * t } else { g })
            .collect()
    }
}
