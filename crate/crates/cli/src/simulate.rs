//! Seeded replications of ML, hybrid and alternative hybrid estimators.

use std::sync::Arc;

use hybridlik::alt_hl::alt_argmax;
use hybridlik::controls::Controls;
use hybridlik::focus::Focus;
use hybridlik::hl::{maximize_hl, ml_fit, HLProblem};
use hybridlik::linalg::{quad_form, sym_inverse};
use hybridlik::models::{empirical_fisher, ParametricModel, WideModel};
use hybridlik::{HybridError, Result};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Method;

/// Golden-ratio increment used to decorrelate replicate seeds.
const SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn replicate_seed(seed: u64, rep: usize) -> u64 {
    seed ^ (rep as u64).wrapping_mul(SEED_STRIDE)
}

#[derive(Debug, Clone)]
pub struct SimulationPlan {
    pub model: Arc<dyn ParametricModel>,
    pub wide: Option<Arc<dyn WideModel>>,
    pub controls: Arc<Controls>,
    pub focus: Focus,
    pub n: usize,
    pub reps: usize,
    pub theta: Vec<f64>,
    pub delta: Option<Vec<f64>>,
    pub a_grid: Vec<f64>,
    pub methods: Vec<Method>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ReplicationRow {
    pub rep: usize,
    pub seed: u64,
    pub method: &'static str,
    pub a: f64,
    pub psi_true: f64,
    pub psi_hat: Option<f64>,
    pub error: Option<f64>,
    pub se: Option<f64>,
    pub status: String,
}

pub const REPLICATION_HEADERS: [&str; 9] = [
    "rep", "seed", "method", "a", "psi_true", "psi_hat", "error", "se", "status",
];

impl SimulationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.reps == 0 {
            return Err(HybridError::InvalidInput(
                "n and reps must be positive".into(),
            ));
        }
        if self.theta.len() != self.model.dim() || !self.model.in_support(&self.theta) {
            return Err(HybridError::InvalidInput(
                "true theta outside the parameter space".into(),
            ));
        }
        if self.methods.is_empty() {
            return Err(HybridError::InvalidInput("no estimators requested".into()));
        }
        if self.methods.iter().any(|m| *m != Method::Ml) {
            if self.a_grid.is_empty() {
                return Err(HybridError::InvalidGrid(
                    "empty grid of balance parameters".into(),
                ));
            }
            if let Some(a) = self.a_grid.iter().find(|a| !(0.0..1.0).contains(*a)) {
                return Err(HybridError::InvalidGrid(format!(
                    "balance parameter {a} outside [0, 1)"
                )));
            }
        }
        if let Some(delta) = &self.delta {
            let wide = self.wide.as_ref().ok_or_else(|| {
                HybridError::InvalidInput("a local departure needs a wide model".into())
            })?;
            if delta.len() != wide.r() {
                return Err(HybridError::InvalidInput(format!(
                    "delta needs {} entries",
                    wide.r()
                )));
            }
            if !wide.gamma_in_support(&self.gamma()) {
                return Err(HybridError::InvalidInput(
                    "gamma0 + delta/sqrt(n) outside the wide model".into(),
                ));
            }
        }
        Ok(())
    }

    /// Extension parameter of the data-generating model.
    pub fn gamma(&self) -> Vec<f64> {
        match (&self.wide, &self.delta) {
            (Some(w), Some(d)) => {
                let root_n = (self.n as f64).sqrt();
                w.gamma0()
                    .iter()
                    .zip(d)
                    .map(|(g, d)| g + d / root_n)
                    .collect()
            }
            (Some(w), None) => w.gamma0(),
            _ => Vec::new(),
        }
    }

    pub fn psi_true(&self) -> Result<f64> {
        match (&self.wide, &self.delta) {
            (Some(w), Some(_)) => self
                .focus
                .wide_value(w.as_ref(), &self.theta, &self.gamma()),
            _ => self.focus.value(self.model.as_ref(), &self.theta),
        }
    }

    pub fn sample(&self, seed: u64) -> Vec<f64> {
        match (&self.wide, &self.delta) {
            (Some(w), Some(_)) => w.sample_wide(&self.theta, &self.gamma(), self.n, seed),
            _ => self.model.sample(&self.theta, self.n, seed),
        }
    }
}

fn ml_estimate(prob: &HLProblem) -> Result<(f64, f64)> {
    let model = prob.model.as_ref();
    let ml = ml_fit(model, &prob.data)?;
    let psi = prob.focus.value(model, &ml.theta)?;
    let c = DVector::from_vec(prob.focus.gradient(model, &ml.theta)?);
    let j_inv = sym_inverse(&empirical_fisher(model, &prob.data, &ml.theta)?, "J")?;
    Ok((psi, (quad_form(&j_inv, &c) / prob.n() as f64).sqrt()))
}

fn alt_estimate(prob: &HLProblem) -> Result<(f64, Option<f64>)> {
    let (theta, _, _) = alt_argmax(prob)?;
    Ok((prob.focus.value(prob.model.as_ref(), &theta)?, None))
}

/// All estimator rows for replicate `rep`.
pub fn run_replicate(plan: &SimulationPlan, psi_true: f64, rep: usize) -> Vec<ReplicationRow> {
    let seed = replicate_seed(plan.seed, rep);
    let data = plan.sample(seed);
    let base = HLProblem::new(
        plan.model.clone(),
        plan.controls.clone(),
        data,
        0.0,
        plan.focus.clone(),
    );
    let mut rows = Vec::new();
    let mut push = |method: Method, a: f64, out: Result<(f64, Option<f64>)>| {
        let (psi_hat, se, status) = match out {
            Ok((p, s)) => (Some(p), s, "ok".to_string()),
            Err(e) => (None, None, e.to_string()),
        };
        rows.push(ReplicationRow {
            rep,
            seed,
            method: method.label(),
            a,
            psi_true,
            psi_hat,
            error: psi_hat.map(|p| p - psi_true),
            se,
            status,
        });
    };
    for &method in &plan.methods {
        let grid: &[f64] = if method == Method::Ml {
            &[0.0]
        } else {
            &plan.a_grid
        };
        for &a in grid {
            let out = base
                .clone()
                .and_then(|p| p.with_a(a))
                .and_then(|prob| match method {
                    Method::Ml => ml_estimate(&prob).map(|(p, s)| (p, Some(s))),
                    Method::Hl => maximize_hl(&prob, None).map(|f| (f.psi_hat, Some(f.se_psi))),
                    Method::Alt => alt_estimate(&prob),
                });
            push(method, a, out);
        }
    }
    rows
}

/// Replications in the current thread pool; rows come back in replicate order.
pub fn run_simulation(plan: &SimulationPlan) -> Result<Vec<ReplicationRow>> {
    plan.validate()?;
    let psi_true = plan.psi_true()?;
    let per_rep: Vec<Vec<ReplicationRow>> = (0..plan.reps)
        .into_par_iter()
        .map(|rep| run_replicate(plan, psi_true, rep))
        .collect();
    Ok(per_rep.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SummaryRow {
    pub method: &'static str,
    pub a: f64,
    pub ok: usize,
    pub failed: usize,
    pub mean_error: f64,
    pub sd: f64,
    pub rmse: f64,
    /// `√n · rmse`, comparable with the limit root-mse.
    pub root_n_rmse: f64,
}

pub fn summarize(rows: &[ReplicationRow], n: usize) -> Vec<SummaryRow> {
    let mut keys: Vec<(&'static str, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|k| k.0 == r.method && k.1 == r.a) {
            keys.push((r.method, r.a));
        }
    }
    keys.into_iter()
        .map(|(method, a)| {
            let group: Vec<&ReplicationRow> = rows
                .iter()
                .filter(|r| r.method == method && r.a == a)
                .collect();
            let errors: Vec<f64> = group.iter().filter_map(|r| r.error).collect();
            let k = errors.len() as f64;
            let mean = errors.iter().sum::<f64>() / k;
            let sd = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
            let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / k).sqrt();
            SummaryRow {
                method,
                a,
                ok: errors.len(),
                failed: group.len() - errors.len(),
                mean_error: mean,
                sd,
                rmse,
                root_n_rmse: (n as f64).sqrt() * rmse,
            }
        })
        .collect()
}
