//! The batch commands. Each writes its files into the configured output
//! directory and returns their paths.

use std::path::PathBuf;
use std::sync::Arc;

use hybridlik::alt_hl::maximize_alt;
use hybridlik::asymptotics::{select_a_efficiency, BlocksSummary};
use hybridlik::controls::ControlSet;
use hybridlik::el::{solve_el, ElStatus};
use hybridlik::focused::{default_a_grid, fic_curve, gof_test, FocusedCurves, GofVerdict};
use hybridlik::hl::{
    confidence_point, deviance_scale, maximize_hl, HLProblem, MlFit, OptimizerTrace,
};
use hybridlik::linalg::sym_inverse;
use hybridlik::models::empirical_fisher;
use hybridlik::HybridError;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{BalanceSpec, Method, RunConfig};
use crate::data::Dataset;
use crate::output::{write_csv, write_json, FIT_SCHEMA_VERSION};
use crate::simulate::{run_simulation, summarize, SimulationPlan, REPLICATION_HEADERS};
use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Fit,
    Scan,
    ConfCurve,
    Fic,
    Gof,
    Simulate,
    /// Empirical likelihood at θ (the ML fit when absent).
    El {
        theta: Option<Vec<f64>>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Scan => "scan",
            Command::ConfCurve => "confcurve",
            Command::Fic => "fic",
            Command::Gof => "gof",
            Command::Simulate => "simulate",
            Command::El { .. } => "el",
        }
    }
}

/// Runs `cmd` inside a worker pool of the configured size.
pub fn run(cmd: &Command, cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    cfg.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cfg.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cmd {
        Command::Fit => cmd_fit(cfg),
        Command::Scan => cmd_scan(cfg),
        Command::ConfCurve => cmd_confcurve(cfg),
        Command::Fic => cmd_fic(cfg),
        Command::Gof => cmd_gof(cfg),
        Command::Simulate => cmd_simulate(cfg),
        Command::El { theta } => cmd_el(cfg, theta.as_deref()),
    })
}

#[derive(Debug, Serialize)]
struct DataInfo {
    path: String,
    column: String,
    n: usize,
    sha256: String,
}

fn data_info(cfg: &RunConfig, data: &Dataset) -> DataInfo {
    DataInfo {
        path: cfg
            .data
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default(),
        column: data.column.clone(),
        n: data.values.len(),
        sha256: data.sha256.clone(),
    }
}

#[derive(Debug, Serialize)]
struct MlJson {
    theta: Vec<f64>,
    loglik: f64,
    se_theta: Vec<f64>,
    converged: bool,
}

fn ml_json(prob: &HLProblem, ml: &MlFit) -> MlJson {
    let n = prob.n() as f64;
    let se_theta = empirical_fisher(prob.model.as_ref(), &prob.data, &ml.theta)
        .and_then(|j| sym_inverse(&j, "J"))
        .map(|inv| (0..inv.nrows()).map(|i| (inv[(i, i)] / n).sqrt()).collect())
        .unwrap_or_default();
    MlJson {
        theta: ml.theta.clone(),
        loglik: ml.loglik,
        se_theta,
        converged: ml.converged,
    }
}

#[derive(Debug, Clone, Serialize)]
struct PolicyJson {
    policy: &'static str,
    a: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
}

#[derive(Debug, Serialize)]
struct FitJson {
    schema_version: u32,
    command: &'static str,
    method: &'static str,
    model: String,
    param_names: Vec<String>,
    controls: Vec<String>,
    focus: String,
    data: DataInfo,
    balance: PolicyJson,
    theta_hat: Vec<f64>,
    se_theta: Vec<f64>,
    /// `h_n` at the maximum, or `N_n` for the alternative estimator.
    objective_max: f64,
    psi_hat: f64,
    se_psi: f64,
    kappa: f64,
    ml: MlJson,
    blocks: BlocksSummary,
    optimizer: OptimizerTrace,
    #[serde(skip_serializing_if = "Option::is_none")]
    divergence_estimate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'static str>,
}

#[derive(Debug, Serialize)]
struct KappaRow {
    a: f64,
    kappa: f64,
    ratio: f64,
}

/// Balance parameter chosen by the policy, plus any curve file written.
fn resolve_a(cfg: &RunConfig, prob: &HLProblem) -> CliResult<(PolicyJson, Vec<PathBuf>)> {
    match &cfg.balance {
        BalanceSpec::Fixed { a } => Ok((
            PolicyJson {
                policy: "fixed",
                a: *a,
                eps: None,
            },
            Vec::new(),
        )),
        BalanceSpec::EfficiencyCap { eps, grid } => {
            let grid = grid.clone().unwrap_or_else(default_a_grid);
            let sel = select_a_efficiency(prob, *eps, &grid)?;
            let rows: Vec<KappaRow> = sel
                .curve
                .iter()
                .map(|&(a, kappa, ratio)| KappaRow { a, kappa, ratio })
                .collect();
            let path = write_csv(
                &cfg.output_dir,
                "curve_kappa.csv",
                &["a", "kappa", "ratio"],
                &rows,
            )?;
            Ok((
                PolicyJson {
                    policy: "efficiency_cap",
                    a: sel.a,
                    eps: Some(*eps),
                },
                vec![path],
            ))
        }
        BalanceSpec::Fic { grid } => {
            let grid = grid.clone().unwrap_or_else(default_a_grid);
            let curves = fic_curve(prob, cfg.wide()?.as_ref(), &grid)?;
            Ok((
                PolicyJson {
                    policy: "fic",
                    a: curves.a_star,
                    eps: None,
                },
                Vec::new(),
            ))
        }
        BalanceSpec::Grid { .. } => Err(CliError::config(
            "the grid policy belongs to the scan command",
        )),
    }
}

pub fn cmd_fit(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let (prob, controls, data) = cfg.problem()?;
    let (mut policy, mut files) = resolve_a(cfg, &prob)?;
    if cfg.method == Method::Ml {
        policy.a = 0.0;
    }
    let prob = prob.with_a(policy.a)?;
    let n = prob.n() as f64;
    let se = |m: &nalgebra::DMatrix<f64>| {
        (0..m.nrows())
            .map(|i| (m[(i, i)] / n).sqrt())
            .collect::<Vec<f64>>()
    };
    let hl = maximize_hl(&prob, None)?;
    let common = |theta_hat,
                  se_theta,
                  objective_max,
                  psi_hat,
                  se_psi,
                  kappa,
                  blocks: BlocksSummary,
                  optimizer| FitJson {
        schema_version: FIT_SCHEMA_VERSION,
        command: "fit",
        method: cfg.method.label(),
        model: prob.model.name().to_string(),
        param_names: prob.model.param_names(),
        controls: controls.labels(),
        focus: prob.focus.label(),
        data: data_info(cfg, &data),
        balance: policy.clone(),
        theta_hat,
        se_theta,
        objective_max,
        psi_hat,
        se_psi,
        kappa,
        ml: ml_json(&prob, &hl.ml),
        blocks,
        optimizer,
        divergence_estimate: None,
        note: None,
    };
    let json = match cfg.method {
        Method::Ml | Method::Hl => common(
            hl.theta_hat.clone(),
            se(&hl.cov_sandwich),
            hl.h_max,
            hl.psi_hat,
            hl.se_psi,
            hl.kappa,
            hl.blocks.summary(),
            hl.trace.clone(),
        ),
        Method::Alt => {
            let alt = maximize_alt(&prob)?;
            let mut j = common(
                alt.theta_tilde.clone(),
                se(&alt.blocks.sandwich),
                alt.n_max,
                alt.psi_tilde,
                alt.se_psi,
                alt.kappa,
                alt.blocks.summary(),
                alt.trace.clone(),
            );
            j.divergence_estimate = Some(alt.divergence_estimate);
            j.note = Some("standard errors by first-order equivalence only");
            j
        }
    };
    files.push(write_json(&cfg.output_dir, "fit.json", &json)?);
    Ok(files)
}

#[derive(Debug, Serialize)]
struct ScanRow {
    a: f64,
    psi_hat: Option<f64>,
    kappa: Option<f64>,
    se_psi: Option<f64>,
    status: String,
}

pub fn cmd_scan(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let (prob, _, _) = cfg.problem()?;
    let grid = match &cfg.balance {
        BalanceSpec::Grid { grid } => grid.clone(),
        BalanceSpec::EfficiencyCap { grid: Some(g), .. } | BalanceSpec::Fic { grid: Some(g) } => {
            g.clone()
        }
        BalanceSpec::Fixed { a } => vec![*a],
        _ => default_a_grid(),
    };
    let rows: Vec<ScanRow> = grid
        .par_iter()
        .map(|&a| {
            let fit = prob.with_a(a).and_then(|p| maximize_hl(&p, None));
            match fit {
                Ok(f) => ScanRow {
                    a,
                    psi_hat: Some(f.psi_hat),
                    kappa: Some(f.kappa),
                    se_psi: Some(f.se_psi),
                    status: "ok".into(),
                },
                Err(e) => ScanRow {
                    a,
                    psi_hat: None,
                    kappa: None,
                    se_psi: None,
                    status: e.to_string(),
                },
            }
        })
        .collect();
    Ok(vec![write_csv(
        &cfg.output_dir,
        "curve_phat.csv",
        &["a", "psi_hat", "kappa", "se_psi", "status"],
        &rows,
    )?])
}

#[derive(Debug, Serialize)]
struct CcRow {
    psi: f64,
    deviance: Option<f64>,
    cc: Option<f64>,
    status: String,
}

pub fn cmd_confcurve(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let (prob, _, _) = cfg.problem()?;
    let (policy, mut files) = resolve_a(cfg, &prob)?;
    let prob = prob.with_a(policy.a)?;
    let fit = maximize_hl(&prob, None)?;
    let k_hat = deviance_scale(&fit.blocks, &fit.c)?;
    let spec = cfg
        .confcurve
        .clone()
        .unwrap_or(crate::config::ConfCurveSpec {
            psi_min: None,
            psi_max: None,
            points: 41,
        });
    let lo = spec.psi_min.unwrap_or(fit.psi_hat - 4.0 * fit.se_psi);
    let hi = spec.psi_max.unwrap_or(fit.psi_hat + 4.0 * fit.se_psi);
    if !(lo < hi) || spec.points < 2 {
        return Err(CliError::Core(HybridError::InvalidGrid(format!(
            "focus range [{lo}, {hi}] with {} points",
            spec.points
        ))));
    }
    let mut grid: Vec<f64> = (0..spec.points)
        .map(|k| lo + (hi - lo) * k as f64 / (spec.points - 1) as f64)
        .collect();
    grid.push(fit.psi_hat);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let rows: Vec<CcRow> = grid
        .par_iter()
        .map(|&psi| match confidence_point(&prob, &fit, k_hat, psi) {
            Ok(p) => CcRow {
                psi,
                deviance: Some(p.deviance),
                cc: Some(p.cc),
                status: "ok".into(),
            },
            Err(e) => CcRow {
                psi,
                deviance: None,
                cc: None,
                status: e.to_string(),
            },
        })
        .collect();
    files.push(write_csv(
        &cfg.output_dir,
        "confcurve.csv",
        &["psi", "deviance", "cc", "status"],
        &rows,
    )?);
    Ok(files)
}

#[derive(Debug, Serialize)]
struct FicCsvRow {
    a: f64,
    fic: f64,
    bias2: f64,
    tau2: f64,
}

#[derive(Debug, Serialize)]
struct FicJson<'a> {
    wide_model: String,
    focus: String,
    a_star: f64,
    curves: &'a FocusedCurves,
}

pub fn cmd_fic(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let wm = cfg.wide()?;
    let (prob, _, _) = cfg.problem()?;
    let grid = match &cfg.balance {
        BalanceSpec::Fic { grid: Some(g) }
        | BalanceSpec::Grid { grid: g }
        | BalanceSpec::EfficiencyCap { grid: Some(g), .. } => g.clone(),
        _ => default_a_grid(),
    };
    let curves = fic_curve(&prob, wm.as_ref(), &grid)?;
    let rows: Vec<FicCsvRow> = curves
        .rows
        .iter()
        .map(|r| FicCsvRow {
            a: r.a,
            fic: r.fic,
            bias2: r.bias2,
            tau2: r.tau2,
        })
        .collect();
    let csv = write_csv(
        &cfg.output_dir,
        "fic.csv",
        &["a", "fic", "bias2", "tau2"],
        &rows,
    )?;
    let json = write_json(
        &cfg.output_dir,
        "fic.json",
        &FicJson {
            wide_model: wm.name().to_string(),
            focus: prob.focus.label(),
            a_star: curves.a_star,
            curves: &curves,
        },
    )?;
    Ok(vec![csv, json])
}

#[derive(Debug, Serialize)]
struct GofJson {
    wide_model: String,
    focus: String,
    #[serde(flatten)]
    verdict: GofVerdict,
}

pub fn cmd_gof(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let wm = cfg.wide()?;
    let (prob, _, _) = cfg.problem()?;
    let verdict = gof_test(&prob, wm.as_ref())?;
    Ok(vec![write_json(
        &cfg.output_dir,
        "gof.json",
        &GofJson {
            wide_model: wm.name().to_string(),
            focus: prob.focus.label(),
            verdict,
        },
    )?])
}

pub fn simulation_plan(cfg: &RunConfig) -> CliResult<SimulationPlan> {
    let spec = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| CliError::config("the simulate command needs a simulate section"))?;
    let model = cfg.model()?;
    let controls = cfg.controls(&model)?;
    let focus = cfg.focus(&controls)?;
    let wide = match (&cfg.wide_model, &spec.delta) {
        (Some(_), _) => Some(cfg.wide()?),
        (None, Some(_)) => {
            return Err(CliError::config(
                "simulate.delta needs a wide_model section",
            ))
        }
        (None, None) => None,
    };
    Ok(SimulationPlan {
        model,
        wide,
        controls: Arc::new(controls),
        focus,
        n: spec.n,
        reps: spec.reps,
        theta: spec.theta.clone(),
        delta: spec.delta.clone(),
        a_grid: spec.a_grid.clone(),
        methods: spec.methods.clone(),
        seed: cfg.seed,
    })
}

pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let plan = simulation_plan(cfg)?;
    let rows = run_simulation(&plan)?;
    let table = write_csv(
        &cfg.output_dir,
        "replications.csv",
        &REPLICATION_HEADERS,
        &rows,
    )?;
    let summary = write_csv(
        &cfg.output_dir,
        "summary.csv",
        &[
            "method",
            "a",
            "ok",
            "failed",
            "mean_error",
            "sd",
            "rmse",
            "root_n_rmse",
        ],
        &summarize(&rows, plan.n),
    )?;
    Ok(vec![table, summary])
}

#[derive(Debug, Serialize)]
struct ElJson {
    theta: Vec<f64>,
    mu: Vec<f64>,
    controls: Vec<String>,
    log_ratio: f64,
    minus_two_log_ratio: f64,
    lambda: Vec<f64>,
    status: ElStatus,
    iterations: usize,
    min_weight: f64,
    max_weight: f64,
}

pub fn cmd_el(cfg: &RunConfig, theta: Option<&[f64]>) -> CliResult<Vec<PathBuf>> {
    let (prob, controls, _) = cfg.problem()?;
    let model = prob.model.as_ref();
    let theta = match theta {
        Some(t) => {
            if t.len() != model.dim() || !model.in_support(t) {
                return Err(CliError::config("--theta outside the parameter space"));
            }
            t.to_vec()
        }
        None => hybridlik::hl::ml_fit(model, &prob.data)?.theta,
    };
    let mu = controls.mu_of_theta(&theta)?;
    let m = hybridlik::controls::sample_constraint_matrix(&controls, &prob.data, &mu)?;
    let sol = solve_el(&m)?;
    let (min_weight, max_weight) = sol
        .weights
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| {
            (lo.min(w), hi.max(w))
        });
    Ok(vec![write_json(
        &cfg.output_dir,
        "el.json",
        &ElJson {
            theta,
            mu,
            controls: controls.labels(),
            log_ratio: sol.log_ratio,
            minus_two_log_ratio: -2.0 * sol.log_ratio,
            lambda: sol.lambda.as_slice().to_vec(),
            status: sol.status,
            iterations: sol.iterations,
            min_weight,
            max_weight,
        },
    )?])
}
