//! Run configuration: a TOML file whose entries can be overridden by flags.
//!
//! ```toml
//! data = "data/sample.csv"
//! seed = 1
//! output_dir = "out"
//!
//! [model]
//! name = "gamma"
//!
//! [[controls]]
//! kind = "cell"
//! cells = [[9.5, 20.5]]
//!
//! [focus]
//! kind = "cell"
//! lo = 9.5
//! hi = 20.5
//!
//! [balance]
//! policy = "fixed"
//! a = 0.3
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use hybridlik::controls::{cell_control, moment_control, quantile_control, Controls};
use hybridlik::focus::Focus;
use hybridlik::hl::HLProblem;
use hybridlik::models::{builtin_model, builtin_wide, ParametricModel, WideModel};
use serde::{Deserialize, Serialize};

use crate::data::{read_csv, ColumnRef, Dataset};
use crate::{CliError, CliResult};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub column: Option<ColumnSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub threads: Option<usize>,
    pub model: ModelSpec,
    pub wide_model: Option<WideSpec>,
    pub controls: Vec<ControlSpec>,
    pub focus: FocusSpec,
    #[serde(default)]
    pub balance: BalanceSpec,
    #[serde(default)]
    pub method: Method,
    pub confcurve: Option<ConfCurveSpec>,
    pub simulate: Option<SimulateSpec>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(untagged)]
pub enum ColumnSpec {
    Index(usize),
    Name(String),
}

impl ColumnSpec {
    pub fn to_ref(&self) -> ColumnRef {
        match self {
            ColumnSpec::Index(i) => ColumnRef::Index(*i),
            ColumnSpec::Name(s) => ColumnRef::parse(s),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct WideSpec {
    pub name: String,
    /// Null value of the extension parameter; must be stated.
    pub gamma0: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSpec {
    Moment {
        powers: Vec<u32>,
    },
    Quantile {
        levels: Vec<f64>,
    },
    /// Standalone closed cells.
    Cell {
        cells: Vec<[f64; 2]>,
    },
    /// Cells between consecutive breaks, tiling the support.
    Partition {
        breaks: Vec<f64>,
    },
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FocusSpec {
    /// Component of the control parameter.
    Control {
        index: usize,
    },
    Cell {
        lo: f64,
        hi: f64,
    },
    Theta {
        index: usize,
    },
    Moment {
        power: u32,
    },
    Quantile {
        level: f64,
    },
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum BalanceSpec {
    Fixed {
        a: f64,
    },
    /// Largest `a` whose focus standard deviation is within `(1+eps)` of ML.
    EfficiencyCap {
        eps: f64,
        grid: Option<Vec<f64>>,
    },
    /// Minimize the fic risk estimate; needs a wide model.
    Fic {
        grid: Option<Vec<f64>>,
    },
    Grid {
        grid: Vec<f64>,
    },
}

impl Default for BalanceSpec {
    fn default() -> Self {
        BalanceSpec::Fixed { a: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize, PartialEq, Eq, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ml,
    #[default]
    Hl,
    Alt,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Ml => "ml",
            Method::Hl => "hl",
            Method::Alt => "alt",
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConfCurveSpec {
    pub psi_min: Option<f64>,
    pub psi_max: Option<f64>,
    #[serde(default = "default_points")]
    pub points: usize,
}

fn default_points() -> usize {
    41
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    pub n: usize,
    pub reps: usize,
    /// True narrow parameter.
    pub theta: Vec<f64>,
    /// Local departure: data from the wide model at `γ₀ + δ/√n`.
    pub delta: Option<Vec<f64>>,
    pub a_grid: Vec<f64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
}

fn default_methods() -> Vec<Method> {
    vec![Method::Ml, Method::Hl]
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub column: Option<String>,
    pub a: Option<f64>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub method: Option<Method>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::config(format!("invalid configuration: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.data {
            self.data = Some(d.clone());
        }
        if let Some(c) = &o.column {
            self.column = Some(ColumnSpec::Name(c.clone()));
        }
        if let Some(a) = o.a {
            self.balance = BalanceSpec::Fixed { a };
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(t) = o.threads {
            self.threads = Some(t);
        }
        if let Some(m) = o.method {
            self.method = m;
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.controls.is_empty() {
            return Err(CliError::config("at least one control block is required"));
        }
        let grid_ok = |g: &[f64]| !g.is_empty() && g.iter().all(|a| (0.0..1.0).contains(a));
        match &self.balance {
            BalanceSpec::Fixed { a } if !(0.0..1.0).contains(a) => {
                return Err(CliError::config(format!(
                    "balance parameter {a} outside [0, 1)"
                )))
            }
            BalanceSpec::EfficiencyCap { eps, grid } => {
                if !(*eps >= 0.0) {
                    return Err(CliError::config("efficiency slack eps must be nonnegative"));
                }
                if grid.as_deref().is_some_and(|g| !grid_ok(g)) {
                    return Err(CliError::config(
                        "balance grid must be nonempty within [0, 1)",
                    ));
                }
            }
            BalanceSpec::Fic { grid } => {
                if self.wide_model.is_none() {
                    return Err(CliError::config("the fic policy needs a wide_model"));
                }
                if grid.as_deref().is_some_and(|g| !grid_ok(g)) {
                    return Err(CliError::config(
                        "balance grid must be nonempty within [0, 1)",
                    ));
                }
            }
            BalanceSpec::Grid { grid } if !grid_ok(grid) => {
                return Err(CliError::config(
                    "balance grid must be nonempty within [0, 1)",
                ))
            }
            _ => {}
        }
        if let Some(t) = self.threads {
            if t == 0 {
                return Err(CliError::config("threads must be positive"));
            }
        }
        if let Some(d) = &self.data {
            if !d.exists() {
                return Err(CliError::config(format!(
                    "data file {} does not exist",
                    d.display()
                )));
            }
        }
        Ok(())
    }

    pub fn model(&self) -> CliResult<Arc<dyn ParametricModel>> {
        Ok(builtin_model(&self.model.name)?)
    }

    pub fn wide(&self) -> CliResult<Arc<dyn WideModel>> {
        let spec = self
            .wide_model
            .as_ref()
            .ok_or_else(|| CliError::config("this command needs a wide_model section"))?;
        let wm = builtin_wide(&spec.name)?;
        if wm.narrow().name() != self.model.name {
            return Err(CliError::config(format!(
                "wide model {} does not extend {}",
                spec.name, self.model.name
            )));
        }
        if spec.gamma0 != wm.gamma0() {
            return Err(CliError::config(format!(
                "gamma0 {:?} does not match the null value {:?} of {}",
                spec.gamma0,
                wm.gamma0(),
                spec.name
            )));
        }
        Ok(wm)
    }

    pub fn controls(&self, model: &Arc<dyn ParametricModel>) -> CliResult<Controls> {
        let mut out: Option<Controls> = None;
        for spec in &self.controls {
            let block = match spec {
                ControlSpec::Moment { powers } => moment_control(model.clone(), powers)?,
                ControlSpec::Quantile { levels } => quantile_control(model.clone(), levels)?,
                ControlSpec::Cell { cells } => {
                    let cells: Vec<(f64, f64)> = cells.iter().map(|c| (c[0], c[1])).collect();
                    cell_control(model.clone(), &cells, false)?
                }
                ControlSpec::Partition { breaks } => {
                    let cells: Vec<(f64, f64)> = breaks.windows(2).map(|w| (w[0], w[1])).collect();
                    cell_control(model.clone(), &cells, true)?
                }
            };
            out = Some(match out {
                None => block,
                Some(c) => c.concat(block),
            });
        }
        out.ok_or_else(|| CliError::config("at least one control block is required"))
    }

    pub fn focus(&self, controls: &Controls) -> CliResult<Focus> {
        Ok(match &self.focus {
            FocusSpec::Control { index } => Focus::control(controls, *index)?,
            FocusSpec::Cell { lo, hi } => {
                if !(lo < hi) {
                    return Err(CliError::config("focus cell needs lo < hi"));
                }
                Focus::cell_prob(*lo, *hi)
            }
            FocusSpec::Theta { index } => Focus::Theta(*index),
            FocusSpec::Moment { power } => {
                if *power == 0 {
                    return Err(CliError::config("focus moment power must be positive"));
                }
                Focus::moment(*power)
            }
            FocusSpec::Quantile { level } => Focus::quantile(*level)?,
        })
    }

    pub fn dataset(&self) -> CliResult<Dataset> {
        let path = self
            .data
            .as_ref()
            .ok_or_else(|| CliError::config("no data file given (set data or --data)"))?;
        let column = self.column.as_ref().map(ColumnSpec::to_ref);
        read_csv(path, column.as_ref())
    }

    /// Balance parameter for problem construction before any policy runs.
    pub fn initial_a(&self) -> f64 {
        match self.balance {
            BalanceSpec::Fixed { a } => a,
            _ => 0.0,
        }
    }

    /// Problem on the configured data.
    pub fn problem(&self) -> CliResult<(HLProblem, Controls, Dataset)> {
        let model = self.model()?;
        let controls = self.controls(&model)?;
        let focus = self.focus(&controls)?;
        let data = self.dataset()?;
        let prob = HLProblem::new(
            model,
            Arc::new(controls.clone()),
            data.values.clone(),
            self.initial_a(),
            focus,
        )?;
        Ok((prob, controls, data))
    }
}
