//! Minimizers used by the estimators: a Nelder–Mead simplex search for the
//! hybrid objectives and BFGS for smooth parametric log-likelihoods.
//!
//! Both minimize; callers negate to maximize. Non-finite objective values are
//! treated as `+∞`, so infeasible vertices are simply rejected.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    /// Initial simplex edge along each coordinate.
    pub initial_step: Vec<f64>,
    pub ftol_abs: f64,
    pub ftol_rel: f64,
    pub xtol: f64,
    pub max_evals: usize,
    /// Fresh simplex restarts from the incumbent after convergence.
    pub restarts: usize,
}

impl NelderMeadOptions {
    pub fn new(dim: usize) -> Self {
        NelderMeadOptions {
            initial_step: vec![0.1; dim],
            ftol_abs: 1e-11,
            ftol_rel: 1e-13,
            xtol: 1e-9,
            max_evals: 4000 * dim.max(1),
            restarts: 2,
        }
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.initial_step.iter_mut().for_each(|s| *s = step);
        self
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

fn clean(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Nelder–Mead minimization started from `x0`.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], opts: &NelderMeadOptions) -> Minimum {
    let mut best = Minimum {
        x: x0.to_vec(),
        value: clean(f(x0)),
        evals: 1,
        converged: false,
    };
    for _round in 0..=opts.restarts {
        let run = nelder_mead_once(&f, &best.x, opts, opts.max_evals.saturating_sub(best.evals));
        let improved = best.value - run.value;
        let evals = best.evals + run.evals;
        let tol = opts.ftol_abs + opts.ftol_rel * run.value.abs();
        if run.value <= best.value {
            best = Minimum { evals, ..run };
        } else {
            best.evals = evals;
        }
        if !(improved > tol) || best.evals >= opts.max_evals {
            break;
        }
    }
    best
}

fn nelder_mead_once<F: Fn(&[f64]) -> f64>(
    f: &F,
    x0: &[f64],
    opts: &NelderMeadOptions,
    budget: usize,
) -> Minimum {
    let dim = x0.len();
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut evals = 0usize;
    let eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        clean(f(x))
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let v0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), v0));
    for i in 0..dim {
        let mut x = x0.to_vec();
        let step = opts.initial_step.get(i).copied().unwrap_or(0.1);
        x[i] += step;
        let mut v = eval(&x, &mut evals);
        if !v.is_finite() {
            x[i] = x0[i] - step;
            v = eval(&x, &mut evals);
        }
        simplex.push((x, v));
    }

    let mut converged = false;
    while evals < budget {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let f_best = simplex[0].1;
        let f_worst = simplex[dim].1;
        let spread = simplex
            .iter()
            .skip(1)
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0f64, f64::max);
        if f_best.is_finite()
            && f_worst.is_finite()
            && (f_worst - f_best).abs() <= opts.ftol_abs + opts.ftol_rel * f_best.abs()
            && spread <= opts.xtol
        {
            converged = true;
            break;
        }
        if dim == 0 {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; dim];
        for (x, _) in simplex.iter().take(dim) {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / dim as f64;
            }
        }
        let worst = simplex[dim].0.clone();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = along(alpha);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(gamma);
            let fe = eval(&xe, &mut evals);
            simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[dim - 1].1 {
            simplex[dim] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < f_worst {
            let xc = along(rho);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(-rho);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < f_worst.min(fr) {
            simplex[dim] = (xc, fc);
            continue;
        }
        let anchor = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = anchor
                .iter()
                .zip(&vertex.0)
                .map(|(a, v)| a + sigma * (v - a))
                .collect();
            let v = eval(&x, &mut evals);
            *vertex = (x, v);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Minimum {
        x,
        value,
        evals,
        converged,
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    /// Stop when `‖g‖∞ ≤ gtol · max(1, |f|)`.
    pub gtol: f64,
    pub max_iter: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            gtol: 1e-10,
            max_iter: 500,
        }
    }
}

/// BFGS with a backtracking Armijo line search. `fg` returns value and gradient.
pub fn bfgs<F>(fg: F, x0: &[f64], opts: &BfgsOptions) -> Minimum
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let dim = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, g0) = fg(x.as_slice());
    let mut evals = 1;
    if !fx.is_finite() || g0.iter().any(|v| !v.is_finite()) {
        return Minimum {
            x: x0.to_vec(),
            value: clean(fx),
            evals,
            converged: false,
        };
    }
    let mut g = DVector::from_vec(g0);
    let mut h = DMatrix::<f64>::identity(dim, dim);
    // Scale the first step so it is at most unit length.
    let g_norm = g.norm();
    if g_norm > 1.0 {
        h /= g_norm;
    }
    let mut converged = false;
    for _ in 0..opts.max_iter {
        if g.amax() <= opts.gtol * fx.abs().max(1.0) {
            converged = true;
            break;
        }
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            h = DMatrix::identity(dim, dim);
            dir = -g.clone();
            slope = g.dot(&dir);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &x + &dir * step;
            let (ft, gt) = fg(trial.as_slice());
            evals += 1;
            if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft <= fx + 1e-4 * step * slope
            {
                accepted = Some((trial, ft, DVector::from_vec(gt)));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            // No descent possible along the direction: treat as stationary
            // when the gradient is already small relative to the objective.
            converged = g.amax() <= 1e-6 * fx.abs().max(1.0);
            break;
        };
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        let f_change = (fx - f_new).abs();
        x = x_new;
        fx = f_new;
        g = g_new;
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let id = DMatrix::<f64>::identity(dim, dim);
            let left = &id - &s * y.transpose() * rho;
            let right = &id - &y * s.transpose() * rho;
            h = &left * &h * &right + &s * s.transpose() * rho;
        }
        if s.amax() < 1e-15 * x.amax().max(1.0) && f_change == 0.0 {
            converged = g.amax() <= 1e-6 * fx.abs().max(1.0);
            break;
        }
    }
    Minimum {
        x: x.as_slice().to_vec(),
        value: fx,
        evals,
        converged,
    }
}
