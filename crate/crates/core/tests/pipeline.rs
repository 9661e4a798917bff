use std::sync::Arc;

use hybridlik::alt_hl::maximize_alt;
use hybridlik::asymptotics::select_a_efficiency;
use hybridlik::controls::{cell_control, moment_control};
use hybridlik::focus::Focus;
use hybridlik::focused::{default_a_grid, fic_curve, gof_test};
use hybridlik::hl::{confidence_curve, maximize_hl, HLProblem};
use hybridlik::models::{builtin_model, builtin_wide, ParametricModel};
use hybridlik::HybridError;

fn beta_one_problem(a: f64, seed: u64) -> HLProblem {
    let wide = builtin_wide("beta_one_in_beta").unwrap();
    let model = builtin_model("beta_one").unwrap();
    let y = wide.sample_wide(&[2.0], &[1.15], 250, seed);
    let controls = moment_control(model.clone(), &[2]).unwrap();
    HLProblem::new(model, Arc::new(controls), y, a, Focus::moment(2)).unwrap()
}

#[test]
fn fit_scan_and_confidence_curve() {
    let prob = beta_one_problem(0.4, 11);
    let fit = maximize_hl(&prob, None).unwrap();
    assert!(fit.trace.converged);
    assert!(fit.se_psi > 0.0 && fit.kappa > 0.0);
    let ml = maximize_hl(&prob.with_a(0.0).unwrap(), None).unwrap();
    let empirical = prob.data.iter().map(|y| y * y).sum::<f64>() / prob.n() as f64;
    // The hybrid estimate of E Y² sits between the model and the data answers.
    let (lo, hi) = if ml.psi_hat < empirical {
        (ml.psi_hat, empirical)
    } else {
        (empirical, ml.psi_hat)
    };
    assert!(fit.psi_hat >= lo - 1e-6 && fit.psi_hat <= hi + 1e-6);

    let grid: Vec<f64> = (-4..=4)
        .map(|k| fit.psi_hat + k as f64 * fit.se_psi)
        .collect();
    let cc = confidence_curve(&prob, &fit, &grid).unwrap();
    assert!(cc.k_hat > 0.0);
    for p in &cc.points {
        assert!((0.0..=1.0).contains(&p.cc) && p.deviance >= -1e-9);
    }
    assert!(cc.points[4].cc < 1e-6);
    assert!(cc.points[0].cc > 0.9 && cc.points[8].cc > 0.9);
}

#[test]
fn focused_selection_and_gof() {
    let prob = beta_one_problem(0.0, 12);
    let wide = builtin_wide("beta_one_in_beta").unwrap();
    let grid = default_a_grid();
    let curves = fic_curve(&prob, wide.as_ref(), &grid).unwrap();
    assert_eq!(curves.rows.len(), grid.len());
    assert!(grid.contains(&curves.a_star));
    let best = curves
        .rows
        .iter()
        .map(|r| r.fic)
        .fold(f64::INFINITY, f64::min);
    let at_star = curves.rows.iter().find(|r| r.a == curves.a_star).unwrap();
    assert_eq!(at_star.fic, best);

    let verdict = gof_test(&prob, wide.as_ref()).unwrap();
    assert!(verdict.statistic >= 0.0);
    assert_eq!(verdict.reject, verdict.statistic > verdict.threshold);
}

#[test]
fn efficiency_cap_respected() {
    let prob = beta_one_problem(0.0, 13);
    let grid: Vec<f64> = (0..95).map(|k| k as f64 / 100.0).collect();
    let sel = select_a_efficiency(&prob, 0.1, &grid).unwrap();
    let cap = 1.1 * sel.kappa0;
    for &(a, kappa, _) in &sel.curve {
        if a <= sel.a {
            assert!(kappa <= cap + 1e-9, "a = {a}: kappa {kappa} above {cap}");
        }
    }
}

#[test]
fn alternative_hybrid_fits_gamma() {
    let model: Arc<dyn ParametricModel> = builtin_model("gamma").unwrap();
    let y = model.sample(&[2.0, 1.0], 300, 3);
    let controls = cell_control(model.clone(), &[(1.0, 3.0)], false).unwrap();
    let prob = HLProblem::new(
        model,
        Arc::new(controls),
        y,
        0.5,
        Focus::cell_prob(1.0, 3.0),
    )
    .unwrap();
    let alt = maximize_alt(&prob).unwrap();
    let hl = maximize_hl(&prob, None).unwrap();
    assert!(alt.divergence_estimate.is_finite());
    // Both estimators are first-order equivalent; on a correct model they agree closely.
    assert!((alt.psi_tilde - hl.psi_hat).abs() < 3.0 * hl.se_psi);
}

#[test]
fn errors_are_typed() {
    let model = builtin_model("gamma").unwrap();
    let controls = moment_control(model.clone(), &[1]).unwrap();
    let err = HLProblem::new(
        model.clone(),
        Arc::new(controls.clone()),
        vec![],
        0.3,
        Focus::moment(1),
    )
    .unwrap_err();
    assert!(matches!(err, HybridError::InvalidInput(_)));
    assert!(HLProblem::new(
        model.clone(),
        Arc::new(controls.clone()),
        vec![1.0, -1.0],
        0.3,
        Focus::moment(1)
    )
    .is_err());
    assert!(HLProblem::new(
        model,
        Arc::new(controls),
        vec![1.0, 2.0],
        1.0,
        Focus::moment(1)
    )
    .is_err());
}
