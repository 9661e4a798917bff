use std::sync::Arc;

use hybridlik::asymptotics::{kappa_a, AsymptoticBlocks, RawBlocks};
use hybridlik::controls::{moment_control, ControlSet};
use hybridlik::el::{solve_el, ElStatus};
use hybridlik::focus::Focus;
use hybridlik::hl::{hl_loglik, loglik, HLProblem};
use hybridlik::linalg::{frobenius, min_eigenvalue, sym_inverse};
use hybridlik::models::{NormalModel, ParametricModel};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn spd(dim: usize, entries: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_column_slice(dim, dim, &entries[..dim * dim]);
    &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1
}

fn raw_from(p: usize, q: usize, entries: &[f64], xi: &[f64]) -> RawBlocks {
    let s = spd(p + q, entries);
    RawBlocks {
        j: s.view((0, 0), (p, p)).into_owned(),
        w: s.view((p, p), (q, q)).into_owned(),
        c: s.view((0, p), (p, q)).into_owned(),
        xi0: DMatrix::from_column_slice(q, p, &xi[..p * q]),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn el_ratio_bounded_and_weights_normalized(y in prop::collection::vec(-3.0f64..3.0, 5..40), shift in -0.5f64..0.5) {
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let m: Vec<f64> = y.iter().map(|v| v - mean - shift).collect();
        let sol = solve_el(&DMatrix::from_column_slice(m.len(), 1, &m)).unwrap();
        prop_assert!(sol.log_ratio <= 1e-12);
        if sol.status == ElStatus::Converged {
            let total: f64 = sol.weights.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-8);
            prop_assert!(sol.weights.iter().all(|w| *w > 0.0));
            let moment: f64 = sol.weights.iter().zip(&m).map(|(w, v)| w * v).sum();
            prop_assert!(moment.abs() < 1e-6 * (1.0 + m.iter().map(|v| v.abs()).fold(0.0, f64::max)));
        } else {
            prop_assert_eq!(sol.log_ratio, f64::NEG_INFINITY);
        }
    }

    #[test]
    fn el_invariant_to_rescaling(y in prop::collection::vec(-3.0f64..3.0, 8..30), scale in 0.01f64..100.0) {
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let m: Vec<f64> = y.iter().map(|v| v - 0.5 * mean - 0.1).collect();
        let scaled: Vec<f64> = m.iter().map(|v| v * scale).collect();
        let a = solve_el(&DMatrix::from_column_slice(m.len(), 1, &m)).unwrap();
        let b = solve_el(&DMatrix::from_column_slice(m.len(), 1, &scaled)).unwrap();
        if a.log_ratio.is_finite() {
            prop_assert!((a.log_ratio - b.log_ratio).abs() < 1e-7 * (1.0 + a.log_ratio.abs()));
        } else {
            prop_assert_eq!(b.log_ratio, f64::NEG_INFINITY);
        }
    }

    #[test]
    fn sandwich_is_psd_and_reduces_at_zero(
        p in 1usize..4,
        q in 1usize..3,
        entries in prop::collection::vec(-1.0f64..1.0, 25),
        xi in prop::collection::vec(-1.0f64..1.0, 6),
        a in 0.0f64..0.95,
    ) {
        let raw = raw_from(p, q, &entries, &xi);
        let zero = AsymptoticBlocks::new(&raw, 0.0).unwrap();
        let j_inv = sym_inverse(&raw.j, "J").unwrap();
        prop_assert!(frobenius(&(&zero.sandwich - &j_inv)) <= 1e-9 * frobenius(&j_inv));
        if let Ok(blocks) = AsymptoticBlocks::new(&raw, a) {
            let scale = frobenius(&blocks.sandwich).max(1e-12);
            prop_assert!(min_eigenvalue(&blocks.sandwich) >= -1e-9 * scale);
            let c = vec![1.0; p];
            let k = kappa_a(&blocks, &c).unwrap();
            prop_assert!(k >= 0.0 && k.is_finite());
        }
    }

    #[test]
    fn hybrid_objective_below_scaled_loglik(
        y in prop::collection::vec(-2.0f64..2.0, 10..30),
        mu in -0.5f64..0.5,
        sigma in 0.5f64..2.0,
        a in 0.0f64..0.99,
    ) {
        let model: Arc<dyn ParametricModel> = Arc::new(NormalModel);
        let controls = moment_control(model.clone(), &[3]).unwrap();
        let prob = HLProblem::new(model.clone(), Arc::new(controls), y.clone(), a, Focus::Theta(0)).unwrap();
        let theta = [mu, sigma];
        let h = hl_loglik(&prob, &theta);
        let l = loglik(model.as_ref(), &y, &theta);
        prop_assert!(h <= (1.0 - a) * l + 1e-9 * (1.0 + l.abs()));
    }

    #[test]
    fn control_mean_matches_closed_form(mu in -2.0f64..2.0, sigma in 0.2f64..3.0) {
        let model: Arc<dyn ParametricModel> = Arc::new(NormalModel);
        let controls = moment_control(model, &[1, 2]).unwrap();
        let m = controls.mu_of_theta(&[mu, sigma]).unwrap();
        prop_assert!((m[0] - mu).abs() < 1e-8);
        prop_assert!((m[1] - (mu * mu + sigma * sigma)).abs() < 1e-7 * (1.0 + m[1]));
        prop_assert!(controls.m(mu, &m)[0].abs() < 1e-8);
    }
}
