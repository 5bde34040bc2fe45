mod common;

use common::*;
use mcat_core::calibration::*;
use mcat_core::data::{GradedItem, ItemBank, LatentPrior, ResponseMatrix};
use mcat_core::evaluation::{sample_population, simulate_responses};
use mcat_core::fixture::{fixture_bank, structure_for_bank};
use mcat_core::linalg::Mat;
use mcat_core::quadrature::{gauss_hermite_nodes, halton_nodes};
use nalgebra::DMatrix;

fn ten_item_bank() -> ItemBank {
    let full = fixture_bank();
    let pick = ["G1", "OMD1", "OMD5", "A1", "BD2", "SUB1", "SUB4", "OCD2", "ADHD1", "ED3"];
    let items = pick.iter().map(|id| full.get(id).unwrap().clone()).collect();
    ItemBank::new(items, full.prior().clone()).unwrap()
}

/// `Σ_i log ∫ Π_j P(u_ij | θ) φ(θ; 0, Φ) dθ` by a midpoint rule on
/// `[−7, 7]²` with step 0.05 (accurate to about 1e−4 here).
fn dense_loglik(bank: &ItemBank, resp: &ResponseMatrix) -> f64 {
    let prec = bank.prior().precision();
    let det = bank.prior().covariance.determinant();
    let h = 0.05;
    let pts: Vec<f64> = (0..280).map(|i| -7.0 + h * (i as f64 + 0.5)).collect();
    let mut total = 0.0;
    for i in 0..resp.n_respondents() {
        let mut acc = 0.0;
        for &x in &pts {
            for &y in &pts {
                let q = prec[(0, 0)] * x * x + 2.0 * prec[(0, 1)] * x * y + prec[(1, 1)] * y * y;
                let mut l = (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt());
                for (j, item) in bank.items().iter().enumerate() {
                    if let Some(k) = resp.get(i, j) {
                        l *= oracle_probs(&item.discrimination, &item.intercepts, &[x, y])[k as usize - 1];
                    }
                }
                acc += l * h * h;
            }
        }
        total += acc.ln();
    }
    total
}

#[test]
fn marginal_loglik_matches_dense_integration() {
    let bank = ten_item_bank();
    let pop = sample_population(bank.prior(), 50, 31);
    let resp = simulate_responses(&bank, &pop, 32).unwrap();
    let qmc = marginal_loglik(&bank, &resp, &halton_nodes(16384, bank.prior()).unwrap()).unwrap();
    let gh = marginal_loglik(&bank, &resp, &gauss_hermite_nodes(41, bank.prior()).unwrap()).unwrap();
    let dense = dense_loglik(&bank, &resp);
    assert!((gh - dense).abs() < 1e-3, "{gh} vs {dense}");
    assert!((qmc - gh).abs() < 1e-2, "{qmc} vs {gh}");
}

#[test]
fn marginal_loglik_trivial_cases() {
    let item = GradedItem::new("u", "", vec![0.0], vec![3f64.ln(), 0.0, -(3f64.ln())], vec![false]).unwrap();
    let bank = ItemBank::new(vec![item], LatentPrior::standard(1)).unwrap();
    let nodes = halton_nodes(64, bank.prior()).unwrap();
    let one = ResponseMatrix::new(vec!["r".into()], vec!["u".into()], vec![4], vec![Some(2)]).unwrap();
    assert!((marginal_loglik(&bank, &one, &nodes).unwrap() - 0.25f64.ln()).abs() < 1e-12);
    let none = ResponseMatrix::new(vec![], vec!["u".into()], vec![4], vec![]).unwrap();
    assert_eq!(marginal_loglik(&bank, &none, &nodes).unwrap(), 0.0);
}

fn calibration_fixture() -> (ItemBank, ResponseMatrix) {
    let bank = fixture_bank();
    let pop = sample_population(bank.prior(), 500, 33);
    let resp = simulate_responses(&bank, &pop, 34).unwrap();
    (bank, resp)
}

#[test]
fn em_is_monotone_masked_and_deterministic() {
    let (bank, resp) = calibration_fixture();
    let structure = structure_for_bank(&bank).unwrap();
    let config = CalibrationConfig {
        num_nodes: 512,
        ..Default::default()
    };
    let (fit, report) = fit_mirt(&resp, &structure, &config).unwrap();
    for w in report.loglik_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-6, "{} -> {}", w[0], w[1]);
    }
    assert!(report.converged);
    for (a, b) in fit.items().iter().zip(bank.items()) {
        for k in 0..2 {
            assert_eq!(a.factor_mask[k], b.factor_mask[k]);
            if !a.factor_mask[k] {
                assert_eq!(a.discrimination[k], 0.0);
            }
        }
        assert!(a.intercepts.windows(2).all(|w| w[0] > w[1]));
    }
    let (again, _) = fit_mirt(&resp, &structure, &config).unwrap();
    assert_eq!(fit, again);
}

#[test]
fn quadrature_schemes_agree_on_final_loglik() {
    let (bank, resp) = calibration_fixture();
    let structure = structure_for_bank(&bank).unwrap();
    let qmc = fit_mirt(&resp, &structure, &CalibrationConfig::default()).unwrap().1;
    let gh_cfg = CalibrationConfig {
        quadrature: QuadratureKind::GaussHermite,
        num_nodes: 41 * 41,
        ..Default::default()
    };
    let gh = fit_mirt(&resp, &structure, &gh_cfg).unwrap().1;
    let rel = (qmc.final_loglik() - gh.final_loglik()).abs() / gh.final_loglik().abs();
    assert!(rel < 1e-3, "{} vs {}", qmc.final_loglik(), gh.final_loglik());
}

#[test]
fn two_dimensional_fit_with_one_active_factor_reduces_to_unidimensional() {
    let bank = ten_item_bank();
    let uni_items: Vec<GradedItem> = bank
        .items()
        .iter()
        .map(|it| GradedItem::unmasked(it.id.clone(), vec![it.discrimination.iter().sum()], it.intercepts.clone()).unwrap())
        .collect();
    let uni = ItemBank::new(uni_items, LatentPrior::standard(1)).unwrap();
    let pop = sample_population(uni.prior(), 400, 35);
    let resp = simulate_responses(&uni, &pop, 36).unwrap();
    let ids = resp.items().to_vec();
    let gh = |n| CalibrationConfig {
        quadrature: QuadratureKind::GaussHermite,
        num_nodes: n,
        ..Default::default()
    };
    let (_, one) = fit_unidimensional(&resp, &gh(31)).unwrap();
    let spec = MeasurementSpec {
        item_ids: ids.clone(),
        item_texts: vec![String::new(); ids.len()],
        start_loadings: Mat::from_fn(ids.len(), 2, |_, k| if k == 0 { 0.7 } else { 0.0 }),
        mask: DMatrix::from_fn(ids.len(), 2, |_, k| k == 0),
        factor_corr: Mat::identity(2, 2),
    };
    let (_, two) = fit_with_spec(&resp, &spec, &gh(31 * 31)).unwrap();
    assert!((one.final_loglik() - two.final_loglik()).abs() < 1e-6, "{} vs {}", one.final_loglik(), two.final_loglik());
}

#[test]
fn balanced_dichotomous_item_has_zero_intercept() {
    let n = 400;
    let cells: Vec<Option<u8>> = (0..n).map(|i| Some(1 + (i % 2) as u8)).collect();
    let resp = ResponseMatrix::new((0..n).map(|i| format!("r{i}")).collect(), vec!["q".into()], vec![2], cells).unwrap();
    let (fit, _) = fit_unidimensional(&resp, &CalibrationConfig::default()).unwrap();
    assert!(fit.item(0).intercepts[0].abs() < 0.1);
}

#[test]
fn degenerate_inputs_are_rejected() {
    let empty = ResponseMatrix::new(vec![], vec![], vec![], vec![]).unwrap();
    assert!(fit_unidimensional(&empty, &CalibrationConfig::default()).is_err());
    let cells = vec![Some(2u8); 20];
    let same = ResponseMatrix::new((0..10).map(|i| format!("r{i}")).collect(), vec!["a".into(), "b".into()], vec![4, 4], cells).unwrap();
    let err = fit_unidimensional(&same, &CalibrationConfig::default()).unwrap_err();
    assert!(matches!(err, mcat_core::Error::Unidentifiable(_)), "{err}");
}
