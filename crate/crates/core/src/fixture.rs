//! Deterministic two-factor, 48-item synthetic bank and factor structure
//! used by the simulation harness, tests and demos.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::catalog;
use crate::data::{GradedItem, ItemBank, LatentPrior};
use crate::efa::{dominant_factors, ConditionScale, DominanceRule, FactorStructure, STRUCTURE_SCHEMA};
use crate::error::Result;
use crate::linalg::Mat;

/// Condition-level pattern loadings in `CONDITIONS` order.
pub const CONDITION_LOADINGS: [[f64; 2]; 10] = [
    [0.908, 0.210],
    [0.953, 0.198],
    [0.779, 0.546],
    [0.861, 0.063],
    [0.305, 0.870],
    [0.945, 0.240],
    [0.918, 0.274],
    [0.716, 0.430],
    [0.091, 0.928],
    [0.672, 0.418],
];

pub const FACTOR_CORRELATION: f64 = 0.3;

const SECOND_FACTOR: [&str; 17] = [
    "BD2", "BD3", "SUB1", "SUB2", "SUB3", "SUB4", "SUB5", "SUB6", "OCD1", "OCD2", "OCD3", "ED1",
    "ED2", "ED3", "ED4", "ED5", "ED6",
];

/// Factor mask of a catalog question: substance questions load on the
/// second factor only, the bipolar, OCD and eating questions on both, every
/// other question on the first.
pub fn question_mask(id: &str) -> [bool; 2] {
    let on_second = SECOND_FACTOR.contains(&id);
    let on_first = !id.starts_with("SUB");
    [on_first, on_second]
}

pub fn factor_corr() -> Mat {
    Mat::from_row_slice(2, 2, &[1.0, FACTOR_CORRELATION, FACTOR_CORRELATION, 1.0])
}

/// Readout used by the fixture: scores centred at 0.5 with 0.15 per unit
/// of projection.
pub const FIXTURE_SCALE: ConditionScale = ConditionScale {
    intercept: 0.5,
    slope: 0.15,
};

/// 48 graded items with K = 4 and heterogeneous parameters drawn from a
/// fixed seed.
pub fn fixture_bank() -> ItemBank {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b1d_f00d);
    let items = catalog::QUESTIONS
        .iter()
        .map(|(id, text)| {
            let mask = question_mask(id);
            let both = mask[0] && mask[1];
            let a: Vec<f64> = mask
                .iter()
                .map(|&on| {
                    if !on {
                        0.0
                    } else if both {
                        rng.random_range(0.6..1.6)
                    } else {
                        rng.random_range(0.7..2.4)
                    }
                })
                .collect();
            let d1 = rng.random_range(0.3..2.6);
            let d2 = d1 - rng.random_range(0.7..1.8);
            let d3 = d2 - rng.random_range(0.7..1.8);
            GradedItem::new(*id, *text, a, vec![d1, d2, d3], mask.to_vec())
                .expect("fixture items are valid")
        })
        .collect();
    ItemBank::new(items, LatentPrior::with_correlation(factor_corr()).expect("valid prior"))
        .expect("fixture bank is valid")
}

pub fn condition_loadings() -> Mat {
    Mat::from_fn(10, 2, |i, k| CONDITION_LOADINGS[i][k])
}

/// Factor structure matching [`fixture_bank`].
pub fn fixture_structure() -> FactorStructure {
    structure_for_bank(&fixture_bank()).expect("fixture structure is valid")
}

/// Structure with the fixture's condition level and the bank's items as
/// question level (`a / 1.7` as loadings).
pub fn structure_for_bank(bank: &ItemBank) -> Result<FactorStructure> {
    let conditions = catalog::conditions();
    let lam = condition_loadings();
    let phi = factor_corr();
    let mut r = &lam * &phi * lam.transpose();
    for i in 0..r.nrows() {
        r[(i, i)] = 1.0;
    }
    let rule = DominanceRule::default();
    let dominant: IndexMap<String, BTreeSet<usize>> = conditions
        .iter()
        .cloned()
        .zip(dominant_factors(&lam, rule))
        .collect();
    let j = bank.len();
    let m = bank.dim();
    let structure = FactorStructure {
        schema: STRUCTURE_SCHEMA.into(),
        m,
        conditions,
        condition_loadings: lam,
        factor_corr: phi,
        correlation: r,
        score_means: vec![0.5; 10],
        score_sds: vec![0.15; 10],
        dominant,
        question_ids: bank.items().iter().map(|i| i.id.clone()).collect(),
        question_texts: bank.items().iter().map(|i| i.text.clone()).collect(),
        question_loadings: Mat::from_fn(j, m, |q, k| bank.item(q).discrimination[k] / 1.7),
        question_mask: DMatrix::from_fn(j, m, |q, k| bank.item(q).factor_mask[k]),
        readout: vec![FIXTURE_SCALE; 10],
        warnings: Vec::new(),
    };
    structure.validate()?;
    Ok(structure)
}
