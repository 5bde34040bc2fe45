//! Multidimensional graded response model.
//!
//! With `z = a·θ` and boundary curves `s_k = σ(z + d_k)` (k = 1..K−1,
//! `s_0 = 1`, `s_K = 0`), the category probabilities are
//! `P_k = s_{k−1} − s_k`. Two identities keep the derivatives free of
//! divisions by small probabilities:
//!
//! ```text
//! ∂ log P_k / ∂z   = 1 − s_{k−1} − s_k
//! ∂² log P_k / ∂z² = −(s'_{k−1} + s'_k),   s' = s(1 − s)
//! ```
//!
//! so every gradient and Hessian with respect to θ is a multiple of `a`
//! and `a aᵀ` respectively.

use crate::data::{GradedItem, ItemBank, LatentPrior};
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-300;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `σ(u) − σ(v)` for `u > v`, evaluated on whichever tail keeps precision.
#[inline]
fn sigmoid_diff(u: f64, v: f64) -> f64 {
    if v > 0.0 {
        sigmoid(-v) - sigmoid(-u)
    } else {
        sigmoid(u) - sigmoid(v)
    }
}

#[inline]
pub fn linear_predictor(item: &GradedItem, theta: &[f64]) -> f64 {
    item.discrimination
        .iter()
        .zip(theta)
        .map(|(a, t)| a * t)
        .sum()
}

/// `s_{k−1}` and `s_k` around category `k` (1-based), with the fixed end
/// conventions.
#[inline]
fn neighbours(item: &GradedItem, z: f64, k: usize) -> (f64, f64) {
    let kk = item.num_categories;
    let upper = if k == 1 { 1.0 } else { sigmoid(z + item.intercepts[k - 2]) };
    let lower = if k == kk { 0.0 } else { sigmoid(z + item.intercepts[k - 1]) };
    (upper, lower)
}

/// Probability of category `k` (1-based) at linear predictor `z`.
#[inline]
pub fn category_prob_at(item: &GradedItem, z: f64, k: usize) -> f64 {
    let kk = item.num_categories;
    let p = if kk == 1 {
        1.0
    } else if k == 1 {
        sigmoid(-(z + item.intercepts[0]))
    } else if k == kk {
        sigmoid(z + item.intercepts[kk - 2])
    } else {
        sigmoid_diff(z + item.intercepts[k - 2], z + item.intercepts[k - 1])
    };
    p.max(0.0)
}

pub fn category_probs_at(item: &GradedItem, z: f64) -> Vec<f64> {
    (1..=item.num_categories)
        .map(|k| category_prob_at(item, z, k))
        .collect()
}

/// Log-probability of category `k` and its first two derivatives in `z`.
#[inline]
pub fn log_prob_derivs(item: &GradedItem, z: f64, k: usize) -> (f64, f64, f64) {
    let (su, sl) = neighbours(item, z, k);
    let p = category_prob_at(item, z, k).max(PROB_FLOOR);
    let d1 = 1.0 - su - sl;
    let d2 = -(su * (1.0 - su) + sl * (1.0 - sl));
    (p.ln(), d1, d2)
}

/// Scalar `c(z)` with item information `c · a aᵀ`: the expected squared score
/// `Σ_k P_k (1 − s_{k−1} − s_k)²`.
pub fn information_weight(item: &GradedItem, z: f64) -> f64 {
    (1..=item.num_categories)
        .map(|k| {
            let (su, sl) = neighbours(item, z, k);
            let score = 1.0 - su - sl;
            category_prob_at(item, z, k) * score * score
        })
        .sum()
}

fn check_theta(item: &GradedItem, theta: &[f64]) -> Result<()> {
    if theta.len() != item.dim() {
        return Err(Error::Dimension {
            expected: item.dim(),
            got: theta.len(),
        });
    }
    Ok(())
}

/// Cumulative probability `P*(Y ≥ k | θ)` for `k` in `1..=K+1`.
pub fn boundary_prob(item: &GradedItem, theta: &[f64], k: usize) -> Result<f64> {
    check_theta(item, theta)?;
    let kk = item.num_categories;
    if k == 0 || k > kk + 1 {
        return Err(Error::invalid(format!(
            "boundary index {k} outside 1..={} for `{}`",
            kk + 1,
            item.id
        )));
    }
    Ok(match k {
        1 => 1.0,
        k if k == kk + 1 => 0.0,
        k => sigmoid(linear_predictor(item, theta) + item.intercepts[k - 2]),
    })
}

pub fn category_probs(item: &GradedItem, theta: &[f64]) -> Result<Vec<f64>> {
    check_theta(item, theta)?;
    Ok(category_probs_at(item, linear_predictor(item, theta)))
}

/// Log-likelihood of one response and its gradient with respect to θ.
pub fn item_loglik(item: &GradedItem, theta: &[f64], response: usize) -> Result<(f64, Vector)> {
    check_theta(item, theta)?;
    if response == 0 || response > item.num_categories {
        return Err(Error::invalid(format!(
            "response {response} outside 1..={} for `{}`",
            item.num_categories, item.id
        )));
    }
    let (lp, d1, _) = log_prob_derivs(item, linear_predictor(item, theta), response);
    let grad = Vector::from_iterator(item.dim(), item.discrimination.iter().map(|a| a * d1));
    Ok((lp, grad))
}

pub fn item_information(item: &GradedItem, theta: &[f64]) -> Result<Mat> {
    check_theta(item, theta)?;
    let c = information_weight(item, linear_predictor(item, theta));
    let a = Vector::from_column_slice(&item.discrimination);
    Ok(&a * a.transpose() * c)
}

/// Prior precision plus the information of every administered item.
pub fn test_information<S: AsRef<str>>(
    bank: &ItemBank,
    administered: &[S],
    theta: &[f64],
    prior: &LatentPrior,
) -> Result<Mat> {
    let mut b = prior.precision();
    for id in administered {
        let item = bank
            .get(id.as_ref())
            .ok_or_else(|| Error::UnknownItem(id.as_ref().to_string()))?;
        b += item_information(item, theta)?;
    }
    Ok(b)
}

/// Information sum over bank indices without the prior term.
pub fn accumulated_information(bank: &ItemBank, indices: &[usize], theta: &[f64]) -> Mat {
    let m = bank.dim();
    let mut b = Mat::zeros(m, m);
    for &j in indices {
        let item = bank.item(j);
        let c = information_weight(item, linear_predictor(item, theta));
        let a = Vector::from_column_slice(&item.discrimination);
        b += &a * a.transpose() * c;
    }
    b
}
