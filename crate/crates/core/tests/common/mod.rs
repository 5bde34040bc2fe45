#![allow(dead_code)]

use mcat_core::data::GradedItem;
use rand::Rng;

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Category probabilities written out directly from the cumulative logistic.
/// Each difference `σ(x) − σ(y)` is taken on the complementary side when both
/// arguments are positive so small probabilities keep their precision.
pub fn oracle_probs(a: &[f64], d: &[f64], theta: &[f64]) -> Vec<f64> {
    let z: f64 = a.iter().zip(theta).map(|(x, y)| x * y).sum();
    let mut args = vec![f64::INFINITY];
    args.extend(d.iter().map(|dk| z + dk));
    args.push(f64::NEG_INFINITY);
    args.windows(2)
        .map(|w| {
            let (x, y) = (w[0], w[1]);
            if x + y > 0.0 {
                sig(-y) - sig(-x)
            } else {
                sig(x) - sig(y)
            }
        })
        .collect()
}

pub fn oracle_logp(item: &GradedItem, theta: &[f64], k: usize) -> f64 {
    oracle_probs(&item.discrimination, &item.intercepts, theta)[k - 1].ln()
}

pub fn random_item<R: Rng>(rng: &mut R, m: usize, k: usize) -> GradedItem {
    let a: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..2.5)).collect();
    let mut d = vec![rng.random_range(-1.0..2.5)];
    for _ in 2..k {
        let last = *d.last().unwrap();
        d.push(last - rng.random_range(0.3..1.8));
    }
    GradedItem::unmasked("x", a, d).unwrap()
}

pub fn random_theta<R: Rng>(rng: &mut R, m: usize, r: f64) -> Vec<f64> {
    (0..m).map(|_| rng.random_range(-r..r)).collect()
}
