//! Integration nodes over a multivariate normal prior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::LatentPrior;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};

/// Nodes stored row-wise (`n × m`) with their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Nodes {
    pub points: Mat,
    pub weights: Vec<f64>,
}

impl Nodes {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn point(&self, q: usize) -> Vec<f64> {
        self.points.row(q).iter().copied().collect()
    }

    pub fn to_pairs(&self) -> Vec<(Vector, f64)> {
        (0..self.len())
            .map(|q| (self.points.row(q).transpose(), self.weights[q]))
            .collect()
    }
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while index > 0 {
        out += (index % base) as f64 * f;
        index /= base;
        f *= inv;
    }
    out
}

fn map_to_prior(u: &Mat, prior: &LatentPrior) -> Result<Mat> {
    let std = Normal::standard();
    let l = linalg::cholesky(&prior.covariance)?.l();
    let z = u.map(|v| std.inverse_cdf(v));
    let mut out = z * l.transpose();
    for mut row in out.row_iter_mut() {
        row += prior.mean.transpose();
    }
    Ok(out)
}

/// The first `n` Halton points (index 1 onward, bases 2, 3, 5, …) pushed
/// through the prior: componentwise normal quantile, then `μ + L z`.
pub fn halton_nodes(n: usize, prior: &LatentPrior) -> Result<Nodes> {
    halton_nodes_shifted(n, prior, None)
}

/// Halton nodes with an optional seeded Cranley–Patterson rotation.
pub fn halton_nodes_shifted(n: usize, prior: &LatentPrior, shift_seed: Option<u64>) -> Result<Nodes> {
    let m = prior.dim();
    if n == 0 {
        return Err(Error::invalid("need at least one node"));
    }
    if m > PRIMES.len() {
        return Err(Error::invalid(format!("Halton nodes support at most {} dimensions", PRIMES.len())));
    }
    let shift: Vec<f64> = match shift_seed {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..m).map(|_| rng.random::<f64>()).collect()
        }
        None => vec![0.0; m],
    };
    let u = Mat::from_fn(n, m, |i, k| {
        let v = (radical_inverse(i as u64 + 1, PRIMES[k]) + shift[k]).fract();
        v.clamp(1e-12, 1.0 - 1e-12)
    });
    Ok(Nodes {
        points: map_to_prior(&u, prior)?,
        weights: vec![1.0 / n as f64; n],
    })
}

/// Probabilists' Gauss–Hermite rule (weight `φ(x)`), via Golub–Welsch.
/// Weights sum to one.
pub fn gauss_hermite_1d(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = Mat::zeros(n, n);
    for i in 1..n {
        let b = (i as f64).sqrt();
        jac[(i, i - 1)] = b;
        jac[(i - 1, i)] = b;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    (
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1 / total).collect(),
    )
}

/// Tensor-product Gauss–Hermite grid with `n_per_dim` points per axis,
/// mapped through the prior as `μ + L x`.
pub fn gauss_hermite_nodes(n_per_dim: usize, prior: &LatentPrior) -> Result<Nodes> {
    let m = prior.dim();
    if n_per_dim == 0 {
        return Err(Error::invalid("need at least one node per dimension"));
    }
    let (x, w) = gauss_hermite_1d(n_per_dim);
    let total = n_per_dim
        .checked_pow(m as u32)
        .filter(|t| *t <= 5_000_000)
        .ok_or_else(|| Error::invalid("Gauss-Hermite grid too large"))?;
    let l = linalg::cholesky(&prior.covariance)?.l();
    let mut z = Mat::zeros(total, m);
    let mut weights = vec![1.0; total];
    for q in 0..total {
        let mut rem = q;
        for k in (0..m).rev() {
            let idx = rem % n_per_dim;
            rem /= n_per_dim;
            z[(q, k)] = x[idx];
            weights[q] *= w[idx];
        }
    }
    let mut points = z * l.transpose();
    for mut row in points.row_iter_mut() {
        row += prior.mean.transpose();
    }
    Ok(Nodes { points, weights })
}
