//! Synthetic data: factor-model condition scores, pure noise, and a full
//! embedding corpus (answer vectors plus condition-score targets) with the
//! catalog's question-to-factor pattern.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::catalog;
use crate::data::{ConditionScoreSet, EmbeddingKind, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::fixture::{condition_loadings, question_mask, FIXTURE_SCALE};
use crate::linalg::{self, Mat, Vector};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `N × p` scores from `x = Λ f + ψ e` with `f ~ N(0, Φ)` and unique
/// variances `ψ² = 1 − diag(ΛΦΛᵀ)`, so every column has unit variance.
pub fn factor_model_scores(n: usize, loadings: &Mat, phi: &Mat, seed: u64) -> Result<Mat> {
    Ok(factor_model_draw(n, loadings, phi, seed)?.0)
}

/// Scores together with the factor draws that produced them.
fn factor_model_draw(n: usize, loadings: &Mat, phi: &Mat, seed: u64) -> Result<(Mat, Vec<Vector>)> {
    let (p, m) = loadings.shape();
    let common = loadings * phi * loadings.transpose();
    let psi: Vec<f64> = (0..p)
        .map(|c| {
            let u = 1.0 - common[(c, c)];
            if u <= 0.0 {
                Err(Error::invalid(format!("row {c} has communality {:.3} ≥ 1", common[(c, c)])))
            } else {
                Ok(u.sqrt())
            }
        })
        .collect::<Result<_>>()?;
    let l = linalg::cholesky(phi)?.l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Mat::zeros(n, p);
    let mut factors = Vec::with_capacity(n);
    for i in 0..n {
        let f = &l * Vector::from_fn(m, |_, _| normal(&mut rng));
        let x = loadings * &f;
        for c in 0..p {
            out[(i, c)] = x[c] + psi[c] * normal(&mut rng);
        }
        factors.push(f);
    }
    Ok((out, factors))
}

/// Independent standard-normal columns.
pub fn noise_scores(n: usize, p: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_fn(n, p, |_, _| normal(&mut rng))
}

/// Two-factor scores patterned on the condition loadings with orthogonal
/// factors (the printed loadings with correlated factors would put some
/// communalities above 1).
pub fn two_factor_scores(n: usize, seed: u64) -> Mat {
    factor_model_scores(n, &condition_loadings(), &Mat::identity(2, 2), seed)
        .expect("condition loadings have communalities below 1")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub respondents: usize,
    pub embed_dim: usize,
    /// Leading dimensions that carry the trait signal.
    pub signal_dim: usize,
    /// Embedding units per trait unit along a factor direction.
    pub signal: f64,
    /// Length of the shared answer-style component in the signal block.
    pub style: f64,
    /// Mean trait shift elicited by a question on the factors it targets.
    pub question_shift: f64,
    pub answer_noise: f64,
    /// Emit one question-text vector per question (respondent `""`).
    pub question_vectors: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            respondents: 300,
            embed_dim: 64,
            signal_dim: 16,
            signal: 0.6,
            style: 2.0,
            question_shift: 1.5,
            answer_noise: 0.15,
            question_vectors: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub records: Vec<EmbeddingRecord>,
    pub targets: Vec<ConditionScoreSet>,
    pub thetas: Vec<Vector>,
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Corpus over the catalog questions: respondent traits `θ ~ N(0, I₂)`,
/// targets `clamp(0.5 + 0.15 (Λ_c θ + ψ_c e), 0, 1)`, and answer vectors
/// `[g c + s Σ_k mask_qk (θ_k + shift) u_k ; t_q] + σ ε`, where `c` and `u_k`
/// are orthonormal directions inside the leading `signal_dim` coordinates
/// and `t_q` is question-specific content in the remaining ones.
pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    if config.signal_dim > config.embed_dim {
        return Err(Error::invalid("signal_dim must not exceed embed_dim"));
    }
    if config.respondents < 2 {
        return Err(Error::invalid("need at least two respondents"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.embed_dim;
    let sd = config.signal_dim;
    if sd < 3 {
        return Err(Error::invalid("signal_dim must be at least 3"));
    }
    // orthonormal style and factor directions inside the signal block
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(3);
    while dirs.len() < 3 {
        let mut v: Vec<f64> = (0..sd).map(|_| normal(&mut rng)).collect();
        for u in &dirs {
            let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
        }
        dirs.push(unit(v));
    }
    let style = dirs.remove(0);
    // question-specific content lives outside the signal block
    let tails: Vec<Vec<f64>> = catalog::QUESTIONS
        .iter()
        .map(|_| unit((sd..d.max(sd + 1)).map(|_| normal(&mut rng)).collect()))
        .collect();
    let question_text: Vec<Vec<f64>> = tails
        .iter()
        .map(|t| {
            let head = (0..sd).map(|_| 0.3 * normal(&mut rng));
            head.chain(t.iter().copied()).take(d).collect()
        })
        .collect();

    let lam = condition_loadings();
    let conditions = catalog::conditions();
    let (scores, thetas) =
        factor_model_draw(config.respondents, &lam, &Mat::identity(2, 2), config.seed ^ 0x5eed)?;

    let mut records = Vec::new();
    if config.question_vectors {
        for ((id, _), v) in catalog::QUESTIONS.iter().zip(&question_text) {
            records.push(EmbeddingRecord {
                respondent: String::new(),
                question: id.to_string(),
                kind: EmbeddingKind::Question,
                vector: v.clone(),
            });
        }
    }
    let mut targets = Vec::with_capacity(config.respondents);
    for (i, theta) in thetas.iter().enumerate() {
        let rid = format!("p{i:04}");
        for ((id, _), tail) in catalog::QUESTIONS.iter().zip(&tails) {
            let mask = question_mask(id);
            let mut v: Vec<f64> = style.iter().map(|x| config.style * x).collect();
            for k in 0..2 {
                if mask[k] {
                    let w = config.signal * (theta[k] + config.question_shift);
                    v.iter_mut().zip(&dirs[k]).for_each(|(vi, ui)| *vi += w * ui);
                }
            }
            v.extend(tail.iter().copied());
            v.truncate(d);
            v.iter_mut().for_each(|x| *x += config.answer_noise * normal(&mut rng));
            records.push(EmbeddingRecord {
                respondent: rid.clone(),
                question: id.to_string(),
                kind: EmbeddingKind::Answer,
                vector: v,
            });
        }
        let s: IndexMap<String, Option<f64>> = conditions
            .iter()
            .enumerate()
            .map(|(c, name)| (name.clone(), Some(FIXTURE_SCALE.apply(scores[(i, c)]).clamp(0.0, 1.0))))
            .collect();
        targets.push(ConditionScoreSet::new(rid, s));
    }
    Ok(SynthCorpus {
        records,
        targets,
        thetas,
    })
}
