//! Exploratory factor analysis over condition scores: factor count by
//! parallel analysis, minimum-residual extraction, quartimin (oblimin with
//! γ = 0) rotation, dominant-factor assignment and question-level loadings.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};

pub const STRUCTURE_SCHEMA: &str = "mcat.structure/v1";

/// Affine readout from a latent projection `Λ_c·θ` to a condition score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionScale {
    pub intercept: f64,
    pub slope: f64,
}

impl ConditionScale {
    pub const IDENTITY: Self = Self {
        intercept: 0.0,
        slope: 1.0,
    };

    pub fn apply(&self, raw: f64) -> f64 {
        self.intercept + self.slope * raw
    }

    /// Ordinary least squares of `target` on `raw`.
    pub fn fit(raw: &[f64], target: &[f64]) -> Result<Self> {
        let n = raw.len();
        if n != target.len() || n < 2 {
            return Err(Error::invalid("scale fit needs at least two paired values"));
        }
        let mx = raw.iter().sum::<f64>() / n as f64;
        let my = target.iter().sum::<f64>() / n as f64;
        let sxx: f64 = raw.iter().map(|x| (x - mx) * (x - mx)).sum();
        let sxy: f64 = raw.iter().zip(target).map(|(x, y)| (x - mx) * (y - my)).sum();
        if sxx <= 0.0 {
            return Err(Error::invalid("scale fit: constant projection"));
        }
        let slope = sxy / sxx;
        Ok(Self {
            intercept: my - slope * mx,
            slope,
        })
    }
}

/// Factor model over the condition scores plus its question-level mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorStructure {
    pub schema: String,
    pub m: usize,
    pub conditions: Vec<String>,
    /// Pattern loadings, conditions × factors.
    #[serde(with = "linalg::serde_mat")]
    pub condition_loadings: Mat,
    #[serde(with = "linalg::serde_mat")]
    pub factor_corr: Mat,
    /// Observed correlation among the condition scores.
    #[serde(with = "linalg::serde_mat")]
    pub correlation: Mat,
    pub score_means: Vec<f64>,
    pub score_sds: Vec<f64>,
    /// Zero-based factor indices per condition.
    pub dominant: IndexMap<String, BTreeSet<usize>>,
    pub question_ids: Vec<String>,
    #[serde(default)]
    pub question_texts: Vec<String>,
    #[serde(with = "linalg::serde_mat")]
    pub question_loadings: Mat,
    #[serde(with = "linalg::serde_bool_mat")]
    pub question_mask: DMatrix<bool>,
    pub readout: Vec<ConditionScale>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl FactorStructure {
    pub fn validate(&self) -> Result<()> {
        let p = self.conditions.len();
        let j = self.question_ids.len();
        let m = self.m;
        let shape_ok = self.condition_loadings.shape() == (p, m)
            && self.factor_corr.shape() == (m, m)
            && self.correlation.shape() == (p, p)
            && self.score_means.len() == p
            && self.score_sds.len() == p
            && self.question_loadings.shape() == (j, m)
            && self.question_mask.shape() == (j, m)
            && self.readout.len() == p
            && (self.question_texts.is_empty() || self.question_texts.len() == j);
        if !shape_ok || m == 0 {
            return Err(Error::invalid("factor structure has inconsistent shapes"));
        }
        if !linalg::is_symmetric(&self.factor_corr, 1e-9)
            || (0..m).any(|k| (self.factor_corr[(k, k)] - 1.0).abs() > 1e-9)
            || linalg::cholesky(&self.factor_corr).is_err()
        {
            return Err(Error::invalid(
                "factor correlation must be symmetric positive definite with unit diagonal",
            ));
        }
        for (q, id) in self.question_ids.iter().enumerate() {
            if !(0..m).any(|k| self.question_mask[(q, k)]) {
                return Err(Error::invalid(format!("question `{id}` is masked on no factor")));
            }
        }
        for c in &self.conditions {
            match self.dominant.get(c) {
                Some(set) if !set.is_empty() && set.iter().all(|&k| k < m) => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "condition `{c}` has no valid dominant factor"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let st: Self = serde_json::from_str(s).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if st.schema != STRUCTURE_SCHEMA {
            return Err(Error::invalid(format!("unsupported structure schema `{}`", st.schema)));
        }
        st.validate()?;
        Ok(st)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("structure serializes");
        s.push('\n');
        s
    }

    pub fn question_index(&self, id: &str) -> Option<usize> {
        self.question_ids.iter().position(|q| q == id)
    }

    pub fn question_text(&self, q: usize) -> &str {
        self.question_texts.get(q).map_or("", String::as_str)
    }
}

/// Pearson correlation matrix with pairwise-complete handling of `NaN`
/// (missing) cells.
pub fn correlation_matrix(scores: &Mat) -> Result<Mat> {
    let (n, p) = scores.shape();
    if n < 3 {
        return Err(Error::invalid("correlation needs at least three rows"));
    }
    let mut r = Mat::identity(p, p);
    for a in 0..p {
        for b in 0..a {
            let pairs: Vec<(f64, f64)> = (0..n)
                .map(|i| (scores[(i, a)], scores[(i, b)]))
                .filter(|(x, y)| !x.is_nan() && !y.is_nan())
                .collect();
            let v = pearson_pairs(&pairs).ok_or_else(|| {
                Error::invalid(format!("column {a} or {b} is constant over complete pairs"))
            })?;
            r[(a, b)] = v;
            r[(b, a)] = v;
        }
    }
    if p == 1 {
        let col: Vec<(f64, f64)> = (0..n)
            .map(|i| (scores[(i, 0)], scores[(i, 0)]))
            .filter(|(x, _)| !x.is_nan())
            .collect();
        pearson_pairs(&col).ok_or_else(|| Error::invalid("column 0 is constant"))?;
    }
    Ok(r)
}

fn pearson_pairs(pairs: &[(f64, f64)]) -> Option<f64> {
    let n = pairs.len() as f64;
    if pairs.len() < 3 {
        return None;
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParallelAnalysis {
    pub m: usize,
    pub observed: Vec<f64>,
    pub thresholds: Vec<f64>,
}

/// Horn's parallel analysis: retain the leading observed eigenvalues that
/// exceed the `quantile` of eigenvalues from `n_sims` standard-normal
/// datasets of the same shape.
pub fn parallel_analysis(
    scores: &Mat,
    n_sims: usize,
    quantile: f64,
    seed: u64,
) -> Result<ParallelAnalysis> {
    if n_sims < 100 {
        return Err(Error::invalid("parallel analysis needs at least 100 simulations"));
    }
    if !(0.0..1.0).contains(&quantile) {
        return Err(Error::invalid("quantile must lie in [0, 1)"));
    }
    let (n, p) = scores.shape();
    let (observed, _) = linalg::sym_eigen_desc(&correlation_matrix(scores)?);
    let sims: Vec<Vec<f64>> = (0..n_sims)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64 + 1);
            let data = Mat::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
            let r = correlation_matrix(&data).expect("normal draws are non-constant");
            linalg::sym_eigen_desc(&r).0
        })
        .collect();
    let thresholds: Vec<f64> = (0..p)
        .map(|k| {
            let mut col: Vec<f64> = sims.iter().map(|e| e[k]).collect();
            col.sort_by(f64::total_cmp);
            quantile_sorted(&col, quantile)
        })
        .collect();
    let m = observed
        .iter()
        .zip(&thresholds)
        .take_while(|(o, t)| o > t)
        .count();
    Ok(ParallelAnalysis {
        m,
        observed,
        thresholds,
    })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub loadings: Mat,
    pub communalities: Vec<f64>,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

const HEYWOOD_CAP: f64 = 0.999;

/// Minimum-residual extraction. Iterates principal axes with communalities
/// re-estimated from the loadings until the diagonal is self-consistent; the
/// fixed point minimizes the off-diagonal residual sum of squares.
pub fn extract_factors(r: &Mat, m: usize) -> Result<Extraction> {
    let p = r.nrows();
    if m == 0 || m >= p {
        return Err(Error::invalid(format!("factor count {m} must lie in 1..{p}")));
    }
    let mut warnings = Vec::new();
    // squared multiple correlations as starting communalities
    let mut h: Vec<f64> = match linalg::spd_inverse(r) {
        Ok(inv) => (0..p).map(|i| (1.0 - 1.0 / inv[(i, i)]).max(0.0)).collect(),
        Err(_) => vec![0.5; p],
    };
    let mut loadings = Mat::zeros(p, m);
    let mut iterations = 0;
    let mut heywood = false;
    for it in 0..20_000 {
        iterations = it + 1;
        let mut reduced = r.clone();
        for i in 0..p {
            reduced[(i, i)] = h[i];
        }
        let (vals, vecs) = linalg::sym_eigen_desc(&reduced);
        for k in 0..m {
            let s = vals[k].max(0.0).sqrt();
            for i in 0..p {
                loadings[(i, k)] = vecs[(i, k)] * s;
            }
        }
        let mut change: f64 = 0.0;
        for i in 0..p {
            let mut hi: f64 = (0..m).map(|k| loadings[(i, k)].powi(2)).sum();
            if hi > HEYWOOD_CAP {
                heywood = true;
                hi = HEYWOOD_CAP;
            }
            change = change.max((hi - h[i]).abs());
            h[i] = hi;
        }
        if change < 1e-12 {
            break;
        }
    }
    if heywood {
        warnings.push(format!("Heywood case: communality clamped to {HEYWOOD_CAP}"));
    }
    for k in 0..m {
        let s: f64 = loadings.column(k).sum();
        if s < 0.0 {
            loadings.column_mut(k).neg_mut();
        }
    }
    let communalities = (0..p)
        .map(|i| (0..m).map(|k| loadings[(i, k)].powi(2)).sum())
        .collect();
    Ok(Extraction {
        loadings,
        communalities,
        iterations,
        warnings,
    })
}

/// Max absolute off-diagonal entry of `R − ΛΦΛᵀ`.
pub fn offdiag_residual_max(r: &Mat, loadings: &Mat, phi: &Mat) -> f64 {
    let implied = loadings * phi * loadings.transpose();
    let p = r.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..p {
        for j in 0..p {
            if i != j {
                worst = worst.max((r[(i, j)] - implied[(i, j)]).abs());
            }
        }
    }
    worst
}

/// Sum of squared off-diagonal residuals.
pub fn offdiag_residual_ss(r: &Mat, loadings: &Mat, phi: &Mat) -> f64 {
    let implied = loadings * phi * loadings.transpose();
    let p = r.nrows();
    let mut ss = 0.0;
    for i in 0..p {
        for j in 0..p {
            if i != j {
                ss += (r[(i, j)] - implied[(i, j)]).powi(2);
            }
        }
    }
    ss
}

#[derive(Debug, Clone)]
pub struct Rotation {
    pub pattern: Mat,
    pub phi: Mat,
    pub iterations: usize,
    pub gradient_norm: f64,
}

fn quartimin(l: &Mat) -> (f64, Mat) {
    let m = l.ncols();
    let l2 = l.component_mul(l);
    let n = Mat::from_fn(m, m, |i, j| if i == j { 0.0 } else { 1.0 });
    let x = &l2 * n;
    let f = l2.component_mul(&x).sum() / 4.0;
    (f, l.component_mul(&x))
}

fn normalize_columns(x: &Mat) -> Mat {
    let mut t = x.clone();
    for mut c in t.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    t
}

struct GpaOutcome {
    t: Mat,
    iterations: usize,
    gradient_norm: f64,
    converged: bool,
}

fn gpa_oblique(a: &Mat, start: Mat, tol: f64, max_iter: usize) -> Option<GpaOutcome> {
    let eval = |t: &Mat| -> Option<(Mat, f64, Mat)> {
        let tinv = t.clone().try_inverse()?;
        let l = a * tinv.transpose();
        let (f, gq) = quartimin(&l);
        let g = -(l.transpose() * gq * &tinv).transpose();
        Some((l, f, g))
    };
    let mut t = start;
    let (_, mut f, mut g) = eval(&t)?;
    let mut alpha = 1.0;
    for it in 0..max_iter {
        let col_dots = Vector::from_iterator(
            t.ncols(),
            t.column_iter().zip(g.column_iter()).map(|(tc, gc)| tc.dot(&gc)),
        );
        let gp = &g - &t * Mat::from_diagonal(&col_dots);
        let s = gp.norm();
        if s < tol {
            return Some(GpaOutcome {
                t,
                iterations: it,
                gradient_norm: s,
                converged: true,
            });
        }
        alpha *= 2.0;
        let mut accepted = None;
        for _ in 0..30 {
            let tt = normalize_columns(&(&t - &gp * alpha));
            if let Some((_, ft, gt)) = eval(&tt) {
                if ft < f - 0.5 * s * s * alpha {
                    accepted = Some((tt, ft, gt));
                    break;
                }
            }
            alpha /= 2.0;
        }
        match accepted {
            Some((tt, ft, gt)) => {
                t = tt;
                f = ft;
                g = gt;
            }
            None => {
                // no descent possible at machine precision
                return Some(GpaOutcome {
                    t,
                    iterations: it,
                    gradient_norm: s,
                    converged: s < tol.sqrt(),
                });
            }
        }
    }
    Some(GpaOutcome {
        t,
        iterations: max_iter,
        gradient_norm: f64::INFINITY,
        converged: false,
    })
}

/// Oblique quartimin rotation by gradient projection. Factors are ordered
/// by explained variance and signed so each factor's largest-magnitude
/// loading is positive.
pub fn rotate_oblique(unrotated: &Mat) -> Result<Rotation> {
    let m = unrotated.ncols();
    if m <= 1 {
        return Ok(Rotation {
            pattern: unrotated.clone(),
            phi: Mat::identity(m.max(1), m.max(1)),
            iterations: 0,
            gradient_norm: 0.0,
        });
    }
    let tol = 1e-8;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut start = Mat::identity(m, m);
    for _restart in 0..6 {
        if let Some(out) = gpa_oblique(unrotated, start, tol, 10_000) {
            if out.converged {
                let tinv = out
                    .t
                    .clone()
                    .try_inverse()
                    .ok_or_else(|| Error::Numerical("singular rotation".into()))?;
                let pattern = unrotated * tinv.transpose();
                let phi = out.t.transpose() * &out.t;
                let (pattern, phi) = canonical_order(pattern, phi);
                return Ok(Rotation {
                    pattern,
                    phi,
                    iterations: out.iterations,
                    gradient_norm: out.gradient_norm,
                });
            }
        }
        let raw = Mat::from_fn(m, m, |_, _| StandardNormal.sample(&mut rng));
        start = normalize_columns(&raw);
    }
    Err(Error::Numerical(
        "oblique rotation did not converge after restarts".into(),
    ))
}

fn canonical_order(pattern: Mat, phi: Mat) -> (Mat, Mat) {
    let (p, m) = pattern.shape();
    let mut order: Vec<usize> = (0..m).collect();
    let ss: Vec<f64> = (0..m).map(|k| pattern.column(k).norm_squared()).collect();
    order.sort_by(|&a, &b| ss[b].total_cmp(&ss[a]));
    let signs: Vec<f64> = order
        .iter()
        .map(|&k| {
            let col = pattern.column(k);
            let i = col.iamax();
            if col[i] < 0.0 {
                -1.0
            } else {
                1.0
            }
        })
        .collect();
    let pat = Mat::from_fn(p, m, |i, c| pattern[(i, order[c])] * signs[c]);
    let ph = Mat::from_fn(m, m, |a, b| {
        if a == b {
            1.0
        } else {
            phi[(order[a], order[b])] * signs[a] * signs[b]
        }
    });
    (pat, ph)
}

/// How secondary factors qualify as cross-loadings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DominanceRule {
    /// Secondary |loading| at least `t`.
    AbsoluteThreshold(f64),
    /// Secondary |loading| within fraction `r` of the primary.
    RelativeWithin(f64),
}

impl Default for DominanceRule {
    fn default() -> Self {
        DominanceRule::AbsoluteThreshold(0.40)
    }
}

impl fmt::Display for DominanceRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DominanceRule::AbsoluteThreshold(t) => write!(f, "absolute:{t}"),
            DominanceRule::RelativeWithin(r) => write!(f, "relative:{r}"),
        }
    }
}

impl FromStr for DominanceRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) = s.split_once(':').unwrap_or((s, ""));
        let parse = |default: f64| -> Result<f64> {
            if value.is_empty() {
                Ok(default)
            } else {
                value
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad rule value `{value}`")))
            }
        };
        match kind {
            "absolute" => Ok(DominanceRule::AbsoluteThreshold(parse(0.40)?)),
            "relative" => Ok(DominanceRule::RelativeWithin(parse(0.20)?)),
            _ => Err(Error::invalid(format!(
                "unknown dominance rule `{s}` (use absolute[:t] or relative[:r])"
            ))),
        }
    }
}

/// Primary factor (largest |loading|) plus cross-loadings per `rule`, for
/// one row of loadings.
pub fn dominant_set(row: &[f64], rule: DominanceRule) -> BTreeSet<usize> {
    let mut set = BTreeSet::new();
    let Some((primary, top)) = row
        .iter()
        .map(|v| v.abs())
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (k, v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((k, v)),
        })
    else {
        return set;
    };
    set.insert(primary);
    for (k, v) in row.iter().enumerate() {
        let qualifies = match rule {
            DominanceRule::AbsoluteThreshold(t) => v.abs() >= t,
            DominanceRule::RelativeWithin(r) => v.abs() >= (1.0 - r) * top,
        };
        if k != primary && qualifies {
            set.insert(k);
        }
    }
    set
}

/// [`dominant_set`] on signed values: the primary factor is the largest
/// score and only positive scores qualify as secondary, so a question is
/// tied to the factors its answers raise.
pub fn directional_set(row: &[f64], rule: DominanceRule) -> BTreeSet<usize> {
    let mut set = BTreeSet::new();
    let Some((primary, top)) = row
        .iter()
        .copied()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (k, v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((k, v)),
        })
    else {
        return set;
    };
    set.insert(primary);
    for (k, &v) in row.iter().enumerate() {
        let qualifies = match rule {
            DominanceRule::AbsoluteThreshold(t) => v >= t,
            DominanceRule::RelativeWithin(r) => top > 0.0 && v >= (1.0 - r) * top,
        };
        if k != primary && qualifies {
            set.insert(k);
        }
    }
    set
}

pub fn dominant_factors(loadings: &Mat, rule: DominanceRule) -> Vec<BTreeSet<usize>> {
    (0..loadings.nrows())
        .map(|i| {
            let row: Vec<f64> = loadings.row(i).iter().copied().collect();
            dominant_set(&row, rule)
        })
        .collect()
}

/// Regression-method factor scorer `f = Φ Λᵀ R⁻¹ x`.
#[derive(Debug, Clone)]
pub struct FactorScorer {
    weights: Mat,
    pub regularized: bool,
}

impl FactorScorer {
    pub fn new(loadings: &Mat, phi: &Mat, r: &Mat) -> Result<Self> {
        let p = r.nrows();
        let (rinv, regularized) = match linalg::spd_inverse(r) {
            Ok(inv) if inv.iter().all(|v| v.is_finite()) => (inv, false),
            _ => {
                let ridge = r + Mat::identity(p, p) * 1e-6;
                (linalg::spd_inverse(&ridge)?, true)
            }
        };
        Ok(Self {
            weights: phi * loadings.transpose() * rinv,
            regularized,
        })
    }

    pub fn score(&self, x: &Vector) -> Vector {
        &self.weights * x
    }
}

pub fn factor_scores(loadings: &Mat, phi: &Mat, r: &Mat, x: &Vector) -> Result<Vector> {
    Ok(FactorScorer::new(loadings, phi, r)?.score(x))
}

/// Projects per-question condition predictions into factor space and
/// derives the item-to-factor mask with the dominance rule applied to the
/// signed factor scores ([`directional_set`]). Each row of
/// `per_question_scores` is standardized with the respondent-level means and
/// standard deviations before scoring.
pub fn question_level_loadings(
    per_question_scores: &Mat,
    means: &[f64],
    sds: &[f64],
    scorer: &FactorScorer,
    rule: DominanceRule,
) -> Result<(Mat, DMatrix<bool>)> {
    let (j, p) = per_question_scores.shape();
    if means.len() != p || sds.len() != p {
        return Err(Error::Dimension {
            expected: p,
            got: means.len(),
        });
    }
    let m = scorer.weights.nrows();
    let mut loadings = Mat::zeros(j, m);
    let mut mask = DMatrix::from_element(j, m, false);
    for q in 0..j {
        let z = Vector::from_fn(p, |c, _| (per_question_scores[(q, c)] - means[c]) / sds[c]);
        let f = scorer.score(&z);
        loadings.row_mut(q).copy_from(&f.transpose());
        for k in directional_set(f.as_slice(), rule) {
            mask[(q, k)] = true;
        }
    }
    Ok((loadings, mask))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EfaConfig {
    pub n_sims: usize,
    pub quantile: f64,
    pub seed: u64,
    pub rule: DominanceRule,
    /// Overrides parallel analysis when set.
    pub factors: Option<usize>,
}

impl Default for EfaConfig {
    fn default() -> Self {
        Self {
            n_sims: 200,
            quantile: 0.95,
            seed: 0,
            rule: DominanceRule::default(),
            factors: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EfaOutput {
    pub structure: FactorStructure,
    pub parallel: ParallelAnalysis,
}

/// Full pipeline from respondent-level condition scores (N × p) and
/// per-question aggregated predictions (J × p) to a [`FactorStructure`].
pub fn run_efa(
    conditions: &[String],
    scores: &Mat,
    question_ids: &[String],
    question_texts: &[String],
    per_question_scores: &Mat,
    config: &EfaConfig,
) -> Result<EfaOutput> {
    let (n, p) = scores.shape();
    if conditions.len() != p || per_question_scores.ncols() != p {
        return Err(Error::Dimension {
            expected: conditions.len(),
            got: p,
        });
    }
    if question_ids.len() != per_question_scores.nrows() {
        return Err(Error::Dimension {
            expected: question_ids.len(),
            got: per_question_scores.nrows(),
        });
    }
    let parallel = parallel_analysis(scores, config.n_sims, config.quantile, config.seed)?;
    let m = config.factors.unwrap_or(parallel.m);
    if m == 0 {
        return Err(Error::invalid(
            "parallel analysis retained no factors; pass an explicit factor count",
        ));
    }
    let r = correlation_matrix(scores)?;
    let extraction = extract_factors(&r, m)?;
    let rotation = rotate_oblique(&extraction.loadings)?;
    let mut warnings = extraction.warnings.clone();

    let mut means = vec![0.0; p];
    let mut sds = vec![0.0; p];
    for c in 0..p {
        let col: Vec<f64> = (0..n).map(|i| scores[(i, c)]).filter(|v| !v.is_nan()).collect();
        let k = col.len() as f64;
        means[c] = col.iter().sum::<f64>() / k;
        sds[c] = (col.iter().map(|v| (v - means[c]).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    }
    let scorer = FactorScorer::new(&rotation.pattern, &rotation.phi, &r)?;
    if scorer.regularized {
        warnings.push("correlation matrix singular; ridge-regularized inverse used".into());
    }

    // readout: regress each condition's scores on Λ_c·f over respondents
    let mut readout = Vec::with_capacity(p);
    let fscores: Vec<Option<Vector>> = (0..n)
        .map(|i| {
            let row: Vec<f64> = (0..p).map(|c| scores[(i, c)]).collect();
            if row.iter().any(|v| v.is_nan()) {
                None
            } else {
                let z = Vector::from_fn(p, |c, _| (row[c] - means[c]) / sds[c]);
                Some(scorer.score(&z))
            }
        })
        .collect();
    for c in 0..p {
        let lam = rotation.pattern.row(c).transpose();
        let (raw, target): (Vec<f64>, Vec<f64>) = fscores
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.as_ref().map(|f| (lam.dot(f), scores[(i, c)])))
            .unzip();
        readout.push(ConditionScale::fit(&raw, &target)?);
    }

    let (question_loadings, question_mask) =
        question_level_loadings(per_question_scores, &means, &sds, &scorer, config.rule)?;
    let dominant = conditions
        .iter()
        .cloned()
        .zip(dominant_factors(&rotation.pattern, config.rule))
        .collect();
    let structure = FactorStructure {
        schema: STRUCTURE_SCHEMA.into(),
        m,
        conditions: conditions.to_vec(),
        condition_loadings: rotation.pattern,
        factor_corr: rotation.phi,
        correlation: r,
        score_means: means,
        score_sds: sds,
        dominant,
        question_ids: question_ids.to_vec(),
        question_texts: question_texts.to_vec(),
        question_loadings,
        question_mask,
        readout,
        warnings,
    };
    structure.validate()?;
    Ok(EfaOutput {
        structure,
        parallel,
    })
}
