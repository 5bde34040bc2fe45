//! Adaptive sessions: D-optimal question selection, trait estimation after
//! every answer, per-condition readout and stopping.

use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{ConditionScoreSet, ItemBank, LatentPrior, ThetaEstimate};
use crate::efa::{ConditionScale, FactorStructure};
use crate::error::{Error, Result, SessionError};
use crate::grm::{accumulated_information, information_weight, linear_predictor, log_prob_derivs};
use crate::linalg::{self, Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    Map,
    Ml,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoppingConfig {
    pub rolling_window: usize,
    pub sd_threshold: f64,
    pub min_items: usize,
    /// Defaults to the bank size.
    pub max_items: Option<usize>,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        Self {
            rolling_window: 5,
            sd_threshold: 0.01,
            min_items: 5,
            max_items: None,
        }
    }
}

impl StoppingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rolling_window < 2 {
            return Err(Error::invalid("rolling_window must be at least 2"));
        }
        if self.min_items < self.rolling_window {
            return Err(Error::invalid("min_items must be at least rolling_window"));
        }
        if !(self.sd_threshold > 0.0) {
            return Err(Error::invalid("sd_threshold must be positive"));
        }
        if self.max_items == Some(0) {
            return Err(Error::invalid("max_items must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub stopping: StoppingConfig,
    pub estimator: Estimator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    PoolEmpty,
    MaxItems,
    Stabilized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Stopped { reason: StopReason },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Administered {
    pub question: String,
    pub category: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub bank_id: String,
    pub config: SessionConfig,
    pub administered: Vec<Administered>,
    pub theta_history: Vec<ThetaEstimate>,
    pub condition_history: Vec<ConditionScoreSet>,
    pub status: SessionStatus,
    pub pending: Option<String>,
}

impl Session {
    pub fn is_active(&self) -> bool {
        self.status == SessionStatus::Active
    }

    pub fn current(&self) -> &ThetaEstimate {
        self.theta_history.last().expect("history starts with the prior")
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        match self.status {
            SessionStatus::Stopped { reason } => Some(reason),
            SessionStatus::Active => None,
        }
    }
}

/// Linear readout `score_c = clamp(scale_c(Λ_c · θ), 0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub conditions: Vec<String>,
    #[serde(with = "linalg::serde_mat")]
    pub loadings: Mat,
    pub scales: Vec<ConditionScale>,
}

impl Readout {
    pub fn new(conditions: Vec<String>, loadings: Mat, scales: Vec<ConditionScale>) -> Result<Self> {
        if loadings.nrows() != conditions.len() || scales.len() != conditions.len() {
            return Err(Error::Dimension {
                expected: conditions.len(),
                got: loadings.nrows(),
            });
        }
        Ok(Self {
            conditions,
            loadings,
            scales,
        })
    }

    pub fn from_structure(structure: &FactorStructure) -> Result<Self> {
        Self::new(
            structure.conditions.clone(),
            structure.condition_loadings.clone(),
            structure.readout.clone(),
        )
    }

    pub fn dim(&self) -> usize {
        self.loadings.ncols()
    }

    /// `Λ_c · θ` for every condition, before the affine map.
    pub fn raw_projection(&self, theta: &Vector) -> Vec<f64> {
        (&self.loadings * theta).iter().copied().collect()
    }

    pub fn scores(&self, theta: &Vector) -> Vec<f64> {
        self.raw_projection(theta)
            .into_iter()
            .zip(&self.scales)
            .map(|(r, s)| s.apply(r).clamp(0.0, 1.0))
            .collect()
    }
}

pub fn condition_scores(respondent: &str, theta: &ThetaEstimate, readout: &Readout) -> ConditionScoreSet {
    let scores: IndexMap<String, Option<f64>> = readout
        .conditions
        .iter()
        .cloned()
        .zip(readout.scores(&theta.theta).into_iter().map(Some))
        .collect();
    ConditionScoreSet::new(respondent, scores)
}

const ML_DIVERGENCE_NORM: f64 = 15.0;
const GRAD_TOL: f64 = 1e-8;

struct Objective<'a> {
    bank: &'a ItemBank,
    responses: &'a [(usize, usize)],
    prior: Option<(&'a Vector, Mat)>,
}

impl Objective<'_> {
    /// Penalized log-likelihood, data log-likelihood, gradient, Hessian.
    fn eval(&self, theta: &Vector) -> (f64, f64, Vector, Mat) {
        let m = theta.len();
        let mut ll = 0.0;
        let mut g = Vector::zeros(m);
        let mut h = Mat::zeros(m, m);
        for &(j, k) in self.responses {
            let item = self.bank.item(j);
            let (lp, d1, d2) = log_prob_derivs(item, linear_predictor(item, theta.as_slice()), k);
            ll += lp;
            let a = Vector::from_column_slice(&item.discrimination);
            g.axpy(d1, &a, 1.0);
            h += &a * a.transpose() * d2;
        }
        let mut f = ll;
        if let Some((mu, prec)) = &self.prior {
            let diff = theta - *mu;
            let pd = prec * &diff;
            f -= 0.5 * diff.dot(&pd);
            g -= pd;
            h -= prec;
        }
        (f, ll, g, h)
    }
}

/// Newton ascent with step halving. Returns `None` when the Hessian stops
/// being negative definite, the iterate runs away, or it fails to converge.
fn newton(obj: &Objective<'_>, start: &Vector, guard_norm: Option<f64>) -> Option<(Vector, f64, Mat)> {
    let mut theta = start.clone();
    let (mut f, _, mut g, mut h) = obj.eval(&theta);
    for _ in 0..200 {
        if g.norm() < GRAD_TOL {
            return Some((theta, f, h));
        }
        let neg = -&h;
        let step = neg.cholesky()?.solve(&g);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand = &theta + &step * t;
            let (fc, _, gc, hc) = obj.eval(&cand);
            // within rounding of f, a smaller gradient is still progress
            let slack = 64.0 * f64::EPSILON * (f.abs() + 1.0);
            if fc.is_finite() && (fc >= f || (fc >= f - slack && gc.norm() < g.norm())) {
                moved = fc > f || gc.norm() < g.norm();
                theta = cand;
                f = fc;
                g = gc;
                h = hc;
                break;
            }
            t *= 0.5;
        }
        if let Some(limit) = guard_norm {
            if theta.norm() > limit {
                return None;
            }
        }
        if !moved {
            // at the floating-point optimum the objective no longer changes
            return (g.norm() < 1e-6).then_some((theta, f, h));
        }
    }
    (g.norm() < GRAD_TOL).then_some((theta, f, h))
}

/// Trait estimate from `(bank index, category)` pairs.
pub fn estimate_theta(
    bank: &ItemBank,
    responses: &[(usize, usize)],
    method: Estimator,
    prior: &LatentPrior,
) -> Result<ThetaEstimate> {
    let m = bank.dim();
    if prior.dim() != m {
        return Err(Error::Dimension {
            expected: m,
            got: prior.dim(),
        });
    }
    for &(j, k) in responses {
        if j >= bank.len() {
            return Err(Error::invalid(format!("item index {j} outside the bank")));
        }
        let kk = bank.item(j).num_categories;
        if k == 0 || k > kk {
            return Err(SessionError::CategoryRange {
                item: bank.item(j).id.clone(),
                category: k,
                max: kk,
            }
            .into());
        }
    }
    if method == Estimator::Ml {
        if responses.is_empty() {
            return Err(Error::invalid("maximum likelihood needs at least one response"));
        }
        let obj = Objective {
            bank,
            responses,
            prior: None,
        };
        if let Some((theta, _, h)) = newton(&obj, &prior.mean, Some(ML_DIVERGENCE_NORM)) {
            if let Ok(cov) = linalg::spd_inverse(&-h) {
                let (_, ll, _, _) = obj.eval(&theta);
                return Ok(ThetaEstimate {
                    theta,
                    covariance: cov,
                    log_likelihood: ll,
                    ml_fallback: false,
                });
            }
        }
        let mut est = estimate_theta(bank, responses, Estimator::Map, prior)?;
        est.ml_fallback = true;
        return Ok(est);
    }
    let obj = Objective {
        bank,
        responses,
        prior: Some((&prior.mean, prior.precision())),
    };
    if responses.is_empty() {
        return Ok(ThetaEstimate {
            theta: prior.mean.clone(),
            covariance: prior.covariance.clone(),
            log_likelihood: 0.0,
            ml_fallback: false,
        });
    }
    let (theta, _, h) = newton(&obj, &prior.mean, None)
        .ok_or_else(|| Error::Numerical("MAP estimation did not converge".into()))?;
    let (_, ll, _, _) = obj.eval(&theta);
    Ok(ThetaEstimate {
        theta,
        covariance: linalg::spd_inverse(&-h)?,
        log_likelihood: ll,
        ml_fallback: false,
    })
}

/// `c_j · a_jᵀ B⁻¹ a_j` for every remaining item, where `B` is the prior
/// precision plus the information already accumulated at `theta`. By the
/// matrix determinant lemma, `det(B + I_j) = det(B)(1 + score_j)`.
pub fn selection_scores(
    bank: &ItemBank,
    administered: &[usize],
    theta: &Vector,
    prior: &LatentPrior,
) -> Result<Vec<(usize, f64)>> {
    let b = prior.precision() + accumulated_information(bank, administered, theta.as_slice());
    let b_inv = linalg::spd_inverse(&b)?;
    let mut taken = vec![false; bank.len()];
    for &j in administered {
        taken[j] = true;
    }
    Ok((0..bank.len())
        .filter(|&j| !taken[j])
        .map(|j| {
            let item = bank.item(j);
            let a = Vector::from_column_slice(&item.discrimination);
            let c = information_weight(item, linear_predictor(item, theta.as_slice()));
            (j, c * a.dot(&(&b_inv * &a)))
        })
        .collect())
}

/// D-optimal choice; ties go to the lowest bank index.
pub fn select_d_optimal(
    bank: &ItemBank,
    administered: &[usize],
    theta: &Vector,
    prior: &LatentPrior,
) -> Result<Option<usize>> {
    let scores = selection_scores(bank, administered, theta, prior)?;
    let mut best: Option<(usize, f64)> = None;
    for (j, s) in scores {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((j, s));
        }
    }
    Ok(best.map(|(j, _)| j))
}

/// Sample standard deviation (n − 1).
pub fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Owns the bank and readout shared by many sessions.
#[derive(Debug, Clone)]
pub struct Engine {
    bank: Arc<ItemBank>,
    bank_id: String,
    readout: Arc<Readout>,
}

impl Engine {
    pub fn new(bank: Arc<ItemBank>, bank_id: impl Into<String>, readout: Readout) -> Result<Self> {
        if readout.dim() != bank.dim() {
            return Err(Error::Dimension {
                expected: bank.dim(),
                got: readout.dim(),
            });
        }
        Ok(Self {
            bank,
            bank_id: bank_id.into(),
            readout: Arc::new(readout),
        })
    }

    pub fn bank(&self) -> &ItemBank {
        &self.bank
    }

    pub fn bank_id(&self) -> &str {
        &self.bank_id
    }

    pub fn readout(&self) -> &Readout {
        &self.readout
    }

    fn max_items(&self, config: &SessionConfig) -> usize {
        config.stopping.max_items.unwrap_or(self.bank.len()).min(self.bank.len())
    }

    pub fn start_session(&self, id: impl Into<String>, config: SessionConfig) -> Result<Session> {
        if self.bank.is_empty() {
            return Err(SessionError::EmptyBank.into());
        }
        config.stopping.validate()?;
        let id = id.into();
        let prior = self.bank.prior();
        let theta0 = ThetaEstimate {
            theta: prior.mean.clone(),
            covariance: prior.covariance.clone(),
            log_likelihood: 0.0,
            ml_fallback: false,
        };
        let scores0 = condition_scores(&id, &theta0, &self.readout);
        Ok(Session {
            id,
            bank_id: self.bank_id.clone(),
            config,
            administered: Vec::new(),
            theta_history: vec![theta0],
            condition_history: vec![scores0],
            status: SessionStatus::Active,
            pending: None,
        })
    }

    fn administered_indices(&self, session: &Session) -> Result<Vec<usize>> {
        session
            .administered
            .iter()
            .map(|a| {
                self.bank
                    .index_of(&a.question)
                    .ok_or_else(|| Error::UnknownItem(a.question.clone()))
            })
            .collect()
    }

    /// Picks (or repeats) the pending question.
    pub fn select_next(&self, session: &mut Session) -> Result<String> {
        if !session.is_active() {
            return Err(SessionError::Stopped.into());
        }
        if let Some(p) = &session.pending {
            return Ok(p.clone());
        }
        let done = self.administered_indices(session)?;
        let j = select_d_optimal(&self.bank, &done, &session.current().theta, self.bank.prior())?
            .ok_or(SessionError::PoolEmpty)?;
        let id = self.bank.item(j).id.clone();
        session.pending = Some(id.clone());
        Ok(id)
    }

    pub fn submit_response(&self, session: &mut Session, question: &str, category: usize) -> Result<()> {
        self.submit_response_at(session, question, category, None)
    }

    /// Records an answer to the pending question, re-estimates θ, appends
    /// the readout and evaluates the stopping rule. The session is left
    /// untouched on error.
    pub fn submit_response_at(
        &self,
        session: &mut Session,
        question: &str,
        category: usize,
        timestamp_ms: Option<u64>,
    ) -> Result<()> {
        if !session.is_active() {
            return Err(SessionError::Stopped.into());
        }
        if session.pending.as_deref() != Some(question) {
            if session.administered.iter().any(|a| a.question == question) {
                return Err(SessionError::Duplicate(question.to_string()).into());
            }
            return Err(SessionError::OutOfOrder {
                pending: session.pending.clone(),
                got: question.to_string(),
            }
            .into());
        }
        let j = self
            .bank
            .index_of(question)
            .ok_or_else(|| Error::UnknownItem(question.to_string()))?;
        let kk = self.bank.item(j).num_categories;
        if category == 0 || category > kk {
            return Err(SessionError::CategoryRange {
                item: question.to_string(),
                category,
                max: kk,
            }
            .into());
        }
        let mut responses: Vec<(usize, usize)> = self
            .administered_indices(session)?
            .into_iter()
            .zip(session.administered.iter().map(|a| a.category))
            .collect();
        responses.push((j, category));
        let est = estimate_theta(&self.bank, &responses, session.config.estimator, self.bank.prior())?;
        let scores = condition_scores(&session.id, &est, &self.readout);

        session.administered.push(Administered {
            question: question.to_string(),
            category,
            timestamp_ms,
        });
        session.theta_history.push(est);
        session.condition_history.push(scores);
        session.pending = None;
        if let Some(reason) = self.check_stop(session) {
            session.status = SessionStatus::Stopped { reason };
        }
        Ok(())
    }

    /// Stop reason, if the session should stop now.
    pub fn check_stop(&self, session: &Session) -> Option<StopReason> {
        let n = session.administered.len();
        let cfg = &session.config.stopping;
        if n >= self.bank.len() {
            return Some(StopReason::PoolEmpty);
        }
        if n >= self.max_items(&session.config) {
            return Some(StopReason::MaxItems);
        }
        let w = cfg.rolling_window;
        if n >= cfg.min_items && session.condition_history.len() >= w {
            let tail = &session.condition_history[session.condition_history.len() - w..];
            let stable = self.readout.conditions.iter().all(|c| {
                let series: Vec<f64> = tail
                    .iter()
                    .map(|s| s.scores.get(c).copied().flatten().unwrap_or(f64::NAN))
                    .collect();
                sample_sd(&series) < cfg.sd_threshold
            });
            if stable {
                return Some(StopReason::Stabilized);
            }
        }
        None
    }

    /// Runs a session to completion, answering each selected question with
    /// `answer`.
    pub fn run_scripted<F>(&self, id: &str, config: SessionConfig, mut answer: F) -> Result<Session>
    where
        F: FnMut(&str) -> usize,
    {
        let mut s = self.start_session(id, config)?;
        while s.is_active() {
            let q = self.select_next(&mut s)?;
            let k = answer(&q);
            self.submit_response(&mut s, &q, k)?;
        }
        Ok(s)
    }
}
