//! Linear regression from text embeddings to condition scores, and the
//! discretization of per-answer scores into ordinal item responses.

use std::time::Duration;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::catalog::QuestionMap;
use crate::data::{ConditionScoreSet, EmbeddingKind, EmbeddingRecord, ResponseMatrix};
use crate::efa::quantile_sorted;
use crate::error::{EmbedError, Error, Result};
use crate::evaluation::pearson;
use crate::linalg::{Mat, Vector};

pub const MODEL_SCHEMA: &str = "mcat.model/v1";

/// Leading `d` components, rescaled to unit length.
pub fn truncate_embedding(v: &[f64], d: usize) -> Result<Vec<f64>> {
    if d == 0 || d > v.len() {
        return Err(Error::invalid(format!(
            "cannot truncate a {}-dimensional vector to {d}",
            v.len()
        )));
    }
    let head = &v[..d];
    let norm = head.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::invalid("cannot normalize a zero vector"));
    }
    Ok(head.iter().map(|x| x / norm).collect())
}

/// Which questions feed an aggregated input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuestionFilter {
    General,
    Condition(String),
    ConditionAndGeneral(String),
    All,
}

impl QuestionFilter {
    pub fn accepts(&self, map: &QuestionMap, question: &str) -> bool {
        match self {
            QuestionFilter::General => map.is_general(question),
            QuestionFilter::Condition(c) => map.targets(question, c),
            QuestionFilter::ConditionAndGeneral(c) => {
                map.is_general(question) || map.targets(question, c)
            }
            QuestionFilter::All => true,
        }
    }
}

/// Mean of the vectors whose question passes `filter`.
pub fn aggregate_input<'a, I>(rows: I, filter: &QuestionFilter, map: &QuestionMap) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = (&'a str, &'a [f64])>,
{
    let mut sum: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (q, v) in rows {
        if !filter.accepts(map, q) {
            continue;
        }
        if sum.is_empty() {
            sum = vec![0.0; v.len()];
        } else if sum.len() != v.len() {
            return Err(Error::Dimension {
                expected: sum.len(),
                got: v.len(),
            });
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid(format!("no responses pass filter {filter:?}")));
    }
    Ok(sum.into_iter().map(|s| s / n as f64).collect())
}

/// Per-output min-max scaling fitted on training targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    /// Fits on the non-`NaN` entries of each column.
    pub fn fit(y: &Mat, names: &[String]) -> Result<Self> {
        let mut min = Vec::with_capacity(y.ncols());
        let mut max = Vec::with_capacity(y.ncols());
        for c in 0..y.ncols() {
            let (lo, hi) = y
                .column(c)
                .iter()
                .filter(|v| !v.is_nan())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            if !(hi > lo) {
                let name = names.get(c).map_or("?", String::as_str);
                return Err(Error::invalid(format!(
                    "scaler: output `{name}` has min = max (constant or empty target)"
                )));
            }
            min.push(lo);
            max.push(hi);
        }
        Ok(Self { min, max })
    }

    pub fn scale(&self, c: usize, y: f64) -> f64 {
        (y - self.min[c]) / (self.max[c] - self.min[c])
    }

    pub fn unscale(&self, c: usize, s: f64) -> f64 {
        self.min[c] + s * (self.max[c] - self.min[c])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            weight_decay: 1e-4,
            epochs: 500,
            seed: 0,
        }
    }
}

/// `clamp(xᵀW + b)` in min-max-scaled target units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub outputs: Vec<String>,
    #[serde(with = "crate::linalg::serde_mat")]
    pub weights: Mat,
    pub bias: Vec<f64>,
    pub scaler: MinMaxScaler,
}

impl RegressionModel {
    pub fn d_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.weights.ncols()
    }
}

/// Masked mean-squared error over observed (non-`NaN`) targets with its
/// gradient in `W` and `b`.
pub fn loss_and_gradient(w: &Mat, b: &Vector, x: &Mat, y: &Mat) -> (f64, Mat, Vector) {
    let mut e = x * w;
    let mut n_obs = 0usize;
    for i in 0..e.nrows() {
        for o in 0..e.ncols() {
            if y[(i, o)].is_nan() {
                e[(i, o)] = 0.0;
            } else {
                e[(i, o)] += b[o] - y[(i, o)];
                n_obs += 1;
            }
        }
    }
    let n = n_obs.max(1) as f64;
    let loss = e.norm_squared() / n;
    let gw = x.transpose() * &e * (2.0 / n);
    let gb = Vector::from_iterator(e.ncols(), e.column_iter().map(|c| 2.0 * c.sum() / n));
    (loss, gw, gb)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One AdamW update; `decay[i]` marks parameters subject to weight decay.
    fn step(&mut self, params: &mut [f64], grad: &[f64], decay: &[bool], lr: f64, wd: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            if decay[i] {
                params[i] -= lr * wd * params[i];
            }
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

/// Full-batch AdamW on masked MSE of min-max-scaled targets. `y` holds raw
/// targets with `NaN` for missing entries.
pub fn train_regression(
    x: &Mat,
    y: &Mat,
    outputs: &[String],
    config: &RegressionConfig,
) -> Result<RegressionModel> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::invalid("regression needs at least two training rows"));
    }
    if y.nrows() != n {
        return Err(Error::Dimension {
            expected: n,
            got: y.nrows(),
        });
    }
    if outputs.len() != y.ncols() {
        return Err(Error::Dimension {
            expected: y.ncols(),
            got: outputs.len(),
        });
    }
    let o = y.ncols();
    let scaler = MinMaxScaler::fit(y, outputs)?;
    let ys = Mat::from_fn(n, o, |i, c| {
        let v = y[(i, c)];
        if v.is_nan() {
            f64::NAN
        } else {
            scaler.scale(c, v)
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, 0.01).expect("valid normal");
    let mut params: Vec<f64> = (0..d * o).map(|_| init.sample(&mut rng)).collect();
    for c in 0..o {
        let obs: Vec<f64> = ys.column(c).iter().copied().filter(|v| !v.is_nan()).collect();
        params.push(obs.iter().sum::<f64>() / obs.len() as f64);
    }
    let decay: Vec<bool> = (0..d * o + o).map(|i| i < d * o).collect();
    let mut adam = Adam::new(params.len());
    let mut grad = vec![0.0; params.len()];
    for _ in 0..config.epochs {
        let w = Mat::from_column_slice(d, o, &params[..d * o]);
        let b = Vector::from_column_slice(&params[d * o..]);
        let (_, gw, gb) = loss_and_gradient(&w, &b, x, &ys);
        grad[..d * o].copy_from_slice(gw.as_slice());
        grad[d * o..].copy_from_slice(gb.as_slice());
        adam.step(&mut params, &grad, &decay, config.lr, config.weight_decay);
    }
    Ok(RegressionModel {
        outputs: outputs.to_vec(),
        weights: Mat::from_column_slice(d, o, &params[..d * o]),
        bias: params[d * o..].to_vec(),
        scaler,
    })
}

/// Unclamped `xᵀW + b`.
pub fn predict_raw(model: &RegressionModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.d_in() {
        return Err(Error::Dimension {
            expected: model.d_in(),
            got: x.len(),
        });
    }
    Ok((0..model.n_out())
        .map(|o| {
            model.bias[o]
                + x.iter()
                    .enumerate()
                    .map(|(i, v)| v * model.weights[(i, o)])
                    .sum::<f64>()
        })
        .collect())
}

pub fn predict_scores(model: &RegressionModel, x: &[f64]) -> Result<Vec<f64>> {
    Ok(predict_raw(model, x)?
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect())
}

/// Per-condition mean of the predictions of that condition's questions;
/// conditions without an answered question are `None`.
pub fn aggregate_output(
    respondent: &str,
    predictions: &IndexMap<String, f64>,
    map: &QuestionMap,
    conditions: &[String],
) -> ConditionScoreSet {
    let scores = conditions
        .iter()
        .map(|c| {
            let vals: Vec<f64> = predictions
                .iter()
                .filter(|(q, _)| map.targets(q, c))
                .map(|(_, v)| *v)
                .collect();
            let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            (c.clone(), mean)
        })
        .collect();
    ConditionScoreSet::new(respondent, scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionThresholds {
    #[serde(rename = "K")]
    pub categories: usize,
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiscretizationSpec(pub IndexMap<String, QuestionThresholds>);

/// Thresholds at the `j/K` empirical quantiles of `predictions`. Falls back
/// to fewer categories (with a warning) while the quantiles are not strictly
/// increasing.
pub fn fit_thresholds(predictions: &[f64], k: usize) -> Result<(QuestionThresholds, Option<String>)> {
    if k < 2 {
        return Err(Error::invalid("need at least two categories"));
    }
    if predictions.is_empty() || predictions.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("threshold fitting needs finite predictions"));
    }
    let mut sorted = predictions.to_vec();
    sorted.sort_by(f64::total_cmp);
    for kk in (2..=k).rev() {
        let t: Vec<f64> = (1..kk).map(|j| quantile_sorted(&sorted, j as f64 / kk as f64)).collect();
        if t.windows(2).all(|w| w[0] < w[1]) && sorted[0] < sorted[sorted.len() - 1] {
            let warning = (kk < k).then(|| format!("reduced from {k} to {kk} categories"));
            return Ok((QuestionThresholds { categories: kk, thresholds: t }, warning));
        }
    }
    Ok((
        QuestionThresholds {
            categories: 1,
            thresholds: Vec::new(),
        },
        Some(format!("constant predictions: reduced from {k} to 1 category")),
    ))
}

/// `1 + #{thresholds strictly below score}`.
pub fn discretize(score: f64, spec: &QuestionThresholds) -> usize {
    1 + spec.thresholds.iter().filter(|&&t| t < score).count()
}

/// Source of embedding vectors for free text.
pub trait EmbeddingClient: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
}

/// Posts `{"text": …}` to an endpoint answering `{"vector": […]}`.
#[derive(Debug, Clone)]
pub struct HttpEmbeddingClient {
    url: String,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

impl HttpEmbeddingClient {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Self {
            url: url.into(),
            agent,
        }
    }
}

impl EmbeddingClient for HttpEmbeddingClient {
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let response = self
            .agent
            .post(&self.url)
            .send_json(EmbedRequest { text })
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => EmbedError::Timeout,
                other => EmbedError::Unavailable(other.to_string()),
            })?;
        let body: EmbedResponse = response
            .into_body()
            .read_json()
            .map_err(|e| EmbedError::Malformed(e.to_string()))?;
        if body.vector.is_empty() || body.vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::Malformed("empty or non-finite vector".into()));
        }
        Ok(body.vector)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Input,
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    AnswerOnly,
    QuestionPlusAnswer,
    QuestionIdOnehot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaCombine {
    Mean,
    Concat,
}

/// Turns one answer embedding into a regression input row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub input_mode: InputMode,
    pub qa_combine: QaCombine,
    pub truncate_dim: usize,
    /// One-hot column order for [`InputMode::QuestionIdOnehot`].
    #[serde(default)]
    pub question_ids: Vec<String>,
    /// Truncated question-text embeddings for [`InputMode::QuestionPlusAnswer`].
    #[serde(default)]
    pub question_vectors: IndexMap<String, Vec<f64>>,
}

impl FeatureSpec {
    pub fn d_in(&self) -> usize {
        match (self.input_mode, self.qa_combine) {
            (InputMode::AnswerOnly, _) | (InputMode::QuestionPlusAnswer, QaCombine::Mean) => {
                self.truncate_dim
            }
            (InputMode::QuestionPlusAnswer, QaCombine::Concat) => 2 * self.truncate_dim,
            (InputMode::QuestionIdOnehot, _) => self.truncate_dim + self.question_ids.len(),
        }
    }

    pub fn response_feature(&self, question: &str, answer: &[f64]) -> Result<Vec<f64>> {
        let a = truncate_embedding(answer, self.truncate_dim)?;
        match self.input_mode {
            InputMode::AnswerOnly => Ok(a),
            InputMode::QuestionPlusAnswer => {
                let q = self.question_vectors.get(question).ok_or_else(|| {
                    Error::invalid(format!("no question embedding for `{question}`"))
                })?;
                Ok(match self.qa_combine {
                    QaCombine::Mean => q.iter().zip(&a).map(|(x, y)| 0.5 * (x + y)).collect(),
                    QaCombine::Concat => q.iter().chain(&a).copied().collect(),
                })
            }
            InputMode::QuestionIdOnehot => {
                let pos = self
                    .question_ids
                    .iter()
                    .position(|q| q == question)
                    .ok_or_else(|| Error::UnknownItem(question.to_string()))?;
                let mut out = a;
                out.extend((0..self.question_ids.len()).map(|j| if j == pos { 1.0 } else { 0.0 }));
                Ok(out)
            }
        }
    }
}

/// A trained front end: features, one or more regressions and the
/// per-question discretization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainedModel {
    pub schema: String,
    pub conditions: Vec<String>,
    pub task: TaskMode,
    pub aggregation: Aggregation,
    pub features: FeatureSpec,
    pub question_map: QuestionMap,
    pub models: Vec<RegressionModel>,
    pub discretization: DiscretizationSpec,
}

impl TrainedModel {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.schema != MODEL_SCHEMA {
            return Err(Error::invalid(format!("unsupported model schema `{}`", m.schema)));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    /// All condition outputs for one feature row, in `conditions` order.
    pub fn predict_all(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.conditions.len());
        for m in &self.models {
            out.extend(predict_scores(m, x)?);
        }
        Ok(out)
    }

    /// Score of one answer for its own question: the mean of the outputs of
    /// the conditions it targets, or of all outputs for a general question.
    pub fn question_score(&self, question: &str, outputs: &[f64]) -> f64 {
        let targeted: Vec<f64> = self
            .conditions
            .iter()
            .zip(outputs)
            .filter(|(c, _)| self.question_map.targets(question, c))
            .map(|(_, v)| *v)
            .collect();
        let vals = if targeted.is_empty() { outputs.to_vec() } else { targeted };
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn score_vector(&self, question: &str, answer: &[f64]) -> Result<f64> {
        let x = self.features.response_feature(question, answer)?;
        Ok(self.question_score(question, &self.predict_all(&x)?))
    }
}

/// An answer given either as text (embedded through a client) or as a
/// precomputed embedding.
#[derive(Debug, Clone, Copy)]
pub enum AnswerInput<'a> {
    Text(&'a str),
    Vector(&'a [f64]),
}

/// Embed → truncate → predict → discretize for the question's own item.
pub fn score_answer(
    model: &TrainedModel,
    question: &str,
    answer: AnswerInput<'_>,
    client: Option<&dyn EmbeddingClient>,
) -> Result<usize> {
    let spec = model
        .discretization
        .0
        .get(question)
        .ok_or_else(|| Error::UnknownItem(question.to_string()))?;
    let owned;
    let vector = match answer {
        AnswerInput::Vector(v) => v,
        AnswerInput::Text(text) => {
            let client = client.ok_or(EmbedError::NotConfigured)?;
            owned = client.embed(text)?;
            &owned
        }
    };
    Ok(discretize(model.score_vector(question, vector)?, spec))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskMode,
    pub aggregation: Aggregation,
    pub input_mode: InputMode,
    pub qa_combine: QaCombine,
    pub truncate_dim: usize,
    pub categories: usize,
    pub category_overrides: IndexMap<String, usize>,
    pub folds: usize,
    pub regression: RegressionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TaskMode::Multi,
            aggregation: Aggregation::Input,
            input_mode: InputMode::AnswerOnly,
            qa_combine: QaCombine::Mean,
            truncate_dim: 16,
            categories: 4,
            category_overrides: IndexMap::new(),
            folds: 0,
            regression: RegressionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: usize,
    /// Pearson r on pooled out-of-fold predictions.
    pub pooled: IndexMap<String, Option<f64>>,
    /// Mean of per-fold Pearson r.
    pub fold_mean: IndexMap<String, Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: TrainedModel,
    /// Respondent-level predictions (out-of-fold when folds ≥ 2).
    pub user_scores: Vec<ConditionScoreSet>,
    /// Per-question predictions averaged over respondents, questions × conditions.
    pub question_ids: Vec<String>,
    pub question_scores: Mat,
    pub responses: ResponseMatrix,
    pub cross_validation: Option<CrossValidation>,
    pub warnings: Vec<String>,
}

/// Answer embeddings per respondent, in file order.
struct Corpus {
    respondents: Vec<String>,
    answers: Vec<IndexMap<String, Vec<f64>>>,
    question_ids: Vec<String>,
}

fn build_corpus(records: &[EmbeddingRecord]) -> Corpus {
    let mut index: IndexMap<String, IndexMap<String, Vec<f64>>> = IndexMap::new();
    let mut questions: IndexMap<String, ()> = IndexMap::new();
    for r in records {
        if r.kind == EmbeddingKind::Answer {
            index
                .entry(r.respondent.clone())
                .or_default()
                .insert(r.question.clone(), r.vector.clone());
            questions.insert(r.question.clone(), ());
        }
    }
    Corpus {
        respondents: index.keys().cloned().collect(),
        answers: index.into_values().collect(),
        question_ids: questions.into_keys().collect(),
    }
}

struct Fitted {
    models: Vec<RegressionModel>,
}

fn respondent_input(
    features: &[(String, Vec<f64>)],
    filter: &QuestionFilter,
    map: &QuestionMap,
) -> Option<Vec<f64>> {
    aggregate_input(
        features.iter().map(|(q, v)| (q.as_str(), v.as_slice())),
        filter,
        map,
    )
    .ok()
}

fn fit_models(
    rows: &[usize],
    feats: &[Vec<(String, Vec<f64>)>],
    targets: &Mat,
    conditions: &[String],
    map: &QuestionMap,
    config: &TrainConfig,
) -> Result<Fitted> {
    let d = feats
        .iter()
        .flat_map(|f| f.first())
        .map(|(_, v)| v.len())
        .next()
        .ok_or_else(|| Error::invalid("no answer embeddings"))?;
    let p = conditions.len();
    let build = |filter: &dyn Fn(usize) -> QuestionFilter, cols: &[usize]| -> Result<(Mat, Mat)> {
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        let mut n = 0;
        for &i in rows {
            match config.aggregation {
                Aggregation::Input => {
                    if let Some(x) = respondent_input(&feats[i], &filter(cols[0]), map) {
                        xs.extend(x);
                        ys.extend(cols.iter().map(|&c| targets[(i, c)]));
                        n += 1;
                    }
                }
                Aggregation::Output => {
                    for (q, v) in &feats[i] {
                        if filter(cols[0]).accepts(map, q) {
                            xs.extend(v);
                            ys.extend(cols.iter().map(|&c| targets[(i, c)]));
                            n += 1;
                        }
                    }
                }
            }
        }
        Ok((
            Mat::from_row_slice(n, d, &xs),
            Mat::from_row_slice(n, cols.len(), &ys),
        ))
    };
    let models = match config.task {
        TaskMode::Multi => {
            let cols: Vec<usize> = (0..p).collect();
            let (x, y) = build(&|_| QuestionFilter::All, &cols)?;
            vec![train_regression(&x, &y, conditions, &config.regression)?]
        }
        TaskMode::Single => (0..p)
            .map(|c| {
                let filt = |c: usize| QuestionFilter::ConditionAndGeneral(conditions[c].clone());
                let (x, y) = build(&filt, &[c])?;
                train_regression(&x, &y, &conditions[c..=c], &config.regression)
            })
            .collect::<Result<_>>()?,
    };
    Ok(Fitted { models })
}

fn predict_user(
    fitted: &Fitted,
    feats: &[(String, Vec<f64>)],
    conditions: &[String],
    map: &QuestionMap,
    aggregation: Aggregation,
    task: TaskMode,
) -> Result<Vec<Option<f64>>> {
    let p = conditions.len();
    match aggregation {
        Aggregation::Input => {
            let mut out = vec![None; p];
            match task {
                TaskMode::Multi => {
                    if let Some(x) = respondent_input(feats, &QuestionFilter::All, map) {
                        for (c, v) in predict_scores(&fitted.models[0], &x)?.into_iter().enumerate() {
                            out[c] = Some(v);
                        }
                    }
                }
                TaskMode::Single => {
                    for c in 0..p {
                        let filter = QuestionFilter::ConditionAndGeneral(conditions[c].clone());
                        if let Some(x) = respondent_input(feats, &filter, map) {
                            out[c] = Some(predict_scores(&fitted.models[c], &x)?[0]);
                        }
                    }
                }
            }
            Ok(out)
        }
        Aggregation::Output => {
            let mut out = vec![None; p];
            for c in 0..p {
                let mut vals = Vec::new();
                for (q, x) in feats {
                    if map.targets(q, &conditions[c]) {
                        let v = match task {
                            TaskMode::Multi => predict_scores(&fitted.models[0], x)?[c],
                            TaskMode::Single => predict_scores(&fitted.models[c], x)?[0],
                        };
                        vals.push(v);
                    }
                }
                if !vals.is_empty() {
                    out[c] = Some(vals.iter().sum::<f64>() / vals.len() as f64);
                }
            }
            Ok(out)
        }
    }
}

fn correlation_or_none(pairs: &[(f64, f64)]) -> Option<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    pearson(&x, &y).ok()
}

/// End-to-end training from answer/question embeddings and condition score
/// targets.
pub fn train(
    records: &[EmbeddingRecord],
    targets: &[ConditionScoreSet],
    conditions: &[String],
    config: &TrainConfig,
) -> Result<TrainOutput> {
    let corpus = build_corpus(records);
    if corpus.respondents.is_empty() {
        return Err(Error::invalid("no answer embeddings"));
    }
    let map = QuestionMap::by_prefix(&corpus.question_ids);
    let mut question_vectors = IndexMap::new();
    if config.input_mode == InputMode::QuestionPlusAnswer {
        for r in records.iter().filter(|r| r.kind == EmbeddingKind::Question) {
            if !question_vectors.contains_key(&r.question) {
                question_vectors.insert(r.question.clone(), truncate_embedding(&r.vector, config.truncate_dim)?);
            }
        }
    }
    let features = FeatureSpec {
        input_mode: config.input_mode,
        qa_combine: config.qa_combine,
        truncate_dim: config.truncate_dim,
        question_ids: if config.input_mode == InputMode::QuestionIdOnehot {
            corpus.question_ids.clone()
        } else {
            Vec::new()
        },
        question_vectors,
    };
    let feats: Vec<Vec<(String, Vec<f64>)>> = corpus
        .answers
        .iter()
        .map(|ans| {
            ans.iter()
                .map(|(q, v)| Ok((q.clone(), features.response_feature(q, v)?)))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    let by_id: IndexMap<&str, &ConditionScoreSet> =
        targets.iter().map(|t| (t.respondent.as_str(), t)).collect();
    let p = conditions.len();
    let n = corpus.respondents.len();
    let target_mat = Mat::from_fn(n, p, |i, c| {
        by_id
            .get(corpus.respondents[i].as_str())
            .and_then(|t| t.scores.get(&conditions[c]).copied().flatten())
            .unwrap_or(f64::NAN)
    });
    let labelled: Vec<usize> = (0..n)
        .filter(|&i| by_id.contains_key(corpus.respondents[i].as_str()))
        .collect();
    if labelled.len() < 2 {
        return Err(Error::invalid("fewer than two respondents have both embeddings and targets"));
    }

    let fitted = fit_models(&labelled, &feats, &target_mat, conditions, &map, config)?;
    let mut user_pred: Vec<Vec<Option<f64>>> = (0..n)
        .map(|i| predict_user(&fitted, &feats[i], conditions, &map, config.aggregation, config.task))
        .collect::<Result<_>>()?;

    let mut cross_validation = None;
    if config.folds >= 2 {
        let mut order = labelled.clone();
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(config.regression.seed);
        order.shuffle(&mut rng);
        let mut fold_r: Vec<Vec<f64>> = vec![Vec::new(); p];
        for f in 0..config.folds {
            let test: Vec<usize> = order.iter().copied().skip(f).step_by(config.folds).collect();
            let train_rows: Vec<usize> = order
                .iter()
                .enumerate()
                .filter(|(k, _)| k % config.folds != f)
                .map(|(_, &i)| i)
                .collect();
            let fold_model = fit_models(&train_rows, &feats, &target_mat, conditions, &map, config)?;
            let mut pairs: Vec<Vec<(f64, f64)>> = vec![Vec::new(); p];
            for &i in &test {
                let pred = predict_user(&fold_model, &feats[i], conditions, &map, config.aggregation, config.task)?;
                for c in 0..p {
                    if let (Some(v), t) = (pred[c], target_mat[(i, c)]) {
                        if !t.is_nan() {
                            pairs[c].push((v, t));
                        }
                    }
                }
                user_pred[i] = pred;
            }
            for c in 0..p {
                if let Some(r) = correlation_or_none(&pairs[c]) {
                    fold_r[c].push(r);
                }
            }
        }
        let mut pooled = IndexMap::new();
        let mut fold_mean = IndexMap::new();
        for c in 0..p {
            let pairs: Vec<(f64, f64)> = labelled
                .iter()
                .filter_map(|&i| {
                    let t = target_mat[(i, c)];
                    user_pred[i][c].filter(|_| !t.is_nan()).map(|v| (v, t))
                })
                .collect();
            pooled.insert(conditions[c].clone(), correlation_or_none(&pairs));
            let fr = &fold_r[c];
            fold_mean.insert(
                conditions[c].clone(),
                (!fr.is_empty()).then(|| fr.iter().sum::<f64>() / fr.len() as f64),
            );
        }
        cross_validation = Some(CrossValidation {
            folds: config.folds,
            pooled,
            fold_mean,
        });
    }

    let mut model = TrainedModel {
        schema: MODEL_SCHEMA.into(),
        conditions: conditions.to_vec(),
        task: config.task,
        aggregation: config.aggregation,
        features,
        question_map: map,
        models: fitted.models,
        discretization: DiscretizationSpec::default(),
    };

    // per-response outputs feed both the question-level profile and the
    // discretized item responses
    let qn = corpus.question_ids.len();
    let mut question_scores = Mat::zeros(qn, p);
    let mut per_question: Vec<Vec<(usize, f64)>> = vec![Vec::new(); qn];
    for (i, f) in feats.iter().enumerate() {
        for (q, x) in f {
            let j = corpus.question_ids.iter().position(|id| id == q).expect("indexed question");
            let outs = model.predict_all(x)?;
            for c in 0..p {
                question_scores[(j, c)] += outs[c];
            }
            per_question[j].push((i, model.question_score(q, &outs)));
        }
    }
    let mut warnings = Vec::new();
    let mut categories = Vec::with_capacity(qn);
    let mut cells = vec![None; n * qn];
    for (j, q) in corpus.question_ids.iter().enumerate() {
        let count = per_question[j].len().max(1) as f64;
        for c in 0..p {
            question_scores[(j, c)] /= count;
        }
        let k = config.category_overrides.get(q).copied().unwrap_or(config.categories);
        let scores: Vec<f64> = per_question[j].iter().map(|(_, s)| *s).collect();
        let (spec, warning) = fit_thresholds(&scores, k)?;
        if let Some(w) = warning {
            warnings.push(format!("question `{q}`: {w}"));
        }
        for &(i, s) in &per_question[j] {
            cells[i * qn + j] = Some(discretize(s, &spec) as u8);
        }
        categories.push(spec.categories.max(2));
        model.discretization.0.insert(q.clone(), spec);
    }
    let responses = ResponseMatrix::new(corpus.respondents.clone(), corpus.question_ids.clone(), categories, cells)?;
    let user_scores = corpus
        .respondents
        .iter()
        .zip(&user_pred)
        .map(|(r, pred)| {
            ConditionScoreSet::new(
                r.clone(),
                conditions.iter().cloned().zip(pred.iter().copied()).collect(),
            )
        })
        .collect();
    Ok(TrainOutput {
        model,
        user_scores,
        question_ids: corpus.question_ids,
        question_scores,
        responses,
        cross_validation,
        warnings,
    })
}
