//! Domain types shared by every stage of the pipeline, and the loaders for
//! item banks, response matrices, embeddings and condition-score targets.
//!
//! Items use the slope-intercept parameterization: the cumulative response
//! function for boundary `k` is `σ(a·θ + d_k)`. Difficulties relate to the
//! intercepts by `d = −a·b` in the unidimensional case.

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};

pub const BANK_SCHEMA: &str = "mcat.bank/v1";

/// The ten condition outputs, in the column order used by every matrix in
/// this crate.
pub const CONDITIONS: [&str; 10] = [
    "depression",
    "anxiety",
    "bipolar",
    "autism",
    "drug_use",
    "ocd",
    "adhd",
    "ptsd",
    "eating",
    "alcohol_use",
];

/// Multivariate normal prior over the latent traits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPrior {
    #[serde(with = "linalg::serde_vec")]
    pub mean: Vector,
    #[serde(rename = "cov", with = "linalg::serde_mat")]
    pub covariance: Mat,
}

impl LatentPrior {
    pub fn new(mean: Vector, covariance: Mat) -> Result<Self> {
        let m = mean.len();
        if m == 0 {
            return Err(Error::invalid("prior must have at least one dimension"));
        }
        if covariance.nrows() != m || covariance.ncols() != m {
            return Err(Error::Dimension {
                expected: m,
                got: covariance.nrows(),
            });
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("prior contains non-finite values"));
        }
        if !linalg::is_symmetric(&covariance, 1e-12) {
            return Err(Error::invalid("prior covariance is not symmetric"));
        }
        linalg::cholesky(&covariance)
            .map_err(|_| Error::invalid("prior covariance is not positive definite"))?;
        Ok(Self { mean, covariance })
    }

    /// Zero mean, identity covariance.
    pub fn standard(m: usize) -> Self {
        Self {
            mean: Vector::zeros(m),
            covariance: Mat::identity(m, m),
        }
    }

    /// Zero mean with the given correlation matrix as covariance.
    pub fn with_correlation(corr: Mat) -> Result<Self> {
        Self::new(Vector::zeros(corr.nrows()), corr)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn precision(&self) -> Mat {
        linalg::spd_inverse(&self.covariance).expect("validated at construction")
    }
}

/// A polytomous item under the multidimensional graded response model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradedItem {
    pub id: String,
    #[serde(default)]
    pub text: String,
    #[serde(rename = "K")]
    pub num_categories: usize,
    #[serde(rename = "a")]
    pub discrimination: Vec<f64>,
    #[serde(rename = "d")]
    pub intercepts: Vec<f64>,
    #[serde(rename = "mask")]
    pub factor_mask: Vec<bool>,
}

impl GradedItem {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        discrimination: Vec<f64>,
        intercepts: Vec<f64>,
        factor_mask: Vec<bool>,
    ) -> Result<Self> {
        let item = Self {
            id: id.into(),
            text: text.into(),
            num_categories: intercepts.len() + 1,
            discrimination,
            intercepts,
            factor_mask,
        };
        item.validate()?;
        Ok(item)
    }

    /// Item whose mask is inferred from the nonzero discrimination entries.
    pub fn unmasked(
        id: impl Into<String>,
        discrimination: Vec<f64>,
        intercepts: Vec<f64>,
    ) -> Result<Self> {
        let mask = discrimination.iter().map(|&a| a != 0.0).collect();
        Self::new(id, "", discrimination, intercepts, mask)
    }

    pub fn dim(&self) -> usize {
        self.discrimination.len()
    }

    fn fail(&self, field: &'static str, message: impl Into<String>) -> Error {
        Error::InvalidItem {
            item: self.id.clone(),
            field,
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(self.fail("id", "empty id"));
        }
        if self.num_categories < 2 {
            return Err(self.fail("K", "at least two categories required"));
        }
        if self.intercepts.len() != self.num_categories - 1 {
            return Err(self.fail(
                "d",
                format!(
                    "expected {} intercepts for K={}, got {}",
                    self.num_categories - 1,
                    self.num_categories,
                    self.intercepts.len()
                ),
            ));
        }
        if self.intercepts.iter().any(|d| !d.is_finite()) {
            return Err(self.fail("d", "non-finite intercept"));
        }
        if self.intercepts.windows(2).any(|w| w[0] <= w[1]) {
            return Err(self.fail("d", "intercepts not strictly decreasing"));
        }
        if self.discrimination.is_empty() {
            return Err(self.fail("a", "empty discrimination vector"));
        }
        if self.discrimination.iter().any(|a| !a.is_finite()) {
            return Err(self.fail("a", "non-finite discrimination"));
        }
        if self.factor_mask.len() != self.discrimination.len() {
            return Err(self.fail("mask", "mask length differs from discrimination length"));
        }
        for (k, (&a, &free)) in self
            .discrimination
            .iter()
            .zip(&self.factor_mask)
            .enumerate()
        {
            if free && a == 0.0 {
                return Err(self.fail("a", format!("a[{k}] is zero but mask[{k}] is set")));
            }
            if !free && a != 0.0 {
                return Err(self.fail("a", format!("a[{k}] is nonzero but mask[{k}] is clear")));
            }
        }
        Ok(())
    }
}

/// Calibrated item bank: the measurement model used by adaptive sessions.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemBank {
    items: Vec<GradedItem>,
    prior: LatentPrior,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankFile {
    schema: String,
    m: usize,
    prior: LatentPrior,
    items: Vec<GradedItem>,
}

impl ItemBank {
    pub fn new(items: Vec<GradedItem>, prior: LatentPrior) -> Result<Self> {
        let m = prior.dim();
        let mut index = HashMap::with_capacity(items.len());
        for (j, item) in items.iter().enumerate() {
            item.validate()?;
            if item.dim() != m {
                return Err(Error::InvalidItem {
                    item: item.id.clone(),
                    field: "a",
                    message: format!("dimension {} differs from bank dimension {m}", item.dim()),
                });
            }
            if index.insert(item.id.clone(), j).is_some() {
                return Err(Error::InvalidItem {
                    item: item.id.clone(),
                    field: "id",
                    message: "duplicate item id".into(),
                });
            }
        }
        Ok(Self {
            items,
            prior,
            index,
        })
    }

    pub fn items(&self) -> &[GradedItem] {
        &self.items
    }

    pub fn prior(&self) -> &LatentPrior {
        &self.prior
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&GradedItem> {
        self.index_of(id).map(|j| &self.items[j])
    }

    pub fn item(&self, j: usize) -> &GradedItem {
        &self.items[j]
    }

    pub fn with_prior(&self, prior: LatentPrior) -> Result<Self> {
        Self::new(self.items.clone(), prior)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: BankFile = serde_json::from_str(s).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if file.schema != BANK_SCHEMA {
            return Err(Error::invalid(format!(
                "unsupported bank schema `{}` (expected `{BANK_SCHEMA}`)",
                file.schema
            )));
        }
        let prior = LatentPrior::new(file.prior.mean, file.prior.covariance)?;
        if prior.dim() != file.m {
            return Err(Error::Dimension {
                expected: file.m,
                got: prior.dim(),
            });
        }
        Self::new(file.items, prior)
    }

    /// Canonical serialization: pretty JSON with shortest round-trip floats
    /// and a trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let file = BankFile {
            schema: BANK_SCHEMA.to_string(),
            m: self.dim(),
            prior: self.prior.clone(),
            items: self.items.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("bank serializes");
        s.push('\n');
        s
    }

    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(self.to_canonical_json().as_bytes())?;
        Ok(())
    }
}

pub fn load_item_bank<R: Read>(mut source: R) -> Result<ItemBank> {
    let mut s = String::new();
    source.read_to_string(&mut s)?;
    ItemBank::from_json_str(&s)
}

/// Resolves the category count of an item id when validating responses.
pub trait CategoryLookup {
    fn categories(&self, item: &str) -> Option<usize>;
}

impl CategoryLookup for ItemBank {
    fn categories(&self, item: &str) -> Option<usize> {
        self.get(item).map(|it| it.num_categories)
    }
}

impl CategoryLookup for HashMap<String, usize> {
    fn categories(&self, item: &str) -> Option<usize> {
        self.get(item).copied()
    }
}

/// Every item has the same number of categories.
#[derive(Debug, Clone, Copy)]
pub struct UniformCategories(pub usize);

impl CategoryLookup for UniformCategories {
    fn categories(&self, _item: &str) -> Option<usize> {
        Some(self.0)
    }
}

/// Dense respondent × item matrix of ordinal categories (1-based);
/// `None` marks a missing response.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    respondents: Vec<String>,
    items: Vec<String>,
    categories: Vec<usize>,
    cells: Vec<Option<u8>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponseRow {
    respondent: String,
    item: String,
    category: Option<i64>,
}

#[derive(Serialize)]
struct ResponseRowOut<'a> {
    respondent: &'a str,
    item: &'a str,
    category: u8,
}

impl ResponseMatrix {
    pub fn new(
        respondents: Vec<String>,
        items: Vec<String>,
        categories: Vec<usize>,
        cells: Vec<Option<u8>>,
    ) -> Result<Self> {
        if categories.len() != items.len() {
            return Err(Error::Dimension {
                expected: items.len(),
                got: categories.len(),
            });
        }
        if cells.len() != respondents.len() * items.len() {
            return Err(Error::Dimension {
                expected: respondents.len() * items.len(),
                got: cells.len(),
            });
        }
        let m = Self {
            respondents,
            items,
            categories,
            cells,
        };
        for i in 0..m.n_respondents() {
            for j in 0..m.n_items() {
                if let Some(c) = m.get(i, j) {
                    if c == 0 || c as usize > m.categories[j] {
                        return Err(Error::Invalid(format!(
                            "category {c} outside 1..={} for item `{}`",
                            m.categories[j], m.items[j]
                        )));
                    }
                }
            }
        }
        Ok(m)
    }

    pub fn n_respondents(&self) -> usize {
        self.respondents.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn respondents(&self) -> &[String] {
        &self.respondents
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn categories(&self) -> &[usize] {
        &self.categories
    }

    pub fn get(&self, respondent: usize, item: usize) -> Option<u8> {
        self.cells[respondent * self.items.len() + item]
    }

    pub fn row(&self, respondent: usize) -> &[Option<u8>] {
        let j = self.items.len();
        &self.cells[respondent * j..(respondent + 1) * j]
    }

    pub fn observed_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Restricts to the given item columns, in the given order.
    pub fn select_items(&self, ids: &[String]) -> Result<Self> {
        let cols: Vec<usize> = ids
            .iter()
            .map(|id| {
                self.items
                    .iter()
                    .position(|x| x == id)
                    .ok_or_else(|| Error::UnknownItem(id.clone()))
            })
            .collect::<Result<_>>()?;
        let mut cells = Vec::with_capacity(self.n_respondents() * cols.len());
        for i in 0..self.n_respondents() {
            cells.extend(cols.iter().map(|&j| self.get(i, j)));
        }
        Self::new(
            self.respondents.clone(),
            ids.to_vec(),
            cols.iter().map(|&j| self.categories[j]).collect(),
            cells,
        )
    }

    /// JSONL with one row per observed cell, respondents then items in order.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for i in 0..self.n_respondents() {
            for j in 0..self.n_items() {
                if let Some(category) = self.get(i, j) {
                    let row = ResponseRowOut {
                        respondent: &self.respondents[i],
                        item: &self.items[j],
                        category,
                    };
                    serde_json::to_writer(&mut out, &row)?;
                    out.write_all(b"\n")?;
                }
            }
        }
        Ok(())
    }
}

/// Reads `{respondent, item, category}` JSONL rows into a dense matrix.
/// Respondents and items are ordered by first appearance; absent cells and
/// `"category": null` are missing.
pub fn load_response_matrix<R: BufRead, C: CategoryLookup + ?Sized>(
    source: R,
    lookup: &C,
) -> Result<ResponseMatrix> {
    let mut respondents: IndexMap<String, ()> = IndexMap::new();
    let mut items: IndexMap<String, usize> = IndexMap::new();
    let mut entries: Vec<(usize, usize, Option<u8>, usize)> = Vec::new();
    for (lineno, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: ResponseRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let k = match items.get(&row.item) {
            Some(&k) => k,
            None => {
                let k = lookup
                    .categories(&row.item)
                    .ok_or_else(|| Error::UnknownItem(row.item.clone()))?;
                items.insert(row.item.clone(), k);
                k
            }
        };
        let category = match row.category {
            None => None,
            Some(c) if c >= 1 && c as usize <= k && c <= u8::MAX as i64 => Some(c as u8),
            Some(c) => {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("category {c} outside 1..={k} for item `{}`", row.item),
                })
            }
        };
        let (ri, _) = respondents.insert_full(row.respondent, ());
        let ji = items.get_index_of(&row.item).expect("inserted above");
        entries.push((ri, ji, category, lineno));
    }
    let n = respondents.len();
    let j = items.len();
    let mut cells = vec![None; n * j];
    let mut seen = vec![false; n * j];
    for (ri, ji, category, lineno) in entries {
        let idx = ri * j + ji;
        if seen[idx] {
            return Err(Error::Parse {
                line: lineno,
                message: format!(
                    "duplicate cell ({}, {})",
                    respondents.get_index(ri).unwrap().0,
                    items.get_index(ji).unwrap().0
                ),
            });
        }
        seen[idx] = true;
        cells[idx] = category;
    }
    ResponseMatrix::new(
        respondents.into_keys().collect(),
        items.keys().cloned().collect(),
        items.values().copied().collect(),
        cells,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Question,
    Answer,
    QuestionAnswer,
}

/// Precomputed text embedding for one respondent's question or answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub respondent: String,
    pub question: String,
    pub kind: EmbeddingKind,
    pub vector: Vec<f64>,
}

pub fn load_embeddings<R: BufRead>(source: R) -> Result<Vec<EmbeddingRecord>> {
    let mut out: Vec<EmbeddingRecord> = Vec::new();
    for (lineno, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if rec.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: lineno + 1,
                message: "non-finite embedding value".into(),
            });
        }
        if let Some(first) = out.first() {
            if first.vector.len() != rec.vector.len() {
                return Err(Error::Dimension {
                    expected: first.vector.len(),
                    got: rec.vector.len(),
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// Groups records by respondent, keeping first-appearance order of
/// respondents and file order within each group.
pub fn group_by_respondent(records: &[EmbeddingRecord]) -> IndexMap<&str, Vec<&EmbeddingRecord>> {
    let mut groups: IndexMap<&str, Vec<&EmbeddingRecord>> = IndexMap::new();
    for r in records {
        groups.entry(r.respondent.as_str()).or_default().push(r);
    }
    groups
}

/// Per-respondent condition scores (min-max scaled units); `None` marks a
/// flagged missing value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionScoreSet {
    pub respondent: String,
    pub scores: IndexMap<String, Option<f64>>,
}

impl ConditionScoreSet {
    pub fn new(respondent: impl Into<String>, scores: IndexMap<String, Option<f64>>) -> Self {
        Self {
            respondent: respondent.into(),
            scores,
        }
    }

    /// Checks that exactly `conditions` are present; missing values are
    /// rejected unless `allow_missing`.
    pub fn validate(&self, conditions: &[String], allow_missing: bool) -> Result<()> {
        if self.scores.len() != conditions.len()
            || conditions.iter().any(|c| !self.scores.contains_key(c))
        {
            return Err(Error::Invalid(format!(
                "respondent `{}`: score set does not match configured conditions",
                self.respondent
            )));
        }
        for (c, v) in &self.scores {
            match v {
                None if !allow_missing => {
                    return Err(Error::Invalid(format!(
                        "respondent `{}`: missing score for `{c}`",
                        self.respondent
                    )))
                }
                Some(v) if !v.is_finite() => {
                    return Err(Error::Invalid(format!(
                        "respondent `{}`: non-finite score for `{c}`",
                        self.respondent
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Values in the order of `conditions`.
    pub fn values(&self, conditions: &[String]) -> Vec<Option<f64>> {
        conditions
            .iter()
            .map(|c| self.scores.get(c).copied().flatten())
            .collect()
    }
}

pub fn load_condition_scores<R: BufRead>(source: R) -> Result<Vec<ConditionScoreSet>> {
    let mut out = Vec::new();
    for (lineno, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<W: Write, T: Serialize>(mut out: W, rows: &[T]) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Point estimate of the latent traits with its covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    #[serde(with = "linalg::serde_vec")]
    pub theta: Vector,
    #[serde(with = "linalg::serde_mat")]
    pub covariance: Mat,
    /// Log-likelihood of the responses at `theta` (prior term excluded).
    pub log_likelihood: f64,
    /// Set when maximum likelihood diverged and the MAP estimate was used.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ml_fallback: bool,
}

impl ThetaEstimate {
    pub fn standard_errors(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().map(|v| v.sqrt()).collect()
    }
}
