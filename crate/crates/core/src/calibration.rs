//! Marginal maximum-likelihood calibration of graded items by EM over
//! fixed integration nodes.
//!
//! Intercepts are optimized as `φ = (d₁, η₂, …, η_{K−1})` with
//! `d_b = d₁ − Σ_{c≤b} exp(η_c)`, which keeps them strictly decreasing.
//! Each M-step takes damped Newton steps that are only accepted when the
//! expected complete-data log-likelihood does not decrease, so the marginal
//! log-likelihood is monotone across iterations.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{GradedItem, ItemBank, LatentPrior, ResponseMatrix};
use crate::efa::FactorStructure;
use crate::error::{Error, Result};
use crate::grm::{category_prob_at, sigmoid, PROB_FLOOR};
use crate::linalg::{Mat, Vector};
use crate::quadrature::{gauss_hermite_nodes, halton_nodes_shifted, Nodes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureKind {
    QmcHalton,
    GaussHermite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub quadrature: QuadratureKind,
    /// Total node count. Gauss–Hermite uses `⌊num_nodes^(1/m)⌋` points per axis.
    pub num_nodes: usize,
    pub max_em_iters: usize,
    pub em_tol: f64,
    pub newton_iters: usize,
    pub ridge: f64,
    /// Apply a seeded random shift (mod 1) to the Halton points.
    pub randomized_qmc: bool,
    pub seed: Option<u64>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            quadrature: QuadratureKind::QmcHalton,
            num_nodes: 2048,
            max_em_iters: 500,
            em_tol: 1e-4,
            newton_iters: 4,
            ridge: 1e-4,
            randomized_qmc: false,
            seed: None,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_nodes < 16 {
            return Err(Error::invalid("num_nodes must be at least 16"));
        }
        if !(self.em_tol > 0.0) || !(self.ridge > 0.0) {
            return Err(Error::invalid("em_tol and ridge must be positive"));
        }
        if self.max_em_iters == 0 || self.newton_iters == 0 {
            return Err(Error::invalid("iteration limits must be positive"));
        }
        Ok(())
    }

    pub fn nodes(&self, prior: &LatentPrior) -> Result<Nodes> {
        match self.quadrature {
            QuadratureKind::QmcHalton => {
                let shift = self.randomized_qmc.then(|| self.seed.unwrap_or(0));
                halton_nodes_shifted(self.num_nodes, prior, shift)
            }
            QuadratureKind::GaussHermite => {
                let m = prior.dim() as f64;
                let per = ((self.num_nodes as f64).powf(1.0 / m) + 1e-9).floor() as usize;
                gauss_hermite_nodes(per.max(2), prior)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub num_nodes: usize,
    pub quadrature: QuadratureKind,
    pub seed: Option<u64>,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().unwrap_or(&f64::NAN)
    }
}

/// Which discrimination entries are free, with start values and the fixed
/// latent correlation.
#[derive(Debug, Clone)]
pub struct MeasurementSpec {
    pub item_ids: Vec<String>,
    pub item_texts: Vec<String>,
    pub start_loadings: Mat,
    pub mask: DMatrix<bool>,
    pub factor_corr: Mat,
}

impl MeasurementSpec {
    /// Rows of `structure` for the given items, in that order.
    pub fn from_structure(structure: &FactorStructure, item_ids: &[String]) -> Result<Self> {
        let m = structure.m;
        let rows: Vec<usize> = item_ids
            .iter()
            .map(|id| {
                structure
                    .question_index(id)
                    .ok_or_else(|| Error::UnknownItem(id.clone()))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            item_ids: item_ids.to_vec(),
            item_texts: rows.iter().map(|&q| structure.question_text(q).to_string()).collect(),
            start_loadings: Mat::from_fn(rows.len(), m, |i, k| structure.question_loadings[(rows[i], k)]),
            mask: DMatrix::from_fn(rows.len(), m, |i, k| structure.question_mask[(rows[i], k)]),
            factor_corr: structure.factor_corr.clone(),
        })
    }

    /// One factor loading on every item.
    pub fn unidimensional(item_ids: &[String]) -> Self {
        let j = item_ids.len();
        Self {
            item_ids: item_ids.to_vec(),
            item_texts: vec![String::new(); j],
            start_loadings: Mat::from_element(j, 1, 0.7),
            mask: DMatrix::from_element(j, 1, true),
            factor_corr: Mat::identity(1, 1),
        }
    }
}

/// Observed `(item, category)` pairs per respondent, restricted to the
/// items in `order`.
fn respondent_cells(responses: &ResponseMatrix, cols: &[usize]) -> Vec<Vec<(usize, usize)>> {
    (0..responses.n_respondents())
        .map(|i| {
            cols.iter()
                .enumerate()
                .filter_map(|(j, &c)| responses.get(i, c).map(|k| (j, k as usize)))
                .collect()
        })
        .collect()
}

/// `log P(k | θ_q)` for every node and category, laid out `q * K + (k − 1)`.
fn log_prob_table(item: &GradedItem, nodes: &Nodes) -> Vec<f64> {
    let kk = item.num_categories;
    let mut out = vec![0.0; nodes.len() * kk];
    for q in 0..nodes.len() {
        let z: f64 = item
            .discrimination
            .iter()
            .enumerate()
            .map(|(k, a)| a * nodes.points[(q, k)])
            .sum();
        for k in 1..=kk {
            out[q * kk + k - 1] = category_prob_at(item, z, k).max(PROB_FLOOR).ln();
        }
    }
    out
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Per-respondent log joint over nodes (`log w_q + Σ_j log P`) and
/// marginal log-likelihoods.
fn e_step(
    items: &[GradedItem],
    cells: &[Vec<(usize, usize)>],
    nodes: &Nodes,
    want_posterior: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let qn = nodes.len();
    let tables: Vec<Vec<f64>> = items.par_iter().map(|it| log_prob_table(it, nodes)).collect();
    let log_w: Vec<f64> = nodes.weights.iter().map(|w| w.ln()).collect();
    let rows: Vec<(f64, Vec<f64>)> = cells
        .par_iter()
        .map(|obs| {
            let mut lj = log_w.clone();
            for &(j, k) in obs {
                let kk = items[j].num_categories;
                let t = &tables[j];
                for (q, v) in lj.iter_mut().enumerate() {
                    *v += t[q * kk + k - 1];
                }
            }
            let ll = log_sum_exp(&lj);
            if want_posterior {
                for v in lj.iter_mut() {
                    *v = (*v - ll).exp();
                }
            } else {
                lj.clear();
            }
            (ll, lj)
        })
        .collect();
    let lls: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let post = want_posterior.then(|| {
        let mut p = Vec::with_capacity(rows.len() * qn);
        for (_, r) in rows {
            p.extend(r);
        }
        p
    });
    (lls, post)
}

/// `Σ_i log Σ_q w_q Π_j P(u_ij | θ_q)` with missing cells skipped.
pub fn marginal_loglik(bank: &ItemBank, responses: &ResponseMatrix, nodes: &Nodes) -> Result<f64> {
    if nodes.dim() != bank.dim() {
        return Err(Error::Dimension {
            expected: bank.dim(),
            got: nodes.dim(),
        });
    }
    let mut items = Vec::new();
    let mut cols = Vec::new();
    for (c, id) in responses.items().iter().enumerate() {
        let item = bank.get(id).ok_or_else(|| Error::UnknownItem(id.clone()))?;
        items.push(item.clone());
        cols.push(c);
    }
    let cells = respondent_cells(responses, &cols);
    let (lls, _) = e_step(&items, &cells, nodes, false);
    Ok(lls.iter().sum())
}

/// Working parameters of one item: full `a` (masked entries stay zero) and `φ`.
#[derive(Debug, Clone)]
struct ItemState {
    a: Vec<f64>,
    phi: Vec<f64>,
    free: Vec<usize>,
}

fn intercepts_from_phi(phi: &[f64]) -> Vec<f64> {
    let mut d = Vec::with_capacity(phi.len());
    let mut cur = phi[0];
    d.push(cur);
    for e in &phi[1..] {
        cur -= e.exp();
        d.push(cur);
    }
    d
}

fn phi_from_intercepts(d: &[f64]) -> Vec<f64> {
    let mut phi = vec![d[0]];
    phi.extend(d.windows(2).map(|w| (w[0] - w[1]).ln()));
    phi
}

/// Expected complete-data log-likelihood of one item and, optionally, its
/// gradient and Hessian in `(a, d)`.
struct ItemObjective<'a> {
    nodes: &'a Nodes,
    counts: &'a [f64],
    kk: usize,
}

struct Derivs {
    value: f64,
    grad: Vector,
    hess: Mat,
}

impl ItemObjective<'_> {
    fn value(&self, a: &[f64], d: &[f64]) -> f64 {
        let item = scratch_item(a, d);
        let mut f = 0.0;
        for q in 0..self.nodes.len() {
            let z: f64 = a.iter().enumerate().map(|(k, a)| a * self.nodes.points[(q, k)]).sum();
            for k in 1..=self.kk {
                let r = self.counts[q * self.kk + k - 1];
                if r > 0.0 {
                    f += r * category_prob_at(&item, z, k).max(PROB_FLOOR).ln();
                }
            }
        }
        f
    }

    fn derivs(&self, a: &[f64], d: &[f64]) -> Derivs {
        let m = a.len();
        let nd = d.len();
        let n = m + nd;
        let item = scratch_item(a, d);
        let mut value = 0.0;
        let mut grad = Vector::zeros(n);
        let mut hess = Mat::zeros(n, n);
        let mut gd = vec![0.0; nd];
        let mut hzd = vec![0.0; nd];
        for q in 0..self.nodes.len() {
            let theta: Vec<f64> = (0..m).map(|k| self.nodes.points[(q, k)]).collect();
            let z: f64 = a.iter().zip(&theta).map(|(a, t)| a * t).sum();
            let mut sz = 0.0;
            let mut szz = 0.0;
            gd.iter_mut().for_each(|v| *v = 0.0);
            hzd.iter_mut().for_each(|v| *v = 0.0);
            for k in 1..=self.kk {
                let r = self.counts[q * self.kk + k - 1];
                if r <= 0.0 {
                    continue;
                }
                let p = category_prob_at(&item, z, k).max(PROB_FLOOR);
                value += r * p.ln();
                let (su, up) = if k > 1 {
                    let s = sigmoid(z + d[k - 2]);
                    (s, Some(k - 2))
                } else {
                    (1.0, None)
                };
                let (sl, lo) = if k < self.kk {
                    let s = sigmoid(z + d[k - 1]);
                    (s, Some(k - 1))
                } else {
                    (0.0, None)
                };
                let du = su * (1.0 - su);
                let dl = sl * (1.0 - sl);
                sz += r * (1.0 - su - sl);
                szz -= r * (du + dl);
                if let Some(u) = up {
                    let g = du / p;
                    gd[u] += r * g;
                    hzd[u] -= r * du;
                    hess[(m + u, m + u)] += r * (du * (1.0 - 2.0 * su) / p - g * g);
                }
                if let Some(l) = lo {
                    let g = dl / p;
                    gd[l] -= r * g;
                    hzd[l] -= r * dl;
                    hess[(m + l, m + l)] += r * (-dl * (1.0 - 2.0 * sl) / p - g * g);
                }
                if let (Some(u), Some(l)) = (up, lo) {
                    let h = r * du * dl / (p * p);
                    hess[(m + u, m + l)] += h;
                    hess[(m + l, m + u)] += h;
                }
            }
            for i in 0..m {
                grad[i] += sz * theta[i];
                for j in 0..m {
                    hess[(i, j)] += szz * theta[i] * theta[j];
                }
                for b in 0..nd {
                    let h = hzd[b] * theta[i];
                    hess[(i, m + b)] += h;
                    hess[(m + b, i)] += h;
                }
            }
            for b in 0..nd {
                grad[m + b] += gd[b];
            }
        }
        Derivs { value, grad, hess }
    }
}

fn scratch_item(a: &[f64], d: &[f64]) -> GradedItem {
    GradedItem {
        id: String::new(),
        text: String::new(),
        num_categories: d.len() + 1,
        discrimination: a.to_vec(),
        intercepts: d.to_vec(),
        factor_mask: vec![true; a.len()],
    }
}

/// Gradient and Hessian of the objective in the free coordinates
/// `(a_free, φ)`, plus a negative-semidefinite Gauss–Newton variant.
fn free_coordinates(state: &ItemState, der: &Derivs) -> (Vector, Mat, Mat) {
    let m = state.a.len();
    let nd = state.phi.len();
    let nf = state.free.len();
    let n = nf + nd;
    // Jacobian of d with respect to φ
    let mut jac = Mat::zeros(nd, nd);
    for b in 0..nd {
        jac[(b, 0)] = 1.0;
        for c in 1..=b {
            jac[(b, c)] = -state.phi[c].exp();
        }
    }
    let gd = der.grad.rows(m, nd).into_owned();
    let hdd = der.hess.view((m, m), (nd, nd)).into_owned();
    let had = der.hess.view((0, m), (m, nd)).into_owned();
    let g_phi = jac.transpose() * &gd;
    let h_phi_gn = jac.transpose() * &hdd * &jac;
    let mut h_phi = h_phi_gn.clone();
    for c in 1..nd {
        let tail: f64 = (c..nd).map(|b| gd[b]).sum();
        h_phi[(c, c)] -= tail * state.phi[c].exp();
    }
    let had_j = had * &jac;

    let mut grad = Vector::zeros(n);
    let mut hess = Mat::zeros(n, n);
    let mut gn = Mat::zeros(n, n);
    for (i, &fi) in state.free.iter().enumerate() {
        grad[i] = der.grad[fi];
        for (j, &fj) in state.free.iter().enumerate() {
            hess[(i, j)] = der.hess[(fi, fj)];
            gn[(i, j)] = der.hess[(fi, fj)];
        }
        for c in 0..nd {
            hess[(i, nf + c)] = had_j[(fi, c)];
            hess[(nf + c, i)] = had_j[(fi, c)];
            gn[(i, nf + c)] = had_j[(fi, c)];
            gn[(nf + c, i)] = had_j[(fi, c)];
        }
    }
    for b in 0..nd {
        grad[nf + b] = g_phi[b];
        for c in 0..nd {
            hess[(nf + b, nf + c)] = h_phi[(b, c)];
            gn[(nf + b, nf + c)] = h_phi_gn[(b, c)];
        }
    }
    (grad, hess, gn)
}

fn apply_step(state: &ItemState, step: &Vector, t: f64) -> ItemState {
    let mut next = state.clone();
    let nf = state.free.len();
    for (i, &fi) in state.free.iter().enumerate() {
        next.a[fi] += t * step[i];
    }
    for b in 0..state.phi.len() {
        next.phi[b] += t * step[nf + b];
    }
    next
}

fn newton_direction(grad: &Vector, hess: &Mat, gn: &Mat, ridge: f64) -> Vector {
    let n = grad.len();
    let ridge_i = Mat::identity(n, n) * ridge;
    for h in [hess, gn] {
        let neg = -h + &ridge_i;
        if let Some(ch) = neg.cholesky() {
            return ch.solve(grad);
        }
    }
    grad / (grad.norm().max(1.0))
}

fn m_step_item(
    state: &ItemState,
    nodes: &Nodes,
    counts: &[f64],
    config: &CalibrationConfig,
) -> ItemState {
    let kk = state.phi.len() + 1;
    let obj = ItemObjective { nodes, counts, kk };
    let mut cur = state.clone();
    for _ in 0..config.newton_iters {
        let d = intercepts_from_phi(&cur.phi);
        let der = obj.derivs(&cur.a, &d);
        let (grad, hess, gn) = free_coordinates(&cur, &der);
        if grad.amax() < 1e-10 {
            break;
        }
        let step = newton_direction(&grad, &hess, &gn, config.ridge);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=10 {
            let cand = apply_step(&cur, &step, t);
            let v = obj.value(&cand.a, &intercepts_from_phi(&cand.phi));
            if v.is_finite() && v >= der.value {
                accepted = Some((cand, v));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, v)) => {
                let gain = v - der.value;
                cur = cand;
                if gain < 1e-12 {
                    break;
                }
            }
            None => break,
        }
    }
    cur
}

fn start_state(
    id: &str,
    loadings: &[f64],
    mask: &[bool],
    counts: &[usize],
) -> Result<ItemState> {
    let kk = counts.len();
    let n: usize = counts.iter().sum();
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Unidentifiable(id.to_string()));
    }
    let mut d = Vec::with_capacity(kk - 1);
    let mut above = n;
    for b in 0..kk - 1 {
        above -= counts[b];
        let p = (above as f64 / n as f64).clamp(0.5 / n as f64, 1.0 - 0.5 / n as f64);
        let mut v = (p / (1.0 - p)).ln();
        if let Some(&prev) = d.last() {
            if v > prev - 0.1 {
                v = prev - 0.1;
            }
        }
        d.push(v);
    }
    let a = loadings
        .iter()
        .zip(mask)
        .map(|(&l, &free)| {
            if !free {
                0.0
            } else {
                // higher trait means higher categories, so start positive
                (1.7 * l.abs()).clamp(0.25, 4.0)
            }
        })
        .collect();
    Ok(ItemState {
        a,
        phi: phi_from_intercepts(&d),
        free: (0..mask.len()).filter(|&k| mask[k]).collect(),
    })
}

/// EM calibration with the discrimination pattern fixed by `spec`.
pub fn fit_with_spec(
    responses: &ResponseMatrix,
    spec: &MeasurementSpec,
    config: &CalibrationConfig,
) -> Result<(ItemBank, FitReport)> {
    config.validate()?;
    if responses.n_respondents() == 0 || responses.n_items() == 0 {
        return Err(Error::invalid("no responses to calibrate"));
    }
    let prior = LatentPrior::with_correlation(spec.factor_corr.clone())?;
    let m = prior.dim();
    let cols: Vec<usize> = spec
        .item_ids
        .iter()
        .map(|id| {
            responses
                .items()
                .iter()
                .position(|x| x == id)
                .ok_or_else(|| Error::UnknownItem(id.clone()))
        })
        .collect::<Result<_>>()?;
    let cells = respondent_cells(responses, &cols);
    let nodes = config.nodes(&prior)?;
    let qn = nodes.len();

    let mut states = Vec::with_capacity(cols.len());
    for (j, &c) in cols.iter().enumerate() {
        let kk = responses.categories()[c];
        let mut counts = vec![0usize; kk];
        for i in 0..responses.n_respondents() {
            if let Some(k) = responses.get(i, c) {
                counts[k as usize - 1] += 1;
            }
        }
        let loadings: Vec<f64> = spec.start_loadings.row(j).iter().copied().collect();
        let mask: Vec<bool> = spec.mask.row(j).iter().copied().collect();
        if !mask.iter().any(|&b| b) {
            return Err(Error::invalid(format!("item `{}` is masked on no factor", spec.item_ids[j])));
        }
        states.push(start_state(&spec.item_ids[j], &loadings, &mask, &counts)?);
    }
    let mut warnings = Vec::new();
    for (j, &c) in cols.iter().enumerate() {
        let kk = responses.categories()[c];
        let seen: std::collections::BTreeSet<u8> =
            (0..responses.n_respondents()).filter_map(|i| responses.get(i, c)).collect();
        if seen.len() < kk {
            warnings.push(format!(
                "item `{}` has {} of {kk} categories observed; outer intercepts are weakly identified",
                spec.item_ids[j],
                seen.len()
            ));
        }
    }

    let to_items = |states: &[ItemState]| -> Vec<GradedItem> {
        states.iter().map(|s| scratch_item(&s.a, &intercepts_from_phi(&s.phi))).collect()
    };

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let (lls, post) = e_step(&to_items(&states), &cells, &nodes, true);
    trace.push(lls.iter().sum::<f64>());
    let mut post = post.expect("posterior requested");
    for it in 0..config.max_em_iters {
        iterations = it + 1;
        let next: Vec<ItemState> = states
            .par_iter()
            .enumerate()
            .map(|(j, state)| {
                let kk = state.phi.len() + 1;
                let mut counts = vec![0.0; qn * kk];
                for (i, obs) in cells.iter().enumerate() {
                    if let Some(&(_, k)) = obs.iter().find(|(jj, _)| *jj == j) {
                        let row = &post[i * qn..(i + 1) * qn];
                        for (q, p) in row.iter().enumerate() {
                            counts[q * kk + k - 1] += p;
                        }
                    }
                }
                m_step_item(state, &nodes, &counts, config)
            })
            .collect();
        states = next;
        let (lls, p) = e_step(&to_items(&states), &cells, &nodes, true);
        post = p.expect("posterior requested");
        let ll: f64 = lls.iter().sum();
        let prev = *trace.last().expect("trace seeded");
        trace.push(ll);
        if ll - prev < config.em_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!(
            "EM did not converge within {} iterations",
            config.max_em_iters
        ));
    }

    let mut items = Vec::with_capacity(states.len());
    for (j, s) in states.iter().enumerate() {
        let mask: Vec<bool> = (0..m).map(|k| spec.mask[(j, k)]).collect();
        let mut a = s.a.clone();
        for k in 0..m {
            if !mask[k] {
                a[k] = 0.0;
            } else if a[k] == 0.0 {
                a[k] = f64::MIN_POSITIVE;
            }
        }
        items.push(GradedItem::new(
            spec.item_ids[j].clone(),
            spec.item_texts.get(j).cloned().unwrap_or_default(),
            a,
            intercepts_from_phi(&s.phi),
            mask,
        )?);
    }
    let bank = ItemBank::new(items, prior)?;
    Ok((
        bank,
        FitReport {
            loglik_trace: trace,
            iterations,
            converged,
            num_nodes: qn,
            quadrature: config.quadrature,
            seed: config.seed,
            warnings,
        },
    ))
}

/// Calibrates the response items against the mask and factor correlation
/// of `structure`.
pub fn fit_mirt(
    responses: &ResponseMatrix,
    structure: &FactorStructure,
    config: &CalibrationConfig,
) -> Result<(ItemBank, FitReport)> {
    let spec = MeasurementSpec::from_structure(structure, responses.items())?;
    fit_with_spec(responses, &spec, config)
}

/// One-factor calibration with every item loading on the single trait.
pub fn fit_unidimensional(
    responses: &ResponseMatrix,
    config: &CalibrationConfig,
) -> Result<(ItemBank, FitReport)> {
    let spec = MeasurementSpec::unidimensional(responses.items());
    fit_with_spec(responses, &spec, config)
}
