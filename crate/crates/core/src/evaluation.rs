//! Association metrics, stabilization detection, respondent simulation and
//! the random-versus-adaptive ordering harness.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{estimate_theta, select_d_optimal, Estimator, Readout};
use crate::data::{ItemBank, LatentPrior, ResponseMatrix};
use crate::error::{Error, Result};
use crate::grm::category_probs;
use crate::linalg::{self, Mat, Vector};

/// RNG for sub-stream `stream` of a master seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::invalid("correlation needs at least three pairs"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("correlation of a constant input"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn split(x: &[f64], b: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != b.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            got: b.len(),
        });
    }
    let ones = x.iter().zip(b).filter(|(_, &g)| g).map(|(v, _)| *v).collect();
    let zeros = x.iter().zip(b).filter(|(_, &g)| !g).map(|(v, _)| *v).collect();
    Ok((ones, zeros))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `(μ₁ − μ₀)/σ · √(p q)` with the population standard deviation.
pub fn point_biserial(x: &[f64], b: &[bool]) -> Result<f64> {
    let (ones, zeros) = split(x, b)?;
    if ones.is_empty() || zeros.is_empty() {
        return Err(Error::invalid("point-biserial needs both classes"));
    }
    let n = x.len() as f64;
    let mu = mean(x);
    let sd = (x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return Err(Error::invalid("correlation of a constant input"));
    }
    let p = ones.len() as f64 / n;
    Ok((mean(&ones) - mean(&zeros)) / sd * (p * (1.0 - p)).sqrt())
}

/// Standardized mean difference of the `true` group over the `false` group
/// with the pooled (n − 1) standard deviation.
pub fn cohens_d(x: &[f64], b: &[bool]) -> Result<f64> {
    let (ones, zeros) = split(x, b)?;
    if ones.len() < 2 || zeros.len() < 2 {
        return Err(Error::invalid("Cohen's d needs at least two members per group"));
    }
    let ss = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>()
    };
    let pooled = ((ss(&ones) + ss(&zeros)) / (ones.len() + zeros.len() - 2) as f64).sqrt();
    let diff = mean(&ones) - mean(&zeros);
    if pooled == 0.0 {
        if diff == 0.0 {
            return Ok(0.0);
        }
        return Err(Error::invalid("Cohen's d with zero pooled variance"));
    }
    Ok(diff / pooled)
}

/// First 1-based turn `t ≥ window` whose trailing window has sample
/// standard deviation strictly below `threshold`.
pub fn rolling_sd_stabilization(series: &[f64], window: usize, threshold: f64) -> Result<Option<usize>> {
    if window < 2 {
        return Err(Error::invalid("window must be at least 2"));
    }
    if series.len() < window {
        return Err(Error::invalid("series shorter than the window"));
    }
    Ok((window..=series.len())
        .find(|&t| crate::adaptive::sample_sd(&series[t - window..t]) < threshold))
}

/// One category per bank item, drawn by inverse CDF from the model.
pub fn simulate_respondent(bank: &ItemBank, theta: &[f64], seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_with(bank, theta, &mut rng)
}

fn simulate_with<R: Rng>(bank: &ItemBank, theta: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    bank.items()
        .iter()
        .map(|item| {
            let probs = category_probs(item, theta)?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (k, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return Ok(k + 1);
                }
            }
            Ok(probs.len())
        })
        .collect()
}

/// `n` draws from the prior.
pub fn sample_population(prior: &LatentPrior, n: usize, seed: u64) -> Vec<Vector> {
    let l = linalg::cholesky(&prior.covariance).expect("prior is SPD").l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z = Vector::from_fn(prior.dim(), |_, _| StandardNormal.sample(&mut rng));
            &prior.mean + &l * z
        })
        .collect()
}

/// Complete response matrix for a population; respondent `i` uses
/// sub-stream `i` of `seed`.
pub fn simulate_responses(bank: &ItemBank, population: &[Vector], seed: u64) -> Result<ResponseMatrix> {
    let rows: Vec<Vec<usize>> = population
        .par_iter()
        .enumerate()
        .map(|(i, theta)| simulate_with(bank, theta.as_slice(), &mut stream_rng(seed, i as u64)))
        .collect::<Result<_>>()?;
    let cells = rows.iter().flatten().map(|&k| Some(k as u8)).collect();
    ResponseMatrix::new(
        (0..population.len()).map(|i| format!("r{i:05}")).collect(),
        bank.items().iter().map(|i| i.id.clone()).collect(),
        bank.items().iter().map(|i| i.num_categories).collect(),
        cells,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    Random { seed: u64 },
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub runs: usize,
    pub population: usize,
    pub population_seed: u64,
    /// Standard deviation of the noise added to `Λ_c·θ` for true scores.
    pub truth_noise: f64,
    pub window: usize,
    pub threshold: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            runs: 20,
            population: 300,
            population_seed: 0,
            truth_noise: 0.3,
            window: 5,
            threshold: 0.01,
        }
    }
}

/// Simulated respondents with their true condition scores and fixed
/// response vectors.
#[derive(Debug, Clone)]
pub struct Population {
    pub thetas: Vec<Vector>,
    /// Respondents × conditions.
    pub true_scores: Mat,
    /// Category per bank item (bank order) per respondent.
    pub responses: Vec<Vec<usize>>,
}

pub fn build_population(
    bank: &ItemBank,
    readout: &Readout,
    n: usize,
    noise: f64,
    seed: u64,
) -> Result<Population> {
    if n < 30 {
        return Err(Error::invalid("population needs at least 30 respondents"));
    }
    let thetas = sample_population(bank.prior(), n, seed);
    let mut rng = stream_rng(seed, 1 << 40);
    let p = readout.conditions.len();
    let mut true_scores = Mat::zeros(n, p);
    for (i, t) in thetas.iter().enumerate() {
        for (c, v) in readout.raw_projection(t).into_iter().enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            true_scores[(i, c)] = v + noise * e;
        }
    }
    let responses = thetas
        .par_iter()
        .enumerate()
        .map(|(i, t)| simulate_with(bank, t.as_slice(), &mut stream_rng(seed, i as u64)))
        .collect::<Result<_>>()?;
    Ok(Population {
        thetas,
        true_scores,
        responses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: Policy,
    pub runs: usize,
    pub population: usize,
    pub population_seed: u64,
    pub conditions: Vec<String>,
    /// Mean correlation with the true scores at turns 1..J, per condition.
    pub series: IndexMap<String, Vec<f64>>,
    /// Stabilization turn of each mean series; `None` when never reached.
    pub stabilization: IndexMap<String, Option<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction_pct: Option<IndexMap<String, Option<f64>>>,
}

impl PolicyReport {
    pub fn turns(&self) -> usize {
        self.series.values().next().map_or(0, Vec::len)
    }

    /// Stabilization turn with "not reached" counted as the full length.
    pub fn stabilization_or_full(&self, condition: &str) -> usize {
        self.stabilization
            .get(condition)
            .copied()
            .flatten()
            .unwrap_or(self.turns())
    }

    pub fn mean_stabilization(&self) -> f64 {
        let v: Vec<f64> = self
            .conditions
            .iter()
            .map(|c| self.stabilization_or_full(c) as f64)
            .collect();
        mean(&v)
    }

    pub fn correlation_at(&self, condition: &str, turn: usize) -> Option<f64> {
        self.series.get(condition).and_then(|s| s.get(turn - 1)).copied()
    }
}

/// Estimated condition scores per turn for one respondent following `order`.
fn trajectory(
    bank: &ItemBank,
    readout: &Readout,
    responses: &[usize],
    order: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mut given = Vec::with_capacity(order.len());
    let mut out = Vec::with_capacity(order.len());
    for &j in order {
        given.push((j, responses[j]));
        let est = estimate_theta(bank, &given, Estimator::Map, bank.prior())?;
        out.push(readout.scores(&est.theta));
    }
    Ok(out)
}

/// Full D-optimal administration order for a fixed response vector.
pub fn adaptive_order(bank: &ItemBank, responses: &[usize]) -> Result<Vec<usize>> {
    let mut done: Vec<usize> = Vec::with_capacity(bank.len());
    let mut given = Vec::with_capacity(bank.len());
    let mut theta = bank.prior().mean.clone();
    while let Some(j) = select_d_optimal(bank, &done, &theta, bank.prior())? {
        done.push(j);
        given.push((j, responses[j]));
        theta = estimate_theta(bank, &given, Estimator::Map, bank.prior())?.theta;
    }
    Ok(done)
}

/// Per-turn correlation across the population between estimated and true
/// condition scores, averaged over runs.
pub fn run_policy(
    bank: &ItemBank,
    readout: &Readout,
    policy: Policy,
    population: &Population,
    config: &SimulationConfig,
) -> Result<PolicyReport> {
    let n = population.thetas.len();
    let j_total = bank.len();
    let p = readout.conditions.len();
    let runs = match policy {
        Policy::Adaptive => 1,
        Policy::Random { .. } => config.runs.max(1),
    };
    let mut sums = vec![vec![0.0; j_total]; p];
    for run in 0..runs {
        let trajectories: Vec<Vec<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let order = match policy {
                    Policy::Adaptive => adaptive_order(bank, &population.responses[i])?,
                    Policy::Random { seed } => {
                        let mut order: Vec<usize> = (0..j_total).collect();
                        order.shuffle(&mut stream_rng(seed, (run as u64) << 32 | i as u64));
                        order
                    }
                };
                trajectory(bank, readout, &population.responses[i], &order)
            })
            .collect::<Result<_>>()?;
        for c in 0..p {
            let truth: Vec<f64> = population.true_scores.column(c).iter().copied().collect();
            for t in 0..j_total {
                let est: Vec<f64> = trajectories.iter().map(|tr| tr[t][c]).collect();
                sums[c][t] += pearson(&est, &truth).unwrap_or(0.0);
            }
        }
    }
    let mut series = IndexMap::new();
    let mut stabilization = IndexMap::new();
    for (c, name) in readout.conditions.iter().enumerate() {
        let s: Vec<f64> = sums[c].iter().map(|v| v / runs as f64).collect();
        stabilization.insert(
            name.clone(),
            rolling_sd_stabilization(&s, config.window, config.threshold)?,
        );
        series.insert(name.clone(), s);
    }
    Ok(PolicyReport {
        policy,
        runs: config.runs.max(1),
        population: n,
        population_seed: config.population_seed,
        conditions: readout.conditions.clone(),
        series,
        stabilization,
        reduction_pct: None,
    })
}

/// Adds `(baseline − turn)/baseline · 100` per condition to `report`.
pub fn attach_reduction(report: &mut PolicyReport, baseline: &PolicyReport) {
    let red = report
        .conditions
        .iter()
        .map(|c| {
            let b = baseline.stabilization_or_full(c) as f64;
            let a = report.stabilization_or_full(c) as f64;
            (c.clone(), (b > 0.0).then(|| (b - a) / b * 100.0))
        })
        .collect();
    report.reduction_pct = Some(red);
}

/// Long-format CSV: `policy,condition,turn,correlation`.
pub fn series_csv(reports: &[&PolicyReport]) -> String {
    let mut out = String::from("policy,condition,turn,correlation\n");
    for r in reports {
        let name = match r.policy {
            Policy::Adaptive => "adaptive",
            Policy::Random { .. } => "random",
        };
        for (c, s) in &r.series {
            for (t, v) in s.iter().enumerate() {
                out.push_str(&format!("{name},{c},{},{v}\n", t + 1));
            }
        }
    }
    out
}

/// Small-multiples SVG of the correlation curves, one panel per condition.
pub fn series_svg(adaptive: &PolicyReport, random: &PolicyReport) -> String {
    let (pw, ph, cols) = (260.0, 170.0, 5usize);
    let rows = adaptive.conditions.len().div_ceil(cols);
    let width = pw * cols as f64;
    let height = ph * rows as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let turns = adaptive.turns().max(2);
    for (idx, c) in adaptive.conditions.iter().enumerate() {
        let ox = (idx % cols) as f64 * pw + 30.0;
        let oy = (idx / cols) as f64 * ph + 20.0;
        let (w, h) = (pw - 45.0, ph - 45.0);
        svg.push_str(&format!(
            "<text x=\"{ox}\" y=\"{}\">{c}</text>\n<rect x=\"{ox}\" y=\"{oy}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"#999\"/>\n",
            oy - 5.0
        ));
        for (report, colour) in [(random, "#d95f02"), (adaptive, "#1b9e77")] {
            let Some(series) = report.series.get(c) else { continue };
            let pts: Vec<String> = series
                .iter()
                .enumerate()
                .map(|(t, v)| {
                    let x = ox + w * t as f64 / (turns - 1) as f64;
                    let y = oy + h * (1.0 - v.clamp(0.0, 1.0));
                    format!("{x:.1},{y:.1}")
                })
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
            if let Some(Some(t)) = report.stabilization.get(c) {
                let x = ox + w * (*t - 1) as f64 / (turns - 1) as f64;
                svg.push_str(&format!(
                    "<line x1=\"{x:.1}\" y1=\"{oy}\" x2=\"{x:.1}\" y2=\"{}\" stroke=\"{colour}\" stroke-dasharray=\"3,2\"/>\n",
                    oy + h
                ));
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}
