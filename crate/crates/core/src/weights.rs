//! Dataset weights for WAR and their optimization.
//!
//! The objective is a weighted sum of Spearman correlations between the model
//! ranking induced by WAR and the ranking on individual datasets. It is
//! piecewise constant in the weights, so the search is derivative free:
//! seeded random sampling of the box followed by coordinate-wise
//! golden-section refinement of the incumbent.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{average_ranks, spearman, war_aligned, RobustnessScores};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds { lo: 0.01, hi: 1.0 }
    }
}

impl Bounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let b = Bounds { lo, hi };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo < 0.0 || self.lo > self.hi || self.hi <= 0.0 {
            return Err(Error::validation(format!(
                "infeasible weight bounds [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn contains(&self, w: f64) -> bool {
        w >= self.lo && w <= self.hi
    }
}

impl std::str::FromStr for Bounds {
    type Err = Error;

    /// `lo:hi`
    fn from_str(s: &str) -> Result<Self> {
        let (lo, hi) = s
            .split_once(':')
            .ok_or_else(|| Error::validation(format!("bounds must be lo:hi, got '{s}'")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::validation(format!("bad bound '{v}'")))
        };
        Bounds::new(parse(lo)?, parse(hi)?)
    }
}

/// Per-dataset weights inside a box.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    weights: BTreeMap<String, f64>,
    bounds: Bounds,
}

impl WeightVector {
    pub fn new(weights: BTreeMap<String, f64>, bounds: Bounds) -> Result<Self> {
        bounds.validate()?;
        if let Some((d, w)) = weights.iter().find(|(_, &w)| !bounds.contains(w)) {
            return Err(Error::validation(format!(
                "weight {w} for {d} outside [{}, {}]",
                bounds.lo, bounds.hi
            )));
        }
        if !weights.is_empty() && !weights.values().any(|&w| w > 0.0) {
            return Err(Error::validation("at least one weight must be positive"));
        }
        Ok(WeightVector { weights, bounds })
    }

    pub fn uniform<I, S>(datasets: I, bounds: Bounds, value: f64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(datasets.into_iter().map(|d| (d.into(), value)).collect(), bounds)
    }

    pub fn weights(&self) -> &BTreeMap<String, f64> {
        &self.weights
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    pub fn get(&self, dataset: &str) -> Option<f64> {
        self.weights.get(dataset).copied()
    }

    /// Restriction to `datasets`, or `None` if any of them has no weight.
    pub fn subset<'a, I>(&self, datasets: I) -> Option<WeightVector>
    where
        I: IntoIterator<Item = &'a String>,
    {
        let mut out = BTreeMap::new();
        for d in datasets {
            out.insert(d.clone(), *self.weights.get(d)?);
        }
        Some(WeightVector {
            weights: out,
            bounds: self.bounds,
        })
    }

    /// Weights in the given dataset order.
    pub fn aligned(&self, datasets: &[String]) -> Result<Vec<f64>> {
        datasets
            .iter()
            .map(|d| {
                self.get(d)
                    .ok_or_else(|| Error::validation(format!("no weight for dataset '{d}'")))
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.weights).expect("weights serialize")
    }

    pub fn from_json(text: &str, bounds: Bounds) -> Result<Self> {
        let weights: BTreeMap<String, f64> =
            serde_json::from_str(text).map_err(|e| Error::validation(format!("bad weight JSON: {e}")))?;
        Self::new(weights, bounds)
    }

    pub fn load(path: impl AsRef<Path>, bounds: Bounds) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, bounds)
    }
}

/// Weighted Spearman terms, `Σ coefficient · SC(WAR ranking, dataset ranking)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub terms: Vec<(String, f64)>,
}

impl Default for Objective {
    fn default() -> Self {
        Objective {
            terms: vec![
                ("ImageNet".into(), 0.95),
                ("ImageNet-V2".into(), 0.95),
                ("DTD".into(), 0.95),
                ("ImageNet-A".into(), 1.0),
                ("EuroSAT".into(), 1.0),
            ],
        }
    }
}

impl Objective {
    pub fn new(terms: Vec<(String, f64)>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::validation("objective needs at least one term"));
        }
        if let Some((d, c)) = terms.iter().find(|(_, c)| !(*c > 0.0)) {
            return Err(Error::validation(format!("coefficient for {d} must be > 0, got {c}")));
        }
        Ok(Objective { terms })
    }

    pub fn single(dataset: impl Into<String>, coefficient: f64) -> Result<Self> {
        Self::new(vec![(dataset.into(), coefficient)])
    }

    pub fn coefficient_sum(&self) -> f64 {
        self.terms.iter().map(|(_, c)| c).sum()
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    /// `dataset:coefficient[,dataset:coefficient...]`
    fn from_str(s: &str) -> Result<Self> {
        let terms = s
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| {
                let (d, c) = t
                    .rsplit_once(':')
                    .ok_or_else(|| Error::validation(format!("objective term must be dataset:coefficient, got '{t}'")))?;
                let c = c
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::validation(format!("bad coefficient in '{t}'")))?;
                Ok((d.trim().to_string(), c))
            })
            .collect::<Result<Vec<_>>>()?;
        Objective::new(terms)
    }
}

/// Dense Γ values, models × datasets, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaMatrix {
    pub models: Vec<String>,
    pub datasets: Vec<String>,
    pub values: Vec<f64>,
}

impl GammaMatrix {
    pub fn new(models: Vec<String>, datasets: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != models.len() * datasets.len() {
            return Err(Error::validation(format!(
                "Γ matrix: {} values for {}×{}",
                values.len(),
                models.len(),
                datasets.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("Γ matrix contains non-finite values"));
        }
        Ok(GammaMatrix { models, datasets, values })
    }

    /// Γ at one resolution. Models missing any dataset seen at that resolution
    /// are left out and returned separately.
    pub fn from_scores(scores: &RobustnessScores, resolution: u32) -> Result<(Self, Vec<String>)> {
        let mut by_model: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
        for c in scores.cells.iter().filter(|c| c.resolution == resolution) {
            by_model
                .entry(&c.model_id)
                .or_default()
                .insert(&c.dataset_id, c.gamma_improved);
        }
        let datasets: std::collections::BTreeSet<&str> =
            by_model.values().flat_map(|m| m.keys().copied()).collect();
        let datasets: Vec<String> = datasets.into_iter().map(String::from).collect();
        let mut models = Vec::new();
        let mut dropped = Vec::new();
        let mut values = Vec::new();
        for (m, row) in &by_model {
            if row.len() == datasets.len() {
                models.push(m.to_string());
                values.extend(datasets.iter().map(|d| row[d.as_str()]));
            } else {
                dropped.push(m.to_string());
            }
        }
        Ok((GammaMatrix::new(models, datasets, values)?, dropped))
    }

    pub fn rows(&self) -> usize {
        self.models.len()
    }

    pub fn cols(&self) -> usize {
        self.datasets.len()
    }

    pub fn get(&self, model: usize, dataset: usize) -> f64 {
        self.values[model * self.cols() + dataset]
    }

    pub fn column(&self, dataset: usize) -> Vec<f64> {
        (0..self.rows()).map(|m| self.get(m, dataset)).collect()
    }

    pub fn dataset_index(&self, id: &str) -> Option<usize> {
        self.datasets.iter().position(|d| d == id)
    }

    /// WAR per model for position-aligned weights.
    pub fn war_per_model(&self, weights: &[f64]) -> Result<Vec<f64>> {
        (0..self.rows())
            .map(|m| war_aligned(&self.values[m * self.cols()..(m + 1) * self.cols()], weights))
            .collect()
    }
}

/// Objective bound to a matrix, with the per-dataset ranks precomputed.
struct PreparedObjective<'a> {
    matrix: &'a GammaMatrix,
    terms: Vec<(f64, Vec<f64>)>,
}

impl<'a> PreparedObjective<'a> {
    fn new(matrix: &'a GammaMatrix, objective: &Objective) -> Result<Self> {
        if matrix.rows() < 2 {
            return Err(Error::validation("objective needs at least two models"));
        }
        let terms = objective
            .terms
            .iter()
            .map(|(d, c)| {
                let j = matrix
                    .dataset_index(d)
                    .ok_or_else(|| Error::validation(format!("objective dataset '{d}' not in Γ matrix")))?;
                Ok((*c, average_ranks(&matrix.column(j))))
            })
            .collect::<Result<_>>()?;
        Ok(PreparedObjective { matrix, terms })
    }

    fn eval(&self, weights: &[f64]) -> f64 {
        let war = self.matrix.war_per_model(weights).expect("weights validated by caller");
        let ranks = average_ranks(&war);
        self.terms
            .iter()
            .map(|(c, dataset_ranks)| c * spearman(&ranks, dataset_ranks).expect("equal lengths").value)
            .sum()
    }
}

pub fn evaluate_objective(matrix: &GammaMatrix, weights: &WeightVector, objective: &Objective) -> Result<f64> {
    let prepared = PreparedObjective::new(matrix, objective)?;
    let w = weights.aligned(&matrix.datasets)?;
    if !(w.iter().map(|x| x.abs()).sum::<f64>() > 0.0) {
        return Err(Error::validation("sum of |w| must be positive"));
    }
    Ok(prepared.eval(&w))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub objective: f64,
    pub best: f64,
}

#[derive(Debug, Clone)]
pub struct Optimized {
    pub weights: WeightVector,
    pub objective: f64,
    pub trace: Vec<TraceEntry>,
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;
/// Evenly spaced probes per coordinate before the golden-section bracket.
const COORD_PROBES: usize = 6;
const GOLDEN_STEPS: usize = 8;

struct Search<'a> {
    objective: PreparedObjective<'a>,
    budget: usize,
    trace: Vec<TraceEntry>,
    best: Vec<f64>,
    best_value: f64,
}

impl Search<'_> {
    fn remaining(&self) -> usize {
        self.budget - self.trace.len()
    }

    fn record(&mut self, point: &[f64], value: f64) {
        if self.trace.is_empty() || value > self.best_value {
            self.best_value = value;
            self.best = point.to_vec();
        }
        self.trace.push(TraceEntry {
            iteration: self.trace.len(),
            objective: value,
            best: self.best_value,
        });
    }

    /// Evaluates points in parallel and records them in order.
    fn evaluate_batch(&mut self, points: Vec<Vec<f64>>) {
        let n = points.len().min(self.remaining());
        let values: Vec<f64> = points[..n].par_iter().map(|p| self.objective.eval(p)).collect();
        for (p, v) in points[..n].iter().zip(values) {
            self.record(p, v);
        }
    }

    fn eval_one(&mut self, point: Vec<f64>) -> Option<f64> {
        if self.remaining() == 0 {
            return None;
        }
        let v = self.objective.eval(&point);
        self.record(&point, v);
        Some(v)
    }

    /// One pass over the coordinates. Returns whether the incumbent improved.
    fn coordinate_pass(&mut self, bounds: Bounds) -> bool {
        let start = self.best_value;
        for k in 0..self.best.len() {
            if self.remaining() == 0 {
                break;
            }
            let probe = |x: f64, base: &[f64]| {
                let mut p = base.to_vec();
                p[k] = x;
                p
            };
            let base = self.best.clone();
            let step = (bounds.hi - bounds.lo) / (COORD_PROBES - 1) as f64;
            let grid: Vec<Vec<f64>> = (0..COORD_PROBES)
                .map(|i| probe(bounds.lo + step * i as f64, &base))
                .collect();
            let values: Vec<f64> = grid
                .iter()
                .map_while(|p| self.eval_one(p.clone()))
                .collect();
            let Some(arg) = values
                .iter()
                .enumerate()
                .fold(None, |acc: Option<(usize, f64)>, (i, &v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((i, v)),
                })
                .map(|(i, _)| i)
            else {
                break;
            };
            // golden-section maximization inside the bracket around the best probe
            let centre = bounds.lo + step * arg as f64;
            let mut a = (centre - step).max(bounds.lo);
            let mut b = (centre + step).min(bounds.hi);
            let mut c = b - GOLDEN * (b - a);
            let mut d = a + GOLDEN * (b - a);
            let Some(mut fc) = self.eval_one(probe(c, &base)) else { break };
            let Some(mut fd) = self.eval_one(probe(d, &base)) else { break };
            for _ in 0..GOLDEN_STEPS {
                if fc >= fd {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - GOLDEN * (b - a);
                    match self.eval_one(probe(c, &base)) {
                        Some(v) => fc = v,
                        None => break,
                    }
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + GOLDEN * (b - a);
                    match self.eval_one(probe(d, &base)) {
                        Some(v) => fd = v,
                        None => break,
                    }
                }
            }
        }
        self.best_value > start
    }
}

/// Maximizes the objective over the weight box.
///
/// The first evaluation is always the uniform vector (every weight at `hi`),
/// so the result is never worse than uniform weighting. Half of the budget
/// goes to uniformly sampled points, the rest to coordinate refinement; once
/// refinement stops improving, leftover budget is spent on further samples.
pub fn optimize_weights(
    matrix: &GammaMatrix,
    objective: &Objective,
    bounds: Bounds,
    budget: usize,
    seed: u64,
) -> Result<Optimized> {
    bounds.validate()?;
    if budget == 0 {
        return Err(Error::validation("budget must be >= 1"));
    }
    let prepared = PreparedObjective::new(matrix, objective)?;
    let dims = matrix.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dims).map(|_| rng.random_range(bounds.lo..=bounds.hi)).collect())
            .collect()
    };

    let mut search = Search {
        objective: prepared,
        budget,
        trace: Vec::with_capacity(budget),
        best: Vec::new(),
        best_value: f64::NEG_INFINITY,
    };
    search.eval_one(vec![bounds.hi; dims]);

    let random_phase = budget.div_ceil(2).saturating_sub(1);
    search.evaluate_batch(sample(random_phase));

    while search.remaining() > 0 {
        if !search.coordinate_pass(bounds) {
            let n = search.remaining();
            search.evaluate_batch(sample(n));
        }
    }

    let weights = matrix
        .datasets
        .iter()
        .cloned()
        .zip(search.best.iter().copied())
        .collect();
    Ok(Optimized {
        weights: WeightVector::new(weights, bounds)?,
        objective: search.best_value,
        trace: search.trace,
    })
}
