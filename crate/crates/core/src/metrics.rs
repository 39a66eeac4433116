//! Robustness metrics over accuracy tables.
//!
//! * `γ`: relative robustness, `1 − (A_HR − A_n) / A_HR`
//! * `E_D`: accuracy gap, `A_HR − 1/C` clamped to `[0, 1]`
//! * `Γ`: improved robustness, `γ · (1 − exp(−α E_D²))`
//! * SAR-n: mean of `γ` over datasets
//! * WAR-n: `Σ|Γ_d w_d| / Σ|w_d|`
//! * ACC-n: mean top-1 over datasets
//!
//! Ranks use average ranks for ties, so rank sums are always `M(M+1)/2`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::results::ResultsTable;
use crate::weights::WeightVector;

pub const DEFAULT_ALPHA: f64 = 200.0;

/// A value paired with an anomaly flag. Flagged values are still defined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flagged {
    pub value: f64,
    pub flagged: bool,
}

impl Flagged {
    fn ok(value: f64) -> Self {
        Flagged { value, flagged: false }
    }

    fn flag(value: f64) -> Self {
        Flagged { value, flagged: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessConfig {
    pub alpha: f64,
    /// Overrides the HR resolution recorded in the model metadata.
    pub hr_lookup: BTreeMap<String, u32>,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            alpha: DEFAULT_ALPHA,
            hr_lookup: BTreeMap::new(),
        }
    }
}

impl RobustnessConfig {
    pub fn with_alpha(alpha: f64) -> Result<Self> {
        let cfg = RobustnessConfig {
            alpha,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 1.0) || !self.alpha.is_finite() {
            return Err(Error::validation(format!("alpha must be finite and >= 1, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// `1 − (a_hr − a_n) / a_hr`. Flagged (and 0) when `a_hr == 0`.
pub fn relative_robustness(a_hr: f64, a_n: f64) -> Flagged {
    if a_hr <= 0.0 {
        return Flagged::flag(0.0);
    }
    Flagged::ok(1.0 - (a_hr - a_n) / a_hr)
}

pub fn accuracy_gap(a_hr: f64, num_classes: u32) -> f64 {
    debug_assert!(num_classes >= 2);
    (a_hr - 1.0 / f64::from(num_classes)).clamp(0.0, 1.0)
}

pub fn improved_robustness(gamma: f64, gap: f64, alpha: f64) -> f64 {
    // 1 - e^{-x} without cancellation for small x
    gamma * -(-alpha * gap * gap).exp_m1()
}

/// Simple aggregated robustness: the arithmetic mean.
pub fn sar(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::validation("SAR of an empty score list"));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Weighted aggregated robustness over scores keyed by dataset id.
pub fn war(scores: &BTreeMap<String, f64>, weights: &WeightVector) -> Result<f64> {
    let score_keys: BTreeSet<&String> = scores.keys().collect();
    let weight_keys: BTreeSet<&String> = weights.weights().keys().collect();
    if score_keys != weight_keys {
        let diff = score_keys
            .symmetric_difference(&weight_keys)
            .map(|s| s.to_string())
            .collect();
        return Err(Error::Misaligned(diff));
    }
    let (s, w): (Vec<f64>, Vec<f64>) = scores
        .iter()
        .map(|(d, &g)| (g, weights.weights()[d]))
        .unzip();
    war_aligned(&s, &w)
}

/// WAR over position-aligned slices.
pub fn war_aligned(scores: &[f64], weights: &[f64]) -> Result<f64> {
    if scores.len() != weights.len() {
        return Err(Error::validation(format!(
            "WAR: {} scores vs {} weights",
            scores.len(),
            weights.len()
        )));
    }
    let norm: f64 = weights.iter().map(|w| w.abs()).sum();
    if !(norm > 0.0) {
        return Err(Error::validation("WAR: sum of |w| must be positive"));
    }
    let num: f64 = scores.iter().zip(weights).map(|(g, w)| (g * w).abs()).sum();
    Ok(num / norm)
}

/// Ranks starting at 1 for the smallest value; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) share ranks i+1..=j
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation. Flagged (and 0) when either side has no rank variance.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Flagged> {
    if x.len() != y.len() {
        return Err(Error::validation(format!("spearman: lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::validation("spearman: need at least two observations"));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::validation("spearman: NaN input"));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

fn pearson(a: &[f64], b: &[f64]) -> Flagged {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Flagged::flag(0.0);
    }
    Flagged::ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CellFlags {
    /// HR accuracy is zero; γ defined as 0.
    pub degenerate: bool,
    /// HR accuracy at or below chance; the gap was clamped to 0.
    pub gap_clamped: bool,
}

impl CellFlags {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.degenerate {
            parts.push("degenerate");
        }
        if self.gap_clamped {
            parts.push("gap_clamped");
        }
        parts.join("|")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellScore {
    pub model_id: String,
    pub dataset_id: String,
    pub resolution: u32,
    pub gamma: f64,
    pub gamma_improved: f64,
    pub accuracy_gap: f64,
    pub flags: CellFlags,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Exclusion {
    /// Low-resolution cell whose HR counterpart is absent.
    MissingHr { model_id: String, dataset_id: String, resolution: u32 },
    /// Model with no HR cell at all.
    ModelWithoutHr { model_id: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RobustnessScores {
    pub cells: Vec<CellScore>,
    pub excluded: Vec<Exclusion>,
}

impl RobustnessScores {
    pub fn get(&self, model_id: &str, dataset_id: &str, resolution: u32) -> Option<&CellScore> {
        self.cells
            .iter()
            .find(|c| c.model_id == model_id && c.dataset_id == dataset_id && c.resolution == resolution)
    }

    pub fn flagged_models(&self) -> Vec<&str> {
        self.excluded
            .iter()
            .filter_map(|e| match e {
                Exclusion::ModelWithoutHr { model_id } => Some(model_id.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model_id,dataset_id,resolution,gamma,gamma_improved,gap,flags\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.model_id,
                c.dataset_id,
                c.resolution,
                c.gamma,
                c.gamma_improved,
                c.accuracy_gap,
                c.flags.label()
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelAggregate {
    pub model_id: String,
    pub resolution: u32,
    pub sar: f64,
    /// `None` when the weight vector does not cover the model's datasets.
    pub war: Option<f64>,
    pub acc: f64,
    pub datasets: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AggregateScores {
    pub rows: Vec<ModelAggregate>,
}

impl AggregateScores {
    pub fn get(&self, model_id: &str, resolution: u32) -> Option<&ModelAggregate> {
        self.rows
            .iter()
            .find(|r| r.model_id == model_id && r.resolution == resolution)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model_id,resolution,sar,war,acc\n");
        for r in &self.rows {
            let war = r.war.map(|w| w.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.model_id, r.resolution, r.sar, war, r.acc);
        }
        out
    }
}

/// Fills γ, Γ and the gap for every low-resolution cell with an HR counterpart,
/// then aggregates per (model, resolution).
///
/// WAR is computed over the cells present at that resolution using the matching
/// weights; datasets without a weight make WAR absent for that row.
pub fn compute_all(
    table: &ResultsTable,
    cfg: &RobustnessConfig,
    weights: &WeightVector,
) -> Result<(RobustnessScores, AggregateScores)> {
    cfg.validate()?;
    let mut scores = RobustnessScores::default();
    let mut agg = AggregateScores::default();

    for model in table.models() {
        let hr = cfg
            .hr_lookup
            .get(&model.model_id)
            .copied()
            .unwrap_or(model.hr_resolution);
        let cells: Vec<_> = table
            .records()
            .iter()
            .filter(|r| r.model_id == model.model_id)
            .collect();
        if cells.is_empty() {
            continue;
        }
        if !cells.iter().any(|r| r.resolution == hr) {
            scores.excluded.push(Exclusion::ModelWithoutHr {
                model_id: model.model_id.clone(),
            });
            continue;
        }
        let resolutions: BTreeSet<u32> = cells.iter().map(|r| r.resolution).filter(|&n| n != hr).collect();
        for n in resolutions {
            let mut gammas = Vec::new();
            let mut improved = BTreeMap::new();
            let mut accs = Vec::new();
            for rec in cells.iter().filter(|r| r.resolution == n) {
                let Some(a_hr) = table.query(&model.model_id, &rec.dataset_id, hr) else {
                    scores.excluded.push(Exclusion::MissingHr {
                        model_id: model.model_id.clone(),
                        dataset_id: rec.dataset_id.clone(),
                        resolution: n,
                    });
                    continue;
                };
                let meta = table.dataset(&rec.dataset_id).expect("validated table");
                let g = relative_robustness(a_hr, rec.top1);
                let raw_gap = a_hr - meta.a_rand();
                let gap = accuracy_gap(a_hr, meta.num_classes);
                let gi = improved_robustness(g.value, gap, cfg.alpha);
                scores.cells.push(CellScore {
                    model_id: model.model_id.clone(),
                    dataset_id: rec.dataset_id.clone(),
                    resolution: n,
                    gamma: g.value,
                    gamma_improved: gi,
                    accuracy_gap: gap,
                    flags: CellFlags {
                        degenerate: g.flagged,
                        gap_clamped: raw_gap <= 0.0,
                    },
                });
                gammas.push(g.value);
                improved.insert(rec.dataset_id.clone(), gi);
                accs.push(rec.top1);
            }
            if gammas.is_empty() {
                continue;
            }
            let war = weights.subset(improved.keys()).and_then(|w| war(&improved, &w).ok());
            agg.rows.push(ModelAggregate {
                model_id: model.model_id.clone(),
                resolution: n,
                sar: sar(&gammas)?,
                war,
                acc: sar(&accs)?,
                datasets: gammas.len(),
            });
        }
    }
    Ok((scores, agg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gamma_examples() {
        let g = relative_robustness(0.027, 0.010).value;
        assert!((g - 0.370).abs() <= 0.002, "{g}");
        assert_eq!(relative_robustness(0.3, 0.3).value, 1.0);
        let g = relative_robustness(0.194, 0.077).value;
        assert!((g - 0.3969).abs() < 5e-5, "{g}");
        let d = relative_robustness(0.0, 0.1);
        assert!(d.flagged && d.value == 0.0);
        // LR can beat HR
        assert!(relative_robustness(0.2, 0.3).value > 1.0);
    }

    #[test]
    fn gap_examples() {
        assert!((accuracy_gap(0.027, 100) - 0.017).abs() < 1e-12);
        assert_eq!(accuracy_gap(0.1, 10), 0.0);
        assert!((accuracy_gap(0.174, 10) - 0.074).abs() < 1e-12);
        assert_eq!(accuracy_gap(0.005, 100), 0.0);
    }

    #[test]
    fn improved_examples() {
        // reported as 2.1%; the formula gives 0.0208358...
        let v = improved_robustness(0.371, 0.017, 200.0);
        assert!((v - 0.020_835_843_672_5).abs() < 1e-12, "{v}");
        assert!((v - 0.021).abs() <= 0.003);
        assert_eq!(improved_robustness(0.8, 0.0, 200.0), 0.0);
        let v = improved_robustness(0.398, 0.094, 200.0);
        assert!((v - 0.330).abs() < 5e-4, "{v}");
    }

    #[test]
    fn sar_examples() {
        assert!((sar(&[0.5, 0.7]).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(sar(&[0.42]).unwrap(), 0.42);
        assert!(sar(&[]).is_err());
    }

    #[test]
    fn war_examples() {
        let w = war_aligned(&[0.4, 0.8], &[1.0, 0.5]).unwrap();
        assert!((w - 0.8 / 1.5).abs() < 1e-15);
        assert_eq!(war_aligned(&[0.0, 0.0, 0.0], &[0.3, 0.2, 1.0]).unwrap(), 0.0);
        assert!(war_aligned(&[0.4], &[0.0]).is_err());
    }

    #[test]
    fn war_misaligned_names_difference() {
        let scores: BTreeMap<String, f64> = [("a".to_string(), 0.5), ("b".to_string(), 0.2)].into();
        let w = WeightVector::uniform(["a", "c"], Default::default(), 1.0).unwrap();
        match war(&scores, &w) {
            Err(Error::Misaligned(diff)) => assert_eq!(diff, vec!["b".to_string(), "c".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&a, &a).unwrap().value, 1.0);
        assert_eq!(spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap().value, -1.0);
        let r = spearman(&a, &[1.0, 3.0, 2.0, 4.0]).unwrap().value;
        assert!((r - 0.8).abs() < 1e-15, "{r}");
        let c = spearman(&a, &[2.0; 4]).unwrap();
        assert!(c.flagged && c.value == 0.0);
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&a, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ties_get_average_rank() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    proptest! {
        #[test]
        fn rank_sum_invariant(v in prop::collection::vec(-5i32..5, 1..40)) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            let m = v.len() as f64;
            let s: f64 = average_ranks(&v).iter().sum();
            prop_assert!((s - m * (m + 1.0) / 2.0).abs() < 1e-9);
        }

        #[test]
        fn improved_is_monotone(g in 0.0f64..2.0, e1 in 0.0f64..1.0, e2 in 0.0f64..1.0, dg in 0.0f64..1.0) {
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            prop_assert!(improved_robustness(g, lo, 200.0) <= improved_robustness(g, hi, 200.0));
            prop_assert!(improved_robustness(g, lo, 200.0) <= improved_robustness(g + dg, lo, 200.0));
            let v = improved_robustness(g, lo, 200.0);
            prop_assert!(v >= 0.0 && v <= g);
        }
    }
}
