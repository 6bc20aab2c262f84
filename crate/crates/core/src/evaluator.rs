//! Pair selection, precision/recall/F1, threshold tuning and the half-split
//! protocol.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{PairSet, ScoredPair};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_SPLITS: usize = 50;
pub const THRESHOLD_QUANTILES: usize = 512;

/// F1 from precision and recall, zero when either is zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision == 0.0 || recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn counts_to_prf1(hits: usize, n_pred: usize, n_truth: usize) -> (f64, f64, f64) {
    let p = if n_pred == 0 { 0.0 } else { hits as f64 / n_pred as f64 };
    let r = hits as f64 / n_truth as f64;
    (p, r, f1_score(p, r))
}

pub fn prf1(predicted: &PairSet, truth: &PairSet) -> Result<(f64, f64, f64)> {
    if truth.is_empty() {
        return Err(Error::EmptyInput("truth set is empty".into()));
    }
    Ok(counts_to_prf1(
        predicted.intersection_len(truth),
        predicted.len(),
        truth.len(),
    ))
}

pub fn select_pairs(scored: &[ScoredPair], tau: f64) -> PairSet {
    scored
        .iter()
        .filter(|s| s.score >= tau)
        .map(|s| s.pair.clone())
        .collect()
}

/// Threshold maximizing F1 against `truth` over a grid of score quantiles
/// plus the extreme scores. Ties go to the higher threshold.
pub fn tune_threshold(scored: &[ScoredPair], truth: &PairSet) -> Result<f64> {
    Ok(tune_threshold_with_f1(scored, truth)?.0)
}

/// As [`tune_threshold`], also returning the F1 reached.
pub fn tune_threshold_with_f1(scored: &[ScoredPair], truth: &PairSet) -> Result<(f64, f64)> {
    if scored.is_empty() {
        return Err(Error::EmptyInput("no scored pairs".into()));
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput("truth set is empty".into()));
    }
    let mut ranked: Vec<(f64, bool)> = scored
        .iter()
        .map(|s| (s.score, truth.contains(&s.pair)))
        .collect();
    if ranked.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut hits = Vec::with_capacity(ranked.len() + 1);
    hits.push(0usize);
    for (_, t) in &ranked {
        hits.push(hits.last().unwrap() + usize::from(*t));
    }

    let n = ranked.len();
    let mut grid: Vec<f64> = (0..THRESHOLD_QUANTILES)
        .map(|i| ranked[i * (n - 1) / (THRESHOLD_QUANTILES - 1)].0)
        .collect();
    grid.push(ranked[0].0);
    grid.push(ranked[n - 1].0);
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();

    let mut best = (grid[0], -1.0);
    for tau in grid {
        let selected = ranked.partition_point(|(s, _)| *s >= tau);
        let (_, _, f1) = counts_to_prf1(hits[selected], selected, truth.len());
        if f1 > best.1 {
            best = (tau, f1);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfSplitStats {
    pub mean_f1: f64,
    pub std_f1: f64,
    pub ci_half_width: f64,
    pub n_splits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub half_split: Option<HalfSplitStats>,
}

impl EvalReport {
    pub fn evaluate(predicted: &PairSet, truth: &PairSet) -> Result<Self> {
        let (precision, recall, f1) = prf1(predicted, truth)?;
        Ok(EvalReport {
            precision,
            recall,
            f1,
            half_split: None,
        })
    }

    /// `P<TAB>R<TAB>F1`, with mean/std/CI appended for half-split reports.
    pub fn tsv_line(&self) -> String {
        let mut line = format!("{:.6}\t{:.6}\t{:.6}", self.precision, self.recall, self.f1);
        if let Some(h) = &self.half_split {
            line.push_str(&format!(
                "\t{:.6}\t{:.6}\t{:.6}",
                h.mean_f1, h.std_f1, h.ci_half_width
            ));
        }
        line
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>9.6}", "precision", self.precision)?;
        writeln!(f, "{:<10} {:>9.6}", "recall", self.recall)?;
        writeln!(f, "{:<10} {:>9.6}", "f1", self.f1)?;
        if let Some(h) = &self.half_split {
            writeln!(f, "{:<10} {:>9.6}", "mean_f1", h.mean_f1)?;
            writeln!(f, "{:<10} {:>9.6}", "std_f1", h.std_f1)?;
            writeln!(f, "{:<10} {:>9.6}", "ci", h.ci_half_width)?;
            writeln!(f, "{:<10} {:>9}", "splits", h.n_splits)?;
        }
        Ok(())
    }
}

/// Welford mean and sum of squared deviations; identical inputs give their
/// value and zero exactly.
fn running_moments(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut mean, mut m2) = (0.0, 0.0);
    for (k, x) in xs.enumerate() {
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    (mean, m2)
}

/// Score `predicted` against `n_splits` random halves of `truth`. Split `i`
/// draws its half with seed `seed + i`. Precision and recall in the report
/// are means over splits; the std is the sample standard deviation.
pub fn half_split_eval(
    predicted: &PairSet,
    truth: &PairSet,
    n_splits: usize,
    seed: u64,
) -> Result<EvalReport> {
    if truth.len() < 2 {
        return Err(Error::EmptyInput("half-split needs at least two truth pairs".into()));
    }
    if n_splits == 0 {
        return Err(Error::invalid("n_splits must be positive"));
    }
    let pairs: Vec<_> = truth.iter().collect();
    let half = pairs.len() / 2;
    let runs: Vec<(f64, f64, f64)> = (0..n_splits)
        .map(|i| {
            let mut rng = Rng::new(seed.wrapping_add(i as u64));
            let sample: PairSet = rng
                .sample_indices(pairs.len(), half)
                .into_iter()
                .map(|j| pairs[j].clone())
                .collect();
            prf1(predicted, &sample)
        })
        .collect::<Result<_>>()?;
    let n = n_splits as f64;
    let (mean_p, _) = running_moments(runs.iter().map(|r| r.0));
    let (mean_r, _) = running_moments(runs.iter().map(|r| r.1));
    let (mean_f1, m2) = running_moments(runs.iter().map(|r| r.2));
    let std_f1 = if n_splits > 1 { (m2 / (n - 1.0)).sqrt() } else { 0.0 };
    Ok(EvalReport {
        precision: mean_p,
        recall: mean_r,
        f1: mean_f1,
        half_split: Some(HalfSplitStats {
            mean_f1,
            std_f1,
            ci_half_width: 1.96 * std_f1 / n.sqrt(),
            n_splits,
        }),
    })
}
