//! Held-out comparison of the three rankers on one corpus.
//!
//! Users (connected groups of truth pairs) are partitioned into train,
//! validation and test. Each stage only accepts the split kind it may see:
//! models fit on [`Split<Train>`], thresholds are tuned on
//! [`Split<Validation>`], and scores are reported on [`Split<Test>`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::marker::PhantomData;

use serde::{Deserialize, Serialize};

use crate::candidates::CandidatePair;
use crate::corpus::{CookiePair, PairSet, ScoredPair};
use crate::error::{Error, Result};
use crate::evaluator::{prf1, select_pairs, tune_threshold_with_f1, EvalReport};
use crate::jscemnet::{
    feature_columns, joint_score_pairs, logreg_training_rows, train_joint, train_logreg,
    FeatureTable, JointParams, JointTrainConfig, LogregConfig, WideWeights, DEFAULT_LAMBDA,
};
use crate::profile::ProfileSet;
use crate::rng::Rng;
use crate::scemnet::{
    score_pairs, train_scemnet, EmbeddingCache, ScemnetConfig, ScemnetParams, TrainConfig,
    TrainReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Train;
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Validation;
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Test;

/// Truth pairs and candidate pairs restricted to one group of cookies.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<K> {
    cookies: BTreeSet<String>,
    truth: PairSet,
    candidates: Vec<CandidatePair>,
    kind: PhantomData<K>,
}

impl<K> Split<K> {
    fn new(cookies: BTreeSet<String>, truth: &PairSet, candidates: &[CandidatePair]) -> Self {
        let inside = |p: &CookiePair| cookies.contains(p.first()) && cookies.contains(p.second());
        let truth = truth.iter().filter(|p| inside(p)).cloned().collect();
        let candidates = candidates.iter().filter(|c| inside(&c.pair)).cloned().collect();
        Split {
            cookies,
            truth,
            candidates,
            kind: PhantomData,
        }
    }

    pub fn cookies(&self) -> &BTreeSet<String> {
        &self.cookies
    }

    pub fn truth(&self) -> &PairSet {
        &self.truth
    }

    pub fn candidates(&self) -> &[CandidatePair] {
        &self.candidates
    }

    pub fn candidate_pairs(&self) -> Vec<CookiePair> {
        self.candidates.iter().map(|c| c.pair.clone()).collect()
    }

    fn scored(&self, scores: &HashMap<CookiePair, f64>) -> Result<Vec<ScoredPair>> {
        self.candidates
            .iter()
            .map(|c| {
                scores
                    .get(&c.pair)
                    .map(|&s| ScoredPair::new(c.pair.clone(), s))
                    .ok_or_else(|| Error::invalid(format!("no score for pair ({})", c.pair)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub train: Split<Train>,
    pub validation: Split<Validation>,
    pub test: Split<Test>,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Split users at random into train / validation / test with the given
/// train and validation fractions; the rest is test. A user is a connected
/// group of cookies under the truth pairs; cookies outside every truth pair
/// are single-cookie users.
pub fn partition(
    truth: &PairSet,
    candidates: &[CandidatePair],
    train_fraction: f64,
    validation_fraction: f64,
    seed: u64,
) -> Result<Partition> {
    if !(train_fraction > 0.0 && validation_fraction > 0.0)
        || train_fraction + validation_fraction >= 1.0
    {
        return Err(Error::invalid("fractions must be positive and sum below 1"));
    }
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    for p in truth.iter().chain(candidates.iter().map(|c| &c.pair)) {
        for c in [p.first(), p.second()] {
            let n = ids.len();
            ids.entry(c).or_insert(n);
        }
    }
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    for p in truth.iter() {
        let (a, b) = (find(&mut parent, ids[p.first()]), find(&mut parent, ids[p.second()]));
        parent[a.max(b)] = a.min(b);
    }
    let mut groups: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (&c, &i) in &ids {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(c);
    }
    let mut users: Vec<Vec<&str>> = groups.into_values().collect();
    users.sort();
    Rng::derive(seed, 0x5e1).shuffle(&mut users);

    let n = users.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    let n_val = (validation_fraction * n as f64).round() as usize;
    let collect = |range: std::ops::Range<usize>| -> BTreeSet<String> {
        users[range.start.min(n)..range.end.min(n)]
            .iter()
            .flatten()
            .map(|c| c.to_string())
            .collect()
    };
    Ok(Partition {
        train: Split::new(collect(0..n_train), truth, candidates),
        validation: Split::new(collect(n_train..n_train + n_val), truth, candidates),
        test: Split::new(collect(n_train + n_val..n), truth, candidates),
    })
}

/// Logistic regression on labeled rows of the training split.
pub fn fit_logreg(
    train: &Split<Train>,
    profiles: &ProfileSet,
    features: &FeatureTable,
    neg_ratio: usize,
    lambda: f64,
    cfg: &LogregConfig,
    seed: u64,
) -> Result<WideWeights> {
    let (rows, labels) =
        logreg_training_rows(&train.truth, &train.candidates, profiles, features, neg_ratio, seed)?;
    train_logreg(&rows, &labels, features.columns.clone(), lambda, cfg)
}

pub fn fit_scemnet(
    train: &Split<Train>,
    init: ScemnetParams,
    profiles: &ProfileSet,
    cfg: &TrainConfig,
) -> Result<(ScemnetParams, TrainReport)> {
    train_scemnet(init, &train.truth, &train.candidates, profiles, cfg)
}

pub fn fit_joint(
    train: &Split<Train>,
    init: JointParams,
    profiles: &ProfileSet,
    features: &FeatureTable,
    cfg: &JointTrainConfig,
) -> Result<(JointParams, TrainReport)> {
    train_joint(init, &train.truth, &train.candidates, profiles, features, cfg)
}

/// Threshold and F1 reached on validation.
pub fn tune(validation: &Split<Validation>, scores: &HashMap<CookiePair, f64>) -> Result<(f64, f64)> {
    tune_threshold_with_f1(&validation.scored(scores)?, &validation.truth)
}

/// Held-out precision, recall and F1 at threshold `tau`. Truth pairs missed
/// by candidate generation count as misses.
pub fn evaluate(test: &Split<Test>, scores: &HashMap<CookiePair, f64>, tau: f64) -> Result<EvalReport> {
    let predicted = select_pairs(&test.scored(scores)?, tau);
    let (precision, recall, f1) = prf1(&predicted, &test.truth)?;
    Ok(EvalReport {
        precision,
        recall,
        f1,
        half_split: None,
    })
}

pub fn logreg_scores(w: &WideWeights, features: &FeatureTable, pairs: &[CookiePair]) -> Result<HashMap<CookiePair, f64>> {
    pairs
        .iter()
        .map(|p| Ok((p.clone(), crate::autodiff::sigmoid(w.logit(features.require(p)?)?))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scemnet: ScemnetConfig,
    pub train: TrainConfig,
    pub wide_lr: Option<f64>,
    pub lambda: f64,
    pub logreg: LogregConfig,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scemnet: ScemnetConfig::default(),
            train: TrainConfig::default(),
            wide_lr: None,
            lambda: DEFAULT_LAMBDA,
            logreg: LogregConfig::default(),
            train_fraction: 0.6,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankerResult {
    pub name: String,
    pub threshold: f64,
    pub validation_f1: f64,
    pub test: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: RankerResult,
    pub stacked: RankerResult,
    pub joint: RankerResult,
    pub scemnet_report: TrainReport,
    pub joint_report: TrainReport,
    /// Share of test truth pairs present among the test candidates.
    pub test_candidate_recall: f64,
}

fn finish(
    name: &str,
    part: &Partition,
    scores: &HashMap<CookiePair, f64>,
) -> Result<RankerResult> {
    let (threshold, validation_f1) = tune(&part.validation, scores)?;
    Ok(RankerResult {
        name: name.to_string(),
        threshold,
        validation_f1,
        test: evaluate(&part.test, scores, threshold)?,
    })
}

/// Baseline logistic regression, logistic regression stacked on a frozen
/// SCEmNet score, and the jointly trained model, all fit on the same
/// training users and scored on the same held-out users.
pub fn compare_rankers(
    profiles: &ProfileSet,
    truth: &PairSet,
    candidates: &[CandidatePair],
    cfg: &ExperimentConfig,
) -> Result<Comparison> {
    let part = partition(truth, candidates, cfg.train_fraction, cfg.validation_fraction, cfg.seed)?;
    let pairs: Vec<CookiePair> = candidates.iter().map(|c| c.pair.clone()).collect();
    let base = FeatureTable::compute(profiles, &pairs, &[], &HashMap::new())?;
    let neg_ratio = cfg.train.neg_ratio;

    let wide = fit_logreg(&part.train, profiles, &base, neg_ratio, cfg.lambda, &cfg.logreg, cfg.seed)?;
    let baseline = finish("baseline", &part, &logreg_scores(&wide, &base, &pairs)?)?;

    let init = ScemnetParams::init(cfg.scemnet.clone(), profiles.lexicon(), cfg.seed)?;
    let (deep, scemnet_report) = fit_scemnet(&part.train, init.clone(), profiles, &cfg.train)?;
    let cache = EmbeddingCache::build(&deep, profiles.profiles())?;
    let deep_scores: HashMap<CookiePair, f64> =
        pairs.iter().cloned().zip(score_pairs(&deep, &cache, &pairs)?).collect();
    let stacked_table = base.with_column("scemnet", &deep_scores)?;
    let stacker = fit_logreg(
        &part.train,
        profiles,
        &stacked_table,
        neg_ratio,
        cfg.lambda,
        &cfg.logreg,
        cfg.seed,
    )?;
    let stacked = finish("baseline+scemnet", &part, &logreg_scores(&stacker, &stacked_table, &pairs)?)?;

    let jinit = JointParams::new(init, feature_columns(&[]), cfg.lambda);
    let jcfg = JointTrainConfig {
        train: cfg.train.clone(),
        wide_lr: cfg.wide_lr,
    };
    let (jp, joint_report) = fit_joint(&part.train, jinit, profiles, &base, &jcfg)?;
    let jcache = EmbeddingCache::build(jp.deep(), profiles.profiles())?;
    let joint_scores: HashMap<CookiePair, f64> = pairs
        .iter()
        .cloned()
        .zip(joint_score_pairs(&jp, &jcache, &base, &pairs)?)
        .collect();
    let joint = finish("jscemnet", &part, &joint_scores)?;

    let in_candidates = part
        .test
        .truth
        .iter()
        .filter(|p| joint_scores.contains_key(p))
        .count();
    Ok(Comparison {
        baseline,
        stacked,
        joint,
        scemnet_report,
        joint_report,
        test_candidate_recall: in_candidates as f64 / part.test.truth.len().max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(a: &str, b: &str) -> CookiePair {
        CookiePair::new(a, b).unwrap()
    }

    fn cand(a: &str, b: &str) -> CandidatePair {
        CandidatePair {
            pair: pair(a, b),
            retrieval_score: 0.5,
        }
    }

    #[test]
    fn users_stay_whole_and_splits_are_disjoint() {
        let truth: PairSet = (0..50)
            .map(|i| pair(&format!("a{i}"), &format!("b{i}")))
            .chain([pair("a0", "c0")])
            .collect();
        let cands: Vec<CandidatePair> = (0..50)
            .map(|i| cand(&format!("a{i}"), &format!("b{}", (i + 1) % 50)))
            .chain((0..50).map(|i| cand(&format!("a{i}"), &format!("b{i}"))))
            .collect();
        let p = partition(&truth, &cands, 0.6, 0.2, 3).unwrap();
        let (tr, va, te) = (p.train.cookies(), p.validation.cookies(), p.test.cookies());
        assert!(tr.is_disjoint(va) && tr.is_disjoint(te) && va.is_disjoint(te));
        assert_eq!(tr.len() + va.len() + te.len(), 101);
        assert_eq!(
            p.train.truth().len() + p.validation.truth().len() + p.test.truth().len(),
            51
        );
        for s in [tr, va, te] {
            assert_eq!(s.contains("a0"), s.contains("c0"));
        }
        for c in p.test.candidates() {
            assert!(te.contains(c.pair.first()) && te.contains(c.pair.second()));
        }
        assert_eq!(p, partition(&truth, &cands, 0.6, 0.2, 3).unwrap());
    }

    #[test]
    fn bad_fractions() {
        assert!(partition(&PairSet::new(), &[], 0.8, 0.3, 0).is_err());
    }
}
