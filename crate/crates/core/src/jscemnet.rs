//! Logistic regression over baseline features and its joint (wide & deep)
//! training with the siamese scorer.
//!
//! The joint logit is `v . z + b + w . x`: `z` is the fused deep pair
//! embedding with output weights `v`, `x` the feature row with wide weights
//! `w`, and `b` the single shared bias (the deep output bias).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::{dot, sigmoid, Gradients, Graph, Mode, ParamId, Params, Tensor};
use crate::candidates::CandidatePair;
use crate::corpus::{CookiePair, PairSet};
use crate::error::{Error, Result};
use crate::features::{assemble, FeatureSpace, FeatureVector, BASE_FEATURES, FEATURE_NAMES};
use crate::profile::{CookieProfile, ProfileSet};
use crate::rng::Rng;
use crate::scemnet::{
    build_examples, mean_loss, pair_embedding_node, run_epochs, Example, ScemnetParams,
    TrainConfig, TrainReport,
};
use crate::tokenizer::{TokenSequence, TokenizerConfig};

pub const FORMAT_VERSION: &str = "jscemnet-v1";
pub const LOGREG_FORMAT_VERSION: &str = "logreg-v1";
pub const DEFAULT_LAMBDA: f64 = 1e-4;

/// Linear weights over a named feature layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WideWeights {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub columns: Vec<String>,
}

impl WideWeights {
    pub fn zeros(columns: Vec<String>, lambda: f64) -> Self {
        WideWeights {
            weights: vec![0.0; columns.len()],
            bias: 0.0,
            lambda,
            columns,
        }
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::shape(format!(
                "feature row has {} columns, model expects {}",
                x.len(),
                self.weights.len()
            )));
        }
        Ok(dot(&self.weights, x) + self.bias)
    }
}

pub fn logreg_score(w: &WideWeights, x: &FeatureVector) -> Result<f64> {
    Ok(sigmoid(w.logit(&x.values)?))
}

/// A fitted logistic regression with the tokenizer settings its features
/// were computed under.
#[derive(Debug, Clone, PartialEq)]
pub struct LogregModel {
    pub tokenizer: TokenizerConfig,
    pub wide: WideWeights,
}

impl LogregModel {
    pub fn to_json(&self) -> Value {
        json!({
            "version": LOGREG_FORMAT_VERSION,
            "tokenizer": self.tokenizer,
            "wide": self.wide,
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        if v.get("version").and_then(Value::as_str) != Some(LOGREG_FORMAT_VERSION) {
            return Err(Error::Model(format!("expected version {LOGREG_FORMAT_VERSION}")));
        }
        let tokenizer: TokenizerConfig = serde_json::from_value(v["tokenizer"].clone())?;
        let wide: WideWeights = serde_json::from_value(v["wide"].clone())?;
        if wide.weights.len() != wide.columns.len()
            || !wide.weights.iter().chain([&wide.bias]).all(|x| x.is_finite())
        {
            return Err(Error::Model("malformed wide weights".into()));
        }
        Ok(LogregModel { tokenizer, wide })
    }
}

/// Column names of the baseline layout followed by `extras`.
pub fn feature_columns(extras: &[String]) -> Vec<String> {
    FEATURE_NAMES
        .iter()
        .map(|s| s.to_string())
        .chain(extras.iter().cloned())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogregConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LogregConfig {
    fn default() -> Self {
        LogregConfig {
            max_iter: 5_000,
            tol: 1e-6,
        }
    }
}

/// Minimize mean BCE + `lambda * ||w||^2` (bias unregularized) by full-batch
/// gradient descent. Steps are diagonally scaled by per-coordinate curvature
/// bounds and chosen by backtracking, which keeps the bias converging even
/// under very strong regularization of the weights.
pub fn train_logreg(
    rows: &[Vec<f64>],
    labels: &[f64],
    columns: Vec<String>,
    lambda: f64,
    cfg: &LogregConfig,
) -> Result<WideWeights> {
    let n = rows.len();
    if n == 0 || labels.len() != n {
        return Err(Error::EmptyInput("logistic regression needs labeled rows".into()));
    }
    let k = columns.len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::shape("every feature row must match the column layout"));
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    if positives == 0 || positives == n {
        return Err(Error::SingleClass);
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("lambda must be non-negative"));
    }

    let mut params = Params::new();
    let w = params.add("wide.weight", Tensor::zeros(&[1, k]));
    let b = params.add("wide.bias", Tensor::zeros(&[1]));
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();

    let evaluate = |p: &Params| -> Result<(f64, Gradients)> {
        let mut g = Graph::new(p);
        let x = g.input(n, k, flat.clone())?;
        let z = g.linear(x, w, Some(b))?;
        let bce = g.sigmoid_bce(z, labels)?;
        let reg = g.squared_norm(w, lambda);
        let loss = g.add(bce, reg)?;
        Ok((g.value(loss)[0], g.backward(loss)?))
    };

    let mut precond = vec![0.0; k];
    for r in rows {
        for (c, v) in precond.iter_mut().zip(r) {
            *c += v * v;
        }
    }
    for c in &mut precond {
        *c = 1.0 / (0.25 * *c / n as f64 + 2.0 * lambda).max(1e-12);
    }
    let bias_precond = 4.0;

    let (mut loss, mut grads) = evaluate(&params)?;
    let mut step: f64 = 1.0;
    for _ in 0..cfg.max_iter {
        if grads.norm() < cfg.tol {
            break;
        }
        let gw = grads.get(w).to_vec();
        let gb = grads.get(b)[0];
        let decrease: f64 =
            gw.iter().zip(&precond).map(|(g, d)| g * g * d).sum::<f64>() + gb * gb * bias_precond;
        step = (step * 2.0).min(1.0);
        let base_w = params.get(w).data().to_vec();
        let base_b = params.get(b).data()[0];
        loop {
            let mut trial = params.clone();
            for ((t, &x0), (g, d)) in trial
                .get_mut(w)
                .data_mut()
                .iter_mut()
                .zip(&base_w)
                .zip(gw.iter().zip(&precond))
            {
                *t = x0 - step * d * g;
            }
            trial.get_mut(b).data_mut()[0] = base_b - step * bias_precond * gb;
            let (l, gr) = evaluate(&trial)?;
            if l <= loss - 1e-4 * step * decrease || step < 1e-12 {
                params = trial;
                loss = l;
                grads = gr;
                break;
            }
            step *= 0.5;
        }
    }
    let weights = params.get(w).data().to_vec();
    let bias = params.get(b).data()[0];
    if !weights.iter().all(|v| v.is_finite()) || !bias.is_finite() {
        return Err(Error::invalid("logistic regression diverged"));
    }
    Ok(WideWeights {
        weights,
        bias,
        lambda,
        columns,
    })
}

/// Feature rows keyed by pair, all sharing one column layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureTable {
    pub columns: Vec<String>,
    rows: HashMap<CookiePair, Vec<f64>>,
}

impl FeatureTable {
    pub fn new(columns: Vec<String>) -> Self {
        FeatureTable {
            columns,
            rows: HashMap::new(),
        }
    }

    /// Assemble features for `pairs`; `extras` supplies the extra columns
    /// of every pair (it must cover all of them when `extra_names` is
    /// non-empty).
    pub fn compute(
        profiles: &ProfileSet,
        pairs: &[CookiePair],
        extra_names: &[String],
        extras: &HashMap<CookiePair, Vec<f64>>,
    ) -> Result<Self> {
        use rayon::prelude::*;
        let space = FeatureSpace::of(profiles)?;
        let rows = pairs
            .par_iter()
            .map(|p| {
                let ex: &[f64] = if extra_names.is_empty() {
                    &[]
                } else {
                    extras
                        .get(p)
                        .map(Vec::as_slice)
                        .ok_or_else(|| Error::invalid(format!("no extra columns for pair ({p})")))?
                };
                if ex.len() != extra_names.len() {
                    return Err(Error::shape(format!("pair ({p}) has the wrong number of extras")));
                }
                let fv = assemble(profiles.require(p.first())?, profiles.require(p.second())?, &space, ex)?;
                Ok((p.clone(), fv.values))
            })
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(FeatureTable {
            columns: feature_columns(extra_names),
            rows,
        })
    }

    pub fn insert(&mut self, pair: CookiePair, row: Vec<f64>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::shape("row does not match the column layout"));
        }
        self.rows.insert(pair, row);
        Ok(())
    }

    pub fn get(&self, pair: &CookiePair) -> Option<&[f64]> {
        self.rows.get(pair).map(Vec::as_slice)
    }

    pub fn require(&self, pair: &CookiePair) -> Result<&[f64]> {
        self.get(pair)
            .ok_or_else(|| Error::invalid(format!("missing feature row for pair ({pair})")))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Copy of the table with one more column.
    pub fn with_column(&self, name: &str, values: &HashMap<CookiePair, f64>) -> Result<Self> {
        let mut columns = self.columns.clone();
        columns.push(name.to_string());
        let rows = self
            .rows
            .iter()
            .map(|(p, r)| {
                let v = values
                    .get(p)
                    .ok_or_else(|| Error::invalid(format!("no {name} value for pair ({p})")))?;
                let mut r = r.clone();
                r.push(*v);
                Ok((p.clone(), r))
            })
            .collect::<Result<_>>()?;
        Ok(FeatureTable { columns, rows })
    }
}

/// The jointly trained model: deep towers and output weights, wide weights,
/// and the deep output bias as the only bias.
#[derive(Debug, Clone, PartialEq)]
pub struct JointParams {
    model: ScemnetParams,
    wide: ParamId,
    lambda: f64,
    columns: Vec<String>,
}

impl JointParams {
    /// Deep part from `deep`, zero wide weights.
    pub fn new(deep: ScemnetParams, columns: Vec<String>, lambda: f64) -> Self {
        let mut model = deep;
        let wide = model
            .params_mut()
            .add("wide.weight", Tensor::zeros(&[1, columns.len()]));
        JointParams {
            model,
            wide,
            lambda,
            columns,
        }
    }

    /// The deep pathway. Its parameter store also carries the wide weights,
    /// which deep-only scoring ignores.
    pub fn deep(&self) -> &ScemnetParams {
        &self.model
    }

    pub fn deep_mut(&mut self) -> &mut ScemnetParams {
        &mut self.model
    }

    pub fn wide_weights(&self) -> &[f64] {
        self.model.params().get(self.wide).data()
    }

    pub fn wide_weights_mut(&mut self) -> &mut [f64] {
        self.model.params_mut().get_mut(self.wide).data_mut()
    }

    pub fn wide_param(&self) -> ParamId {
        self.wide
    }

    pub fn bias(&self) -> f64 {
        self.model.params().get(self.model.output_bias()).data()[0]
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    /// The wide half as a standalone logistic regression.
    pub fn wide_view(&self) -> WideWeights {
        WideWeights {
            weights: self.wide_weights().to_vec(),
            bias: self.bias(),
            lambda: self.lambda,
            columns: self.columns.clone(),
        }
    }

    pub fn to_json(&self) -> Value {
        let mut deep = self.model.to_json();
        if let Some(map) = deep.get_mut("params").and_then(Value::as_object_mut) {
            map.remove("wide.weight");
        }
        json!({
            "version": FORMAT_VERSION,
            "scemnet": deep,
            "wide": {
                "columns": self.columns,
                "weights": self.wide_weights(),
                "lambda": self.lambda,
            },
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        if v.get("version").and_then(Value::as_str) != Some(FORMAT_VERSION) {
            return Err(Error::Model(format!("expected version {FORMAT_VERSION}")));
        }
        let deep = ScemnetParams::from_json(
            v.get("scemnet")
                .ok_or_else(|| Error::Model("missing scemnet block".into()))?,
        )?;
        let wide = v
            .get("wide")
            .ok_or_else(|| Error::Model("missing wide block".into()))?;
        let columns: Vec<String> = serde_json::from_value(wide["columns"].clone())?;
        let weights: Vec<f64> = serde_json::from_value(wide["weights"].clone())?;
        let lambda: f64 = serde_json::from_value(wide["lambda"].clone())?;
        if weights.len() != columns.len() {
            return Err(Error::Model("wide weights do not match the column layout".into()));
        }
        let mut jp = JointParams::new(deep, columns, lambda);
        jp.wide_weights_mut().copy_from_slice(&weights);
        Ok(jp)
    }
}

fn joint_logit_node(
    g: &mut Graph<'_>,
    jp: &JointParams,
    a: &[TokenSequence],
    b: &[TokenSequence],
    x: &[f64],
    mode: Mode,
    rng: &mut Rng,
) -> Result<crate::autodiff::NodeId> {
    if x.len() != jp.columns.len() {
        return Err(Error::shape(format!(
            "feature row has {} columns, model expects {}",
            x.len(),
            jp.columns.len()
        )));
    }
    let model = &jp.model;
    let z = pair_embedding_node(g, model, a, b, mode, rng)?;
    let deep = g.linear(z, model.output_weight(), Some(model.output_bias()))?;
    let xi = g.input(1, x.len(), x.to_vec())?;
    let wide = g.linear(xi, jp.wide, None)?;
    g.add(deep, wide)
}

/// `sigmoid(v . z + b + w . x)` for one pair.
pub fn joint_score(
    jp: &JointParams,
    a: &CookieProfile,
    b: &CookieProfile,
    x: &FeatureVector,
    mode: Mode,
    rng: &mut Rng,
) -> Result<f64> {
    jp.model.check_profile(a)?;
    jp.model.check_profile(b)?;
    let mut g = Graph::new(jp.model.params());
    let z = joint_logit_node(&mut g, jp, &a.sequences, &b.sequences, &x.values, mode, rng)?;
    Ok(sigmoid(g.value(z)[0]))
}

/// Inference scores for many pairs from cached cookie embeddings.
pub fn joint_score_pairs(
    jp: &JointParams,
    cache: &crate::scemnet::EmbeddingCache,
    features: &FeatureTable,
    pairs: &[CookiePair],
) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let model = &jp.model;
    let v = model.params().get(model.output_weight()).row(0);
    let b = jp.bias();
    let w = jp.wide_weights();
    pairs
        .par_iter()
        .map(|p| {
            let deep = dot(v, &cache.fused(p)?) + b;
            let x = features.require(p)?;
            if x.len() != w.len() {
                return Err(Error::shape("feature layout mismatch"));
            }
            Ok(sigmoid(deep + dot(w, x)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTrainConfig {
    pub train: TrainConfig,
    /// Learning rate of the wide weights; defaults to the deep rate.
    pub wide_lr: Option<f64>,
}

impl From<TrainConfig> for JointTrainConfig {
    fn from(train: TrainConfig) -> Self {
        JointTrainConfig {
            train,
            wide_lr: None,
        }
    }
}

/// Train deep and wide parts together with mini-batch Adam on the joint
/// logit; wide weights carry an L2 penalty of `lambda * ||w||^2`.
pub fn train_joint(
    init: JointParams,
    truth: &PairSet,
    candidates: &[CandidatePair],
    profiles: &ProfileSet,
    features: &FeatureTable,
    cfg: &JointTrainConfig,
) -> Result<(JointParams, TrainReport)> {
    cfg.train.validate()?;
    if features.columns != init.columns {
        return Err(Error::shape("feature table layout differs from the model's"));
    }
    if let Some(p) = profiles.profiles().first() {
        init.model.check_profile(p)?;
    }
    let (pairs, examples) =
        build_examples(truth, candidates, profiles, cfg.train.neg_ratio, cfg.train.seed)?;
    let rows: Vec<&[f64]> = pairs
        .iter()
        .map(|p| features.require(p))
        .collect::<Result<_>>()?;
    let n_pos = examples.iter().filter(|e| e.label == 1.0).count();

    let shape = init.clone();
    let seqs = profiles.profiles();
    let loss_fn = |g: &mut Graph<'_>, ex: &Example, mode: Mode, rng: &mut Rng| {
        let z = joint_logit_node(
            g,
            &shape,
            &seqs[ex.a].sequences,
            &seqs[ex.b].sequences,
            rows[ex.row],
            mode,
            rng,
        )?;
        g.sigmoid_bce(z, &[ex.label])
    };
    let wide = init.wide;
    let lambda = init.lambda;
    let deep_lr = cfg.train.lr;
    let wide_lr = cfg.wide_lr.unwrap_or(deep_lr);
    let lr_for = move |id: ParamId| if id == wide { wide_lr } else { deep_lr };
    let l2 = move |p: &Params, grads: &mut Gradients| -> Result<f64> {
        let mut g = Graph::new(p);
        let n = g.squared_norm(wide, lambda);
        g.backward_into(n, 1.0, grads)?;
        Ok(g.value(n)[0])
    };

    let mut jp = init;
    let initial_loss = mean_loss(jp.model.params(), &examples, &loss_fn)?;
    let mut params = jp.model.params().clone();
    let curve = run_epochs(&mut params, &examples, &cfg.train, &lr_for, &loss_fn, &l2)?;
    *jp.model.params_mut() = params;
    Ok((
        jp,
        TrainReport {
            initial_loss,
            epoch_losses: curve,
            n_positives: n_pos,
            n_negatives: examples.len() - n_pos,
        },
    ))
}

/// Labeled feature rows for logistic regression: truth pairs among the
/// candidates plus sampled negatives, exactly as the deep trainers use.
pub fn logreg_training_rows(
    truth: &PairSet,
    candidates: &[CandidatePair],
    profiles: &ProfileSet,
    features: &FeatureTable,
    neg_ratio: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (pairs, examples) = build_examples(truth, candidates, profiles, neg_ratio, seed)?;
    let rows = pairs
        .iter()
        .map(|p| features.require(p).map(<[f64]>::to_vec))
        .collect::<Result<_>>()?;
    Ok((rows, examples.iter().map(|e| e.label).collect()))
}

/// Whether a layout is the plain baseline.
pub fn is_baseline_layout(columns: &[String]) -> bool {
    columns.len() == BASE_FEATURES
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cols(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("f{i}")).collect()
    }

    #[test]
    fn logreg_score_cases() {
        let w = WideWeights::zeros(cols(2), 0.0);
        let x = FeatureVector {
            values: vec![3.0, -1.0],
        };
        assert_eq!(logreg_score(&w, &x).unwrap(), 0.5);

        let mut w = WideWeights::zeros(cols(1), 0.0);
        w.bias = 40.0;
        let p = logreg_score(&w, &FeatureVector { values: vec![0.0] }).unwrap();
        assert!(p > 1.0 - 1e-15 && p <= 1.0);

        let mut w = WideWeights::zeros(cols(1), 0.0);
        w.weights[0] = 1.0;
        let p = logreg_score(&w, &FeatureVector { values: vec![std::f64::consts::LN_2] }).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-15);

        assert!(logreg_score(&w, &FeatureVector { values: vec![1.0, 2.0] }).is_err());
    }

    fn separable() -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let x = -1.0 + i as f64 * 0.1;
            rows.push(vec![x]);
            labels.push(if x > 0.0 { 1.0 } else { 0.0 });
        }
        (rows, labels)
    }

    fn bce(w: &WideWeights, rows: &[Vec<f64>], labels: &[f64]) -> f64 {
        rows.iter()
            .zip(labels)
            .map(|(r, &y)| crate::autodiff::sigmoid_bce(w.logit(r).unwrap(), y).1)
            .sum::<f64>()
            / rows.len() as f64
    }

    #[test]
    fn logreg_fits_separable_data() {
        let (rows, labels) = separable();
        let w = train_logreg(&rows, &labels, cols(1), DEFAULT_LAMBDA, &LogregConfig::default())
            .unwrap();
        assert!(bce(&w, &rows, &labels) < 0.1, "{}", bce(&w, &rows, &labels));
        assert!(w.weights[0] > 0.0);
    }

    #[test]
    fn strong_ridge_recovers_prior() {
        let (rows, labels) = separable();
        let w = train_logreg(&rows, &labels, cols(1), 1e6, &LogregConfig::default()).unwrap();
        assert!(w.weights[0].abs() < 1e-5, "{}", w.weights[0]);
        let prior = labels.iter().sum::<f64>() / labels.len() as f64;
        assert!((sigmoid(w.bias) - prior).abs() < 1e-4);
    }

    #[test]
    fn duplicated_rows_give_same_weights() {
        let (rows, labels) = separable();
        let w1 = train_logreg(&rows, &labels, cols(1), DEFAULT_LAMBDA, &LogregConfig::default())
            .unwrap();
        let rows2: Vec<Vec<f64>> = rows.iter().flat_map(|r| [r.clone(), r.clone()]).collect();
        let labels2: Vec<f64> = labels.iter().flat_map(|&y| [y, y]).collect();
        let w2 = train_logreg(&rows2, &labels2, cols(1), DEFAULT_LAMBDA, &LogregConfig::default())
            .unwrap();
        assert!((w1.weights[0] - w2.weights[0]).abs() < 1e-9 * w1.weights[0].abs().max(1.0));
        assert!((w1.bias - w2.bias).abs() < 1e-9);
    }

    #[test]
    fn logreg_model_json_round_trip() {
        let mut wide = WideWeights::zeros(cols(3), 0.5);
        wide.weights = vec![0.1, -2.0 / 3.0, 1e-17];
        wide.bias = -0.3;
        let m = LogregModel {
            tokenizer: TokenizerConfig::default(),
            wide,
        };
        let text = serde_json::to_string(&m.to_json()).unwrap();
        let back = LogregModel::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(LogregModel::from_json(&json!({"version": "x"})).is_err());
    }

    #[test]
    fn single_class_is_rejected() {
        let rows = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            train_logreg(&rows, &[1.0, 1.0], cols(1), 0.0, &LogregConfig::default()),
            Err(Error::SingleClass)
        ));
    }
}
