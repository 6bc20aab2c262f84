//! Siamese multi-modal convolutional pair scorer.
//!
//! Each modality has one tower (embedding, one convolution per filter width
//! with ReLU, max-over-time pooling, concatenation, dropout) shared by both
//! cookies of a pair. Tower outputs are fused per modality by elementwise
//! product, the modality blocks are concatenated, and a single affine output
//! unit followed by a sigmoid gives the match probability.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::{
    dot, sigmoid, AdamState, Gradients, Graph, Mode, NodeId, ParamId, Params, Tensor,
};
use crate::candidates::CandidatePair;
use crate::corpus::{CookiePair, PairSet};
use crate::error::{Error, Result};
use crate::profile::{CookieProfile, ProfileSet};
use crate::rng::Rng;
use crate::tokenizer::{Lexicon, TokenSequence, TokenizerConfig, VocabFingerprint, PAD};

pub const FORMAT_VERSION: &str = "scemnet-v1";

/// Examples per gradient chunk. Chunks may run in parallel; their sums are
/// always combined in chunk order so results do not depend on thread count.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScemnetConfig {
    pub widths: Vec<usize>,
    pub filters_per_width: usize,
    pub embed_dim: usize,
    pub dropout: f64,
}

impl Default for ScemnetConfig {
    fn default() -> Self {
        ScemnetConfig {
            widths: vec![2, 3, 4, 5, 6, 10],
            filters_per_width: 40,
            embed_dim: 64,
            dropout: 0.5,
        }
    }
}

impl ScemnetConfig {
    /// Length of one cookie embedding.
    pub fn cookie_dim(&self) -> usize {
        self.widths.len() * self.filters_per_width
    }

    pub fn validate(&self, sequence_len: usize) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::invalid("filter widths must be positive and non-empty"));
        }
        if self.filters_per_width == 0 || self.embed_dim == 0 {
            return Err(Error::invalid("filter count and embedding dim must be positive"));
        }
        let widest = *self.widths.iter().max().unwrap();
        if sequence_len < widest {
            return Err(Error::invalid(format!(
                "sequence length {sequence_len} shorter than widest filter {widest}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Tower {
    embedding: ParamId,
    convs: Vec<(ParamId, ParamId)>,
}

/// All learnable arrays of the model plus the vocabularies it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ScemnetParams {
    config: ScemnetConfig,
    tokenizer: TokenizerConfig,
    vocab: Vec<VocabFingerprint>,
    params: Params,
    towers: Vec<Tower>,
    out_weight: ParamId,
    out_bias: ParamId,
}

fn tower_names(m: usize, w: usize) -> (String, String) {
    (format!("conv.{m}.{w}.filters"), format!("conv.{m}.{w}.bias"))
}

impl ScemnetParams {
    /// Seeded initialization: embeddings uniform(-0.05, 0.05) with a zero
    /// PAD row, filters uniform(+-1/sqrt(w*d)), output weights
    /// uniform(+-1/sqrt(fused dim)), all biases zero.
    pub fn init(config: ScemnetConfig, lexicon: &Lexicon, seed: u64) -> Result<Self> {
        Self::init_raw(config, lexicon.config().clone(), lexicon.fingerprints(), seed)
    }

    pub fn init_raw(
        config: ScemnetConfig,
        tokenizer: TokenizerConfig,
        vocab: Vec<VocabFingerprint>,
        seed: u64,
    ) -> Result<Self> {
        config.validate(tokenizer.sequence_len)?;
        if vocab.len() != tokenizer.modalities() {
            return Err(Error::VocabularyMismatch("one vocabulary per modality".into()));
        }
        let mut rng = Rng::derive(seed, 0x5ce);
        let mut params = Params::new();
        let d = config.embed_dim;
        let mut towers = Vec::with_capacity(vocab.len());
        for (m, fp) in vocab.iter().enumerate() {
            let embedding = params.add_embedding(
                format!("emb.{m}"),
                Tensor::uniform(&[fp.size, d], 0.05, &mut rng),
            );
            let mut convs = Vec::with_capacity(config.widths.len());
            for &w in &config.widths {
                let bound = 1.0 / ((w * d) as f64).sqrt();
                let (fname, bname) = tower_names(m, w);
                let f = params.add(
                    fname,
                    Tensor::uniform(&[config.filters_per_width, w, d], bound, &mut rng),
                );
                let b = params.add(bname, Tensor::zeros(&[config.filters_per_width]));
                convs.push((f, b));
            }
            towers.push(Tower { embedding, convs });
        }
        let fused = vocab.len() * config.cookie_dim();
        let out_weight = params.add(
            "out.weight",
            Tensor::uniform(&[1, fused], 1.0 / (fused as f64).sqrt(), &mut rng),
        );
        let out_bias = params.add("out.bias", Tensor::zeros(&[1]));
        Ok(ScemnetParams {
            config,
            tokenizer,
            vocab,
            params,
            towers,
            out_weight,
            out_bias,
        })
    }

    pub fn config(&self) -> &ScemnetConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &TokenizerConfig {
        &self.tokenizer
    }

    pub fn vocab(&self) -> &[VocabFingerprint] {
        &self.vocab
    }

    pub fn modalities(&self) -> usize {
        self.towers.len()
    }

    pub fn fused_dim(&self) -> usize {
        self.modalities() * self.config.cookie_dim()
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub(crate) fn into_params(self) -> Params {
        self.params
    }

    pub(crate) fn with_params(&self, params: Params) -> Self {
        ScemnetParams {
            params,
            ..self.clone()
        }
    }

    pub fn embedding(&self, modality: usize) -> ParamId {
        self.towers[modality].embedding
    }

    /// Filter bank and bias of `width_index` in `modality`.
    pub fn conv(&self, modality: usize, width_index: usize) -> (ParamId, ParamId) {
        self.towers[modality].convs[width_index]
    }

    pub fn output_weight(&self) -> ParamId {
        self.out_weight
    }

    pub fn output_bias(&self) -> ParamId {
        self.out_bias
    }

    fn check_sequences(&self, seqs: &[TokenSequence]) -> Result<()> {
        if seqs.len() != self.modalities() {
            return Err(Error::shape(format!(
                "expected {} sequences, got {}",
                self.modalities(),
                seqs.len()
            )));
        }
        Ok(())
    }

    pub fn check_profile(&self, p: &CookieProfile) -> Result<()> {
        if p.vocab_identity() != self.vocab.as_slice() {
            return Err(Error::VocabularyMismatch(format!(
                "cookie {} was encoded under different vocabularies than the model",
                p.cookie_id
            )));
        }
        Ok(())
    }
}

/// Record one tower on `graph` and return its `1 x E` output node.
///
/// Windows lying entirely in the trailing padding all equal `relu(bias)`,
/// because the PAD embedding row is pinned at zero. Only the first of them
/// is evaluated, which leaves the pooled maxima, the first-argmax routing
/// and therefore all gradients unchanged.
pub fn tower_node(
    graph: &mut Graph<'_>,
    model: &ScemnetParams,
    modality: usize,
    seq: &TokenSequence,
    mode: Mode,
    rng: &mut Rng,
) -> Result<NodeId> {
    let widest = *model.config.widths.iter().max().unwrap();
    if seq.len() < widest {
        return Err(Error::shape(format!(
            "sequence length {} shorter than widest filter {widest}",
            seq.len()
        )));
    }
    let tower = &model.towers[modality];
    let keep = (seq.content_len() + widest).min(seq.len());
    debug_assert!(seq.ids[keep..].iter().all(|&id| id == PAD));
    let emb = graph.embed(tower.embedding, &seq.ids[..keep])?;
    let mut pooled = Vec::with_capacity(tower.convs.len());
    for &(f, b) in &tower.convs {
        let c = graph.conv1d_relu(emb, f, b)?;
        pooled.push(graph.max_over_time(c)?);
    }
    let cat = graph.concat(&pooled)?;
    graph.dropout(cat, model.config.dropout, mode, rng)
}

/// Cookie embedding of one modality as plain values.
pub fn seqcnn_embed(
    model: &ScemnetParams,
    modality: usize,
    seq: &TokenSequence,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut g = Graph::new(&model.params);
    let node = tower_node(&mut g, model, modality, seq, mode, rng)?;
    Ok(g.value(node).to_vec())
}

/// Elementwise product of two cookie embeddings.
pub fn pair_fuse(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("fusing lengths {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
}

/// Concatenate per-modality pair embeddings in modality order.
pub fn multimodal_fuse(blocks: &[Vec<f64>], modalities: usize) -> Result<Vec<f64>> {
    if blocks.len() != modalities {
        return Err(Error::shape(format!(
            "expected {modalities} modality blocks, got {}",
            blocks.len()
        )));
    }
    Ok(blocks.concat())
}

/// Record the fused `1 x (M*E)` pair embedding.
pub fn pair_embedding_node(
    graph: &mut Graph<'_>,
    model: &ScemnetParams,
    a: &[TokenSequence],
    b: &[TokenSequence],
    mode: Mode,
    rng: &mut Rng,
) -> Result<NodeId> {
    model.check_sequences(a)?;
    model.check_sequences(b)?;
    let mut blocks = Vec::with_capacity(model.modalities());
    for m in 0..model.modalities() {
        let ea = tower_node(graph, model, m, &a[m], mode, rng)?;
        let eb = tower_node(graph, model, m, &b[m], mode, rng)?;
        blocks.push(graph.mul(ea, eb)?);
    }
    graph.concat(&blocks)
}

/// Record the pre-sigmoid score of a pair.
pub fn logit_node(
    graph: &mut Graph<'_>,
    model: &ScemnetParams,
    a: &[TokenSequence],
    b: &[TokenSequence],
    mode: Mode,
    rng: &mut Rng,
) -> Result<NodeId> {
    let z = pair_embedding_node(graph, model, a, b, mode, rng)?;
    graph.linear(z, model.out_weight, Some(model.out_bias))
}

/// Match probability of two encoded cookies.
pub fn score_sequences(
    model: &ScemnetParams,
    a: &[TokenSequence],
    b: &[TokenSequence],
    mode: Mode,
    rng: &mut Rng,
) -> Result<f64> {
    let mut g = Graph::new(&model.params);
    let z = logit_node(&mut g, model, a, b, mode, rng)?;
    Ok(sigmoid(g.value(z)[0]))
}

pub fn score_pair(
    model: &ScemnetParams,
    a: &CookieProfile,
    b: &CookieProfile,
    mode: Mode,
    rng: &mut Rng,
) -> Result<f64> {
    model.check_profile(a)?;
    model.check_profile(b)?;
    score_sequences(model, &a.sequences, &b.sequences, mode, rng)
}

/// Inference-mode cookie embeddings computed once per cookie.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    embeddings: HashMap<String, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn build<'a>(
        model: &ScemnetParams,
        profiles: impl IntoIterator<Item = &'a CookieProfile>,
    ) -> Result<Self> {
        let list: Vec<&CookieProfile> = profiles.into_iter().collect();
        let embeddings = list
            .par_iter()
            .map(|p| {
                model.check_profile(p)?;
                let mut rng = Rng::new(0);
                let mut all = Vec::with_capacity(model.fused_dim());
                for m in 0..model.modalities() {
                    all.extend(seqcnn_embed(model, m, &p.sequences[m], Mode::Infer, &mut rng)?);
                }
                Ok((p.cookie_id.clone(), all))
            })
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(EmbeddingCache { embeddings })
    }

    pub fn get(&self, cookie: &str) -> Result<&[f64]> {
        self.embeddings
            .get(cookie)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("no cached embedding for {cookie}")))
    }

    /// Fused pair embedding; equals the graph computation bit for bit.
    pub fn fused(&self, pair: &CookiePair) -> Result<Vec<f64>> {
        pair_fuse(self.get(pair.first())?, self.get(pair.second())?)
    }
}

/// Inference scores of many pairs, reusing cached cookie embeddings.
pub fn score_pairs(
    model: &ScemnetParams,
    cache: &EmbeddingCache,
    pairs: &[CookiePair],
) -> Result<Vec<f64>> {
    let w = model.params.get(model.out_weight).row(0);
    let b = model.params.get(model.out_bias).data()[0];
    pairs
        .par_iter()
        .map(|p| Ok(sigmoid(dot(w, &cache.fused(p)?) + b)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub neg_ratio: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 256,
            epochs: 5,
            neg_ratio: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neg_ratio == 0 || self.batch_size == 0 {
            return Err(Error::invalid("negative ratio and batch size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Uniform sample without replacement of `min(ratio * positives,
/// |candidates \ truth|)` non-matching candidate pairs.
pub fn sample_negatives(
    candidates: &[CandidatePair],
    truth: &PairSet,
    ratio: usize,
    seed: u64,
) -> Vec<CookiePair> {
    let unique: BTreeSet<&CookiePair> = candidates.iter().map(|c| &c.pair).collect();
    let positives = unique.iter().filter(|p| truth.contains(p)).count();
    let pool: Vec<&CookiePair> = unique.into_iter().filter(|p| !truth.contains(p)).collect();
    let want = (ratio * positives).min(pool.len());
    let mut rng = Rng::derive(seed, 0xe9);
    rng.sample_indices(pool.len(), want)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect()
}

/// One labeled training pair, resolved to profile indices.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Example {
    pub a: usize,
    pub b: usize,
    pub label: f64,
    /// Row of the feature matrix, when one is attached.
    pub row: usize,
}

/// Positives (truth among candidates) followed by sampled negatives.
pub(crate) fn build_examples(
    truth: &PairSet,
    candidates: &[CandidatePair],
    profiles: &ProfileSet,
    neg_ratio: usize,
    seed: u64,
) -> Result<(Vec<CookiePair>, Vec<Example>)> {
    let positives: BTreeSet<&CookiePair> = candidates
        .iter()
        .map(|c| &c.pair)
        .filter(|p| truth.contains(p))
        .collect();
    if positives.is_empty() {
        return Err(Error::EmptyInput("no ground-truth pair among the candidates".into()));
    }
    let negatives = sample_negatives(candidates, truth, neg_ratio, seed);
    let mut pairs: Vec<CookiePair> = positives.into_iter().cloned().collect();
    let n_pos = pairs.len();
    pairs.extend(negatives);
    let examples = pairs
        .iter()
        .enumerate()
        .map(|(row, p)| {
            let a = profiles
                .index_of(p.first())
                .ok_or_else(|| Error::invalid(format!("unknown cookie {}", p.first())))?;
            let b = profiles
                .index_of(p.second())
                .ok_or_else(|| Error::invalid(format!("unknown cookie {}", p.second())))?;
            Ok(Example {
                a,
                b,
                label: if row < n_pos { 1.0 } else { 0.0 },
                row,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((pairs, examples))
}

/// Loss curve of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean inference-mode loss over the training examples before any update.
    pub initial_loss: f64,
    /// Mean training loss of each epoch's mini-batches.
    pub epoch_losses: Vec<f64>,
    pub n_positives: usize,
    pub n_negatives: usize,
}

/// Per-example forward/backward used by the mini-batch loop: records the
/// loss of one example and returns `(loss, loss node)`.
pub(crate) type ExampleLoss<'f> =
    dyn Fn(&mut Graph<'_>, &Example, Mode, &mut Rng) -> Result<NodeId> + Sync + 'f;

/// Mean loss and summed-then-scaled gradient of a batch. Chunks of
/// [`GRAD_CHUNK`] examples are reduced in order.
pub(crate) fn batch_gradient(
    params: &Params,
    batch: &[(usize, Example)],
    mode: Mode,
    seed: u64,
    example_loss: &ExampleLoss<'_>,
) -> Result<(f64, Gradients)> {
    let chunks: Vec<Result<(f64, Gradients)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = Gradients::zeros_like(params);
            let mut loss_sum = 0.0;
            for (pos, ex) in chunk {
                let mut rng = Rng::derive(seed, *pos as u64);
                let mut g = Graph::new(params);
                let loss = example_loss(&mut g, ex, mode, &mut rng)?;
                loss_sum += g.value(loss)[0];
                g.backward_into(loss, 1.0, &mut grads)?;
            }
            Ok((loss_sum, grads))
        })
        .collect();
    let mut total = Gradients::zeros_like(params);
    let mut loss_sum = 0.0;
    for c in chunks {
        let (l, g) = c?;
        loss_sum += l;
        total.accumulate(&g);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss_sum / n, total))
}

/// Mean loss of examples evaluated in inference mode.
pub(crate) fn mean_loss(
    params: &Params,
    examples: &[Example],
    example_loss: &ExampleLoss<'_>,
) -> Result<f64> {
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new(params);
            let mut rng = Rng::new(0);
            let node = example_loss(&mut g, ex, Mode::Infer, &mut rng)?;
            Ok(g.value(node)[0])
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / examples.len() as f64)
}

/// Mini-batch Adam over shuffled examples. `post_grad` may add terms (such
/// as regularization) to each batch gradient before the update.
pub(crate) fn run_epochs(
    params: &mut Params,
    examples: &[Example],
    cfg: &TrainConfig,
    lr_for: &(dyn Fn(ParamId) -> f64 + Sync),
    example_loss: &ExampleLoss<'_>,
    post_grad: &dyn Fn(&Params, &mut Gradients) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut adam = AdamState::new(params);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        Rng::derive(cfg.seed, 1_000 + epoch as u64).shuffle(&mut order);
        let epoch_seed = Rng::derive(cfg.seed, 2_000_000 + epoch as u64).next_u64();
        let mut weighted = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(usize, Example)> = idx
                .iter()
                .enumerate()
                .map(|(k, &i)| (bi * cfg.batch_size + k, examples[i]))
                .collect();
            let (loss, mut grads) =
                batch_gradient(params, &batch, Mode::Train, epoch_seed, example_loss)?;
            let penalty = post_grad(params, &mut grads)?;
            if !grads.is_finite() {
                return Err(Error::invalid(format!("non-finite gradient in epoch {epoch}")));
            }
            adam.step_with(params, &grads, lr_for);
            weighted += (loss + penalty) * batch.len() as f64;
        }
        curve.push(weighted / examples.len() as f64);
    }
    if !params.is_finite() {
        return Err(Error::invalid("training produced non-finite parameters"));
    }
    Ok(curve)
}

/// Train a model from `init` on truth pairs among the candidates plus
/// sampled negatives.
pub fn train_scemnet(
    init: ScemnetParams,
    truth: &PairSet,
    candidates: &[CandidatePair],
    profiles: &ProfileSet,
    cfg: &TrainConfig,
) -> Result<(ScemnetParams, TrainReport)> {
    cfg.validate()?;
    for p in profiles.profiles().iter().take(1) {
        init.check_profile(p)?;
    }
    let (_, examples) = build_examples(truth, candidates, profiles, cfg.neg_ratio, cfg.seed)?;
    let n_pos = examples.iter().filter(|e| e.label == 1.0).count();
    let shape = init.clone();
    let seqs = profiles.profiles();
    let loss_fn = |g: &mut Graph<'_>, ex: &Example, mode: Mode, rng: &mut Rng| {
        let model = &shape;
        let z = pair_embedding_node(g, model, &seqs[ex.a].sequences, &seqs[ex.b].sequences, mode, rng)?;
        let logit = g.linear(z, model.out_weight, Some(model.out_bias))?;
        g.sigmoid_bce(logit, &[ex.label])
    };
    let mut params = init.into_params();
    let initial_loss = mean_loss(&params, &examples, &loss_fn)?;
    let lr = cfg.lr;
    let curve = run_epochs(&mut params, &examples, cfg, &|_| lr, &loss_fn, &|_, _| Ok(0.0))?;
    let report = TrainReport {
        initial_loss,
        epoch_losses: curve,
        n_positives: n_pos,
        n_negatives: examples.len() - n_pos,
    };
    Ok((shape.with_params(params), report))
}

pub(crate) fn tensor_to_json(t: &Tensor) -> Value {
    fn nest(shape: &[usize], data: &[f64]) -> Value {
        if shape.len() == 1 {
            return json!(data);
        }
        let stride: usize = shape[1..].iter().product();
        Value::Array(
            data.chunks(stride)
                .map(|c| nest(&shape[1..], c))
                .collect(),
        )
    }
    json!({ "shape": t.shape(), "data": nest(t.shape(), t.data()) })
}

pub(crate) fn tensor_from_json(v: &Value) -> Result<Tensor> {
    let shape: Vec<usize> = serde_json::from_value(
        v.get("shape")
            .cloned()
            .ok_or_else(|| Error::Model("tensor lacks shape".into()))?,
    )?;
    fn flatten(v: &Value, out: &mut Vec<f64>) -> Result<()> {
        match v {
            Value::Array(items) => items.iter().try_for_each(|i| flatten(i, out)),
            Value::Number(n) => {
                out.push(n.as_f64().ok_or_else(|| Error::Model("bad number".into()))?);
                Ok(())
            }
            _ => Err(Error::Model("tensor data must be nested numbers".into())),
        }
    }
    let mut data = Vec::new();
    flatten(
        v.get("data")
            .ok_or_else(|| Error::Model("tensor lacks data".into()))?,
        &mut data,
    )?;
    Tensor::from_vec(&shape, data).map_err(|e| Error::Model(e.to_string()))
}

impl ScemnetParams {
    pub fn to_json(&self) -> Value {
        let mut named = serde_json::Map::new();
        for id in self.params.ids() {
            named.insert(self.params.name(id).to_string(), tensor_to_json(self.params.get(id)));
        }
        json!({
            "version": FORMAT_VERSION,
            "config": self.config,
            "tokenizer": self.tokenizer,
            "vocabularies": self.vocab,
            "params": named,
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        if v.get("version").and_then(Value::as_str) != Some(FORMAT_VERSION) {
            return Err(Error::Model(format!("expected version {FORMAT_VERSION}")));
        }
        let field = |k: &str| {
            v.get(k)
                .cloned()
                .ok_or_else(|| Error::Model(format!("missing field {k}")))
        };
        let config: ScemnetConfig = serde_json::from_value(field("config")?)?;
        let tokenizer: TokenizerConfig = serde_json::from_value(field("tokenizer")?)?;
        let vocab: Vec<VocabFingerprint> = serde_json::from_value(field("vocabularies")?)?;
        let mut model = ScemnetParams::init_raw(config, tokenizer, vocab, 0)?;
        let stored = field("params")?;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let t = tensor_from_json(
                stored
                    .get(&name)
                    .ok_or_else(|| Error::Model(format!("missing parameter {name}")))?,
            )?;
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::Model(format!("parameter {name} has the wrong shape")));
            }
            if !t.is_finite() {
                return Err(Error::Model(format!("parameter {name} is not finite")));
            }
            *model.params.get_mut(id) = t;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fp(size: usize) -> VocabFingerprint {
        VocabFingerprint {
            size,
            hash: format!("{size:016x}"),
        }
    }

    fn toy(seed: u64) -> ScemnetParams {
        ScemnetParams::init_raw(
            ScemnetConfig {
                widths: vec![2, 3],
                filters_per_width: 3,
                embed_dim: 4,
                dropout: 0.5,
            },
            TokenizerConfig {
                depths: vec![1, 2],
                sequence_len: 10,
                min_count: 1,
            },
            vec![fp(12), fp(15)],
            seed,
        )
        .unwrap()
    }

    fn seqs(ids: [&[u32]; 2]) -> Vec<TokenSequence> {
        ids.iter()
            .enumerate()
            .map(|(m, s)| {
                let mut v = s.to_vec();
                v.resize(10, 0);
                TokenSequence { modality: m, ids: v }
            })
            .collect()
    }

    #[test]
    fn shapes_under_default_config() {
        let cfg = ScemnetConfig::default();
        assert_eq!(cfg.cookie_dim(), 240);
        let model = ScemnetParams::init_raw(
            cfg,
            TokenizerConfig::default(),
            vec![fp(20), fp(20), fp(20), fp(20)],
            1,
        )
        .unwrap();
        assert_eq!(model.fused_dim(), 960);
        let s: Vec<TokenSequence> = (0..4)
            .map(|m| {
                let mut ids = vec![3u32; 30];
                ids.resize(128, 0);
                TokenSequence { modality: m, ids }
            })
            .collect();
        let e = seqcnn_embed(&model, 0, &s[0], Mode::Infer, &mut Rng::new(0)).unwrap();
        assert_eq!(e.len(), 240);
        let mut g = Graph::new(model.params());
        let z = pair_embedding_node(&mut g, &model, &s, &s, Mode::Infer, &mut Rng::new(0)).unwrap();
        assert_eq!(g.shape(z), (1, 960));
    }

    #[test]
    fn all_pad_sequence_embeds_to_zero() {
        let model = toy(3);
        let s = seqs([&[], &[]]);
        let e = seqcnn_embed(&model, 0, &s[0], Mode::Infer, &mut Rng::new(0)).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn infer_is_deterministic_and_symmetric() {
        let model = toy(4);
        let a = seqs([&[2, 3, 4, 5], &[7, 8, 9]]);
        let b = seqs([&[5, 5, 11], &[14, 2, 2, 2, 6]]);
        let s1 = score_sequences(&model, &a, &b, Mode::Infer, &mut Rng::new(1)).unwrap();
        let s2 = score_sequences(&model, &a, &b, Mode::Infer, &mut Rng::new(2)).unwrap();
        let s3 = score_sequences(&model, &b, &a, Mode::Infer, &mut Rng::new(3)).unwrap();
        assert_eq!(s1.to_bits(), s2.to_bits());
        assert_eq!(s1.to_bits(), s3.to_bits());
    }

    #[test]
    fn zero_output_layer_scores_half() {
        let mut model = toy(5);
        let w = model.output_weight();
        model.params_mut().get_mut(w).data_mut().fill(0.0);
        let a = seqs([&[2, 3], &[4]]);
        let b = seqs([&[9], &[1, 1, 13]]);
        assert_eq!(score_sequences(&model, &a, &b, Mode::Infer, &mut Rng::new(0)).unwrap(), 0.5);
    }

    #[test]
    fn trimming_padding_is_exact() {
        let model = toy(6);
        let short = seqs([&[2, 3, 4], &[5]]);
        let mut g = Graph::new(model.params());
        let trimmed = tower_node(&mut g, &model, 0, &short[0], Mode::Infer, &mut Rng::new(0)).unwrap();
        let trimmed = g.value(trimmed).to_vec();
        // full-length evaluation without the trimming shortcut
        let mut g = Graph::new(model.params());
        let emb = g.embed(model.embedding(0), &short[0].ids).unwrap();
        let mut pooled = Vec::new();
        for wi in 0..2 {
            let (f, b) = model.conv(0, wi);
            let c = g.conv1d_relu(emb, f, b).unwrap();
            pooled.push(g.max_over_time(c).unwrap());
        }
        let cat = g.concat(&pooled).unwrap();
        assert_eq!(g.value(cat), trimmed.as_slice());
    }

    #[test]
    fn fuse_ops() {
        assert_eq!(pair_fuse(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), vec![3.0, 8.0]);
        assert_eq!(pair_fuse(&[1.5, -2.0], &[1.0, 1.0]).unwrap(), vec![1.5, -2.0]);
        assert_eq!(pair_fuse(&[1.5, -2.0], &[0.0, 0.0]).unwrap(), vec![0.0, -0.0]);
        assert!(pair_fuse(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(
            multimodal_fuse(&[vec![1.0], vec![2.0]], 2).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            multimodal_fuse(&[vec![2.0], vec![1.0]], 2).unwrap(),
            vec![2.0, 1.0]
        );
        assert_eq!(multimodal_fuse(&vec![vec![0.0; 240]; 4], 4).unwrap().len(), 960);
        assert!(multimodal_fuse(&[vec![1.0]], 2).is_err());
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let model = toy(8);
        let text = serde_json::to_string(&model.to_json()).unwrap();
        let back = ScemnetParams::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, model);
        let a = seqs([&[2, 3, 4], &[5, 6]]);
        let b = seqs([&[3, 4], &[6, 7, 8]]);
        let s1 = score_sequences(&model, &a, &b, Mode::Infer, &mut Rng::new(0)).unwrap();
        let s2 = score_sequences(&back, &a, &b, Mode::Infer, &mut Rng::new(0)).unwrap();
        assert_eq!(s1.to_bits(), s2.to_bits());
    }

    #[test]
    fn json_rejects_wrong_version() {
        let mut v = toy(1).to_json();
        v["version"] = json!("scemnet-v0");
        assert!(ScemnetParams::from_json(&v).is_err());
    }

    fn cand(a: &str, b: &str) -> CandidatePair {
        CandidatePair {
            pair: CookiePair::new(a, b).unwrap(),
            retrieval_score: 0.5,
        }
    }

    #[test]
    fn negatives_contract() {
        let cands: Vec<CandidatePair> = (0..10).map(|i| cand("x", &format!("y{i}"))).collect();
        let truth: PairSet = cands.iter().take(2).map(|c| c.pair.clone()).collect();
        let neg = sample_negatives(&cands, &truth, 4, 11);
        assert_eq!(neg.len(), 8);
        assert!(neg.iter().all(|p| !truth.contains(p)));
        assert_eq!(neg, sample_negatives(&cands, &truth, 4, 11));

        let all: PairSet = cands.iter().map(|c| c.pair.clone()).collect();
        assert!(sample_negatives(&cands, &all, 4, 1).is_empty());

        let neg = sample_negatives(&cands, &truth, 1, 3);
        assert_eq!(neg.len(), 2);
    }
}
