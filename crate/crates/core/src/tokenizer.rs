//! URL-depth tokenization into fixed-length per-modality id sequences.
//!
//! Modality `m` views every URL truncated at depth `depths[m]`: the host
//! joined with the first `depth - 1` path segments. Each modality has its own
//! vocabulary where id 0 is padding and id 1 is the shared out-of-vocabulary
//! bucket.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::EventLog;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const OOV: u32 = 1;
const PAD_TOKEN: &str = "<pad>";
const OOV_TOKEN: &str = "<oov>";

/// Widest convolution the ranker applies; sequences must be at least this long.
pub const MIN_SEQUENCE_LEN: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub depths: Vec<usize>,
    pub sequence_len: usize,
    pub min_count: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            depths: vec![1, 2, 3, 4],
            sequence_len: 128,
            min_count: 2,
        }
    }
}

impl TokenizerConfig {
    pub fn modalities(&self) -> usize {
        self.depths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() {
            return Err(Error::invalid("at least one modality depth is required"));
        }
        if self.depths.iter().any(|&d| d == 0) {
            return Err(Error::invalid("depths must be positive"));
        }
        if self.sequence_len < MIN_SEQUENCE_LEN {
            return Err(Error::invalid(format!(
                "sequence length {} below the widest filter ({MIN_SEQUENCE_LEN})",
                self.sequence_len
            )));
        }
        if self.min_count == 0 {
            return Err(Error::invalid("min_count must be positive"));
        }
        Ok(())
    }
}

/// Token for `url` at `depth`: scheme, query and fragment stripped, host
/// plus the first `depth - 1` path segments, lowercased.
pub fn url_token(url: &str, depth: usize) -> String {
    let lower = url.to_lowercase();
    let mut rest = lower.as_str();
    for scheme in ["https://", "http://"] {
        if let Some(stripped) = rest.strip_prefix(scheme) {
            rest = stripped;
            break;
        }
    }
    let end = rest.find(['?', '#']).unwrap_or(rest.len());
    let rest = &rest[..end];
    let segments: Vec<&str> = rest.split('/').filter(|s| !s.is_empty()).collect();
    if segments.is_empty() {
        return lower;
    }
    let take = depth.max(1).min(segments.len());
    segments[..take].join("/")
}

/// Bidirectional token/id map for one modality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    modality: usize,
    depth: usize,
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
}

/// Identity of a vocabulary: size plus a content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabFingerprint {
    pub size: usize,
    pub hash: String,
}

impl Vocabulary {
    fn from_ranked(modality: usize, depth: usize, ranked: Vec<(String, u64)>, oov: u64) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), OOV_TOKEN.to_string()];
        let mut counts = vec![0, oov];
        for (tok, c) in ranked {
            tokens.push(tok);
            counts.push(c);
        }
        let index = tokens
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            modality,
            depth,
            tokens,
            counts,
            index,
        }
    }

    pub fn modality(&self) -> usize {
        self.modality
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Always false: PAD and OOV are present.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(OOV)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    pub fn fingerprint(&self) -> VocabFingerprint {
        let mut h = Sha256::new();
        h.update(self.depth.to_le_bytes());
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        let digest = h.finalize();
        VocabFingerprint {
            size: self.len(),
            hash: digest[..8].iter().map(|b| format!("{b:02x}")).collect(),
        }
    }

    /// `#modality=<m> depth=<d> size=<V>` header followed by
    /// `token<TAB>id<TAB>count` lines in id order.
    pub fn write_tsv<W: Write>(&self, mut sink: W) -> Result<()> {
        writeln!(
            sink,
            "#modality={} depth={} size={}",
            self.modality,
            self.depth,
            self.len()
        )?;
        for (id, (tok, c)) in self.tokens.iter().zip(&self.counts).enumerate() {
            writeln!(sink, "{tok}\t{id}\t{c}")?;
        }
        sink.flush()?;
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing vocabulary header"))??;
        let mut fields = BTreeMap::new();
        for part in header
            .strip_prefix('#')
            .ok_or_else(|| Error::parse(1, "header must start with '#'"))?
            .split_whitespace()
        {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::parse(1, format!("bad header field {part:?}")))?;
            let v: usize = v
                .parse()
                .map_err(|_| Error::parse(1, format!("bad header value {v:?}")))?;
            fields.insert(k.to_string(), v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::parse(1, format!("header lacks {k}")))
        };
        let (modality, depth, size) = (get("modality")?, get("depth")?, get("size")?);
        let mut ranked = Vec::new();
        let mut oov = 0;
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::parse(line_no, "expected token, id, count"));
            }
            let id: usize = parts[1]
                .parse()
                .map_err(|_| Error::parse(line_no, "bad id"))?;
            let count: u64 = parts[2]
                .parse()
                .map_err(|_| Error::parse(line_no, "bad count"))?;
            if id != i {
                return Err(Error::parse(line_no, "ids must be dense and ordered"));
            }
            match id {
                0 => {}
                1 => oov = count,
                _ => ranked.push((parts[0].to_string(), count)),
            }
        }
        let vocab = Vocabulary::from_ranked(modality, depth, ranked, oov);
        if vocab.len() != size {
            return Err(Error::parse(1, format!("header size {size} != {}", vocab.len())));
        }
        Ok(vocab)
    }
}

/// Count depth tokens over the corpus and assign ids by descending count,
/// then ascending token string. Tokens seen fewer than `min_count` times are
/// left out and encode to OOV.
pub fn build_vocab(
    corpus: &[EventLog],
    modality: usize,
    depth: usize,
    min_count: usize,
) -> Vocabulary {
    let counts = corpus
        .par_iter()
        .fold(HashMap::<String, u64>::new, |mut acc, log| {
            for e in log.events() {
                *acc.entry(url_token(&e.url, depth)).or_default() += 1;
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_default() += v;
            }
            a
        });
    let mut ranked: Vec<(String, u64)> = Vec::with_capacity(counts.len());
    let mut oov = 0;
    for (tok, c) in counts {
        if c >= min_count as u64 {
            ranked.push((tok, c));
        } else {
            oov += c;
        }
    }
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_ranked(modality, depth, ranked, oov)
}

/// Fixed-length id sequence of one cookie in one modality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub modality: usize,
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Length of the prefix that ends at the last non-PAD id.
    pub fn content_len(&self) -> usize {
        self.ids.iter().rposition(|&id| id != PAD).map_or(0, |p| p + 1)
    }
}

/// Map each event to its depth token id, keep the most recent `len` ids and
/// right-pad with PAD.
pub fn encode_cookie(log: &EventLog, vocab: &Vocabulary, len: usize) -> TokenSequence {
    let all: Vec<u32> = log
        .events()
        .iter()
        .map(|e| vocab.id(&url_token(&e.url, vocab.depth())))
        .collect();
    let start = all.len().saturating_sub(len);
    let mut ids = all[start..].to_vec();
    ids.resize(len, PAD);
    TokenSequence {
        modality: vocab.modality(),
        ids,
    }
}

/// The per-modality vocabularies of a tokenizer configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    config: TokenizerConfig,
    vocabs: Vec<Vocabulary>,
}

impl Lexicon {
    pub fn build(corpus: &[EventLog], config: &TokenizerConfig) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(Error::EmptyInput("corpus has no cookies".into()));
        }
        let vocabs = config
            .depths
            .iter()
            .enumerate()
            .map(|(m, &d)| build_vocab(corpus, m, d, config.min_count))
            .collect();
        Ok(Lexicon {
            config: config.clone(),
            vocabs,
        })
    }

    pub fn from_parts(config: TokenizerConfig, vocabs: Vec<Vocabulary>) -> Result<Self> {
        config.validate()?;
        if vocabs.len() != config.modalities()
            || vocabs
                .iter()
                .zip(&config.depths)
                .enumerate()
                .any(|(m, (v, &d))| v.modality() != m || v.depth() != d)
        {
            return Err(Error::VocabularyMismatch(
                "vocabularies do not match the configured depths".into(),
            ));
        }
        Ok(Lexicon { config, vocabs })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn vocabs(&self) -> &[Vocabulary] {
        &self.vocabs
    }

    pub fn vocab(&self, modality: usize) -> &Vocabulary {
        &self.vocabs[modality]
    }

    /// Modality index tokenized at `depth`, if any.
    pub fn modality_at_depth(&self, depth: usize) -> Option<usize> {
        self.config.depths.iter().position(|&d| d == depth)
    }

    pub fn fingerprints(&self) -> Vec<VocabFingerprint> {
        self.vocabs.iter().map(Vocabulary::fingerprint).collect()
    }
}
