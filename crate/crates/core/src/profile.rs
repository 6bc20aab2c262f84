//! Per-cookie derived state shared by retrieval, features and the rankers.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::corpus::EventLog;
use crate::error::{Error, Result};
use crate::features::{idf_weights, tf_vector, time_profile, SparseVector, TimeProfile};
use crate::tokenizer::{encode_cookie, url_token, Lexicon, TokenSequence, VocabFingerprint};

/// A cookie encoded under a [`Lexicon`].
#[derive(Debug, Clone)]
pub struct CookieProfile {
    pub cookie_id: String,
    /// One fixed-length sequence per modality.
    pub sequences: Vec<TokenSequence>,
    /// Raw term counts over the full history, one per modality.
    pub term_counts: Vec<SparseVector>,
    pub time: TimeProfile,
    vocab_identity: Arc<Vec<VocabFingerprint>>,
}

impl CookieProfile {
    pub fn encode(log: &EventLog, lexicon: &Lexicon) -> Result<Self> {
        Self::encode_with(log, lexicon, Arc::new(lexicon.fingerprints()))
    }

    fn encode_with(
        log: &EventLog,
        lexicon: &Lexicon,
        identity: Arc<Vec<VocabFingerprint>>,
    ) -> Result<Self> {
        let len = lexicon.config().sequence_len;
        let mut sequences = Vec::with_capacity(lexicon.vocabs().len());
        let mut term_counts = Vec::with_capacity(lexicon.vocabs().len());
        for vocab in lexicon.vocabs() {
            sequences.push(encode_cookie(log, vocab, len));
            let ids: Vec<u32> = log
                .events()
                .iter()
                .map(|e| vocab.id(&url_token(&e.url, vocab.depth())))
                .collect();
            term_counts.push(tf_vector(&ids));
        }
        Ok(CookieProfile {
            cookie_id: log.cookie_id().to_string(),
            sequences,
            term_counts,
            time: time_profile(log)?,
            vocab_identity: identity,
        })
    }

    pub fn vocab_identity(&self) -> &[VocabFingerprint] {
        &self.vocab_identity
    }

    pub fn same_vocabularies(&self, other: &CookieProfile) -> bool {
        Arc::ptr_eq(&self.vocab_identity, &other.vocab_identity)
            || self.vocab_identity == other.vocab_identity
    }
}

/// Inverse document frequencies for one modality, dense by token id.
#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    pub weights: Vec<f64>,
    pub n_docs: usize,
}

impl IdfTable {
    pub fn get(&self, id: u32) -> f64 {
        self.weights.get(id as usize).copied().unwrap_or(0.0)
    }
}

/// All cookies of a corpus encoded under one lexicon, plus corpus IDF.
#[derive(Debug, Clone)]
pub struct ProfileSet {
    lexicon: Lexicon,
    profiles: Vec<CookieProfile>,
    idf: Vec<IdfTable>,
    by_id: HashMap<String, usize>,
}

impl ProfileSet {
    /// Encode every log; profiles keep the order of `logs`.
    pub fn build(logs: &[EventLog], lexicon: Lexicon) -> Result<Self> {
        if logs.is_empty() {
            return Err(Error::EmptyInput("no cookies to profile".into()));
        }
        let identity = Arc::new(lexicon.fingerprints());
        let profiles: Vec<CookieProfile> = logs
            .par_iter()
            .map(|log| CookieProfile::encode_with(log, &lexicon, identity.clone()))
            .collect::<Result<_>>()?;
        let n = profiles.len();
        let idf = lexicon
            .vocabs()
            .iter()
            .enumerate()
            .map(|(m, vocab)| {
                let map = idf_weights(profiles.iter().map(|p| &p.term_counts[m]), n);
                let mut weights = vec![0.0; vocab.len()];
                for (id, w) in map {
                    weights[id as usize] = w;
                }
                IdfTable { weights, n_docs: n }
            })
            .collect();
        let mut by_id = HashMap::with_capacity(n);
        for (i, p) in profiles.iter().enumerate() {
            if by_id.insert(p.cookie_id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate cookie id {}", p.cookie_id)));
            }
        }
        Ok(ProfileSet {
            lexicon,
            profiles,
            idf,
            by_id,
        })
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn profiles(&self) -> &[CookieProfile] {
        &self.profiles
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn idf(&self) -> &[IdfTable] {
        &self.idf
    }

    pub fn index_of(&self, cookie_id: &str) -> Option<usize> {
        self.by_id.get(cookie_id).copied()
    }

    pub fn get(&self, cookie_id: &str) -> Option<&CookieProfile> {
        self.index_of(cookie_id).map(|i| &self.profiles[i])
    }

    /// Look up a cookie or fail with a descriptive error.
    pub fn require(&self, cookie_id: &str) -> Result<&CookieProfile> {
        self.get(cookie_id)
            .ok_or_else(|| Error::invalid(format!("unknown cookie {cookie_id}")))
    }
}
