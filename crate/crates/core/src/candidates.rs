//! Candidate pair generation: exact top-k neighbors under TF-IDF cosine,
//! answered from an inverted index, with a brute-force scan as oracle.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::corpus::{CookiePair, ScoredPair};
use crate::error::{Error, Result};
use crate::features::{cosine, SparseVector};
use crate::profile::ProfileSet;

pub const DEFAULT_RETRIEVAL_DEPTH: usize = 2;
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone)]
pub struct InvertedIndex {
    postings: Vec<Vec<(usize, f64)>>,
    vectors: Vec<SparseVector>,
    norms: Vec<f64>,
    cookie_ids: Vec<String>,
}

impl InvertedIndex {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn posting(&self, token: u32) -> &[(usize, f64)] {
        self.postings
            .get(token as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Cookies with an empty weighted vector never produce candidates.
    pub fn is_indexable(&self, cookie: usize) -> bool {
        self.norms[cookie] > 0.0
    }

    pub fn cookie_id(&self, cookie: usize) -> &str {
        &self.cookie_ids[cookie]
    }
}

fn retrieval_modality(profiles: &ProfileSet, depth: usize) -> Result<usize> {
    profiles
        .lexicon()
        .modality_at_depth(depth)
        .ok_or_else(|| Error::invalid(format!("no modality tokenized at retrieval depth {depth}")))
}

fn weighted_vectors(profiles: &ProfileSet, modality: usize) -> Vec<SparseVector> {
    let idf = &profiles.idf()[modality];
    profiles
        .profiles()
        .iter()
        .map(|p| p.term_counts[modality].tfidf(idf))
        .collect()
}

pub fn build_index(profiles: &ProfileSet, depth: usize) -> Result<InvertedIndex> {
    let modality = retrieval_modality(profiles, depth)?;
    let vectors = weighted_vectors(profiles, modality);
    let mut postings = vec![Vec::new(); profiles.lexicon().vocab(modality).len()];
    for (c, v) in vectors.iter().enumerate() {
        for &(id, w) in v.entries() {
            postings[id as usize].push((c, w));
        }
    }
    let norms = vectors.iter().map(SparseVector::norm).collect();
    Ok(InvertedIndex {
        postings,
        vectors,
        norms,
        cookie_ids: profiles.profiles().iter().map(|p| p.cookie_id.clone()).collect(),
    })
}

fn rank(hits: &mut Vec<(usize, f64)>, ids: &[String], k: usize) {
    hits.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| ids[a.0].cmp(&ids[b.0]))
    });
    hits.truncate(k);
}

/// Exact top-k of `cookie` by accumulating dot products over the posting
/// lists of its tokens. Ties go to the smaller cookie id; only cookies
/// sharing a token are returned.
pub fn topk_neighbors(index: &InvertedIndex, cookie: usize, k: usize) -> Vec<(usize, f64)> {
    let mut acc = vec![0.0; index.len()];
    topk_with(index, cookie, k, &mut acc)
}

fn topk_with(index: &InvertedIndex, cookie: usize, k: usize, acc: &mut [f64]) -> Vec<(usize, f64)> {
    if k == 0 || !index.is_indexable(cookie) {
        return Vec::new();
    }
    let mut touched = Vec::new();
    for &(id, wq) in index.vectors[cookie].entries() {
        for &(other, wc) in index.posting(id) {
            if other == cookie {
                continue;
            }
            if acc[other] == 0.0 {
                touched.push(other);
            }
            acc[other] += wq * wc;
        }
    }
    let nq = index.norms[cookie];
    let mut hits: Vec<(usize, f64)> = touched
        .iter()
        .map(|&c| {
            let s = (acc[c] / (nq * index.norms[c])).clamp(0.0, 1.0);
            acc[c] = 0.0;
            (c, s)
        })
        .collect();
    rank(&mut hits, &index.cookie_ids, k);
    hits
}

/// Same contract as [`topk_neighbors`] by scanning every cookie.
pub fn brute_force_neighbors(
    profiles: &ProfileSet,
    depth: usize,
    cookie: usize,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    let modality = retrieval_modality(profiles, depth)?;
    let vectors = weighted_vectors(profiles, modality);
    Ok(brute_force_with(&vectors, profiles, cookie, k))
}

fn brute_force_with(
    vectors: &[SparseVector],
    profiles: &ProfileSet,
    cookie: usize,
    k: usize,
) -> Vec<(usize, f64)> {
    let query = &vectors[cookie];
    let shares = |other: &SparseVector| {
        let ids: Vec<u32> = other.ids().collect();
        query.ids().any(|id| ids.binary_search(&id).is_ok())
    };
    let mut hits: Vec<(usize, f64)> = vectors
        .iter()
        .enumerate()
        .filter(|&(c, v)| c != cookie && shares(v))
        .map(|(c, v)| (c, cosine(query, v)))
        .collect();
    let ids: Vec<String> = profiles.profiles().iter().map(|p| p.cookie_id.clone()).collect();
    rank(&mut hits, &ids, k);
    hits
}

/// Canonical pair with the best cosine that retrieved it.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePair {
    pub pair: CookiePair,
    pub retrieval_score: f64,
}

impl From<&CandidatePair> for ScoredPair {
    fn from(c: &CandidatePair) -> Self {
        ScoredPair::new(c.pair.clone(), c.retrieval_score)
    }
}

fn merge_directed(
    profiles: &ProfileSet,
    lists: Vec<(usize, Vec<(usize, f64)>)>,
) -> Vec<CandidatePair> {
    let ids = profiles.profiles();
    let mut best: BTreeMap<CookiePair, f64> = BTreeMap::new();
    for (q, hits) in lists {
        for (c, s) in hits {
            let pair = CookiePair::new(ids[q].cookie_id.as_str(), ids[c].cookie_id.as_str())
                .expect("neighbors exclude self");
            let e = best.entry(pair).or_insert(s);
            if s > *e {
                *e = s;
            }
        }
    }
    best.into_iter()
        .map(|(pair, retrieval_score)| CandidatePair {
            pair,
            retrieval_score,
        })
        .collect()
}

/// Union over cookies of their top-k neighbor pairs, sorted by pair.
pub fn generate_candidates(
    profiles: &ProfileSet,
    depth: usize,
    k: usize,
) -> Result<Vec<CandidatePair>> {
    if profiles.len() < 2 {
        return Err(Error::invalid("candidate generation needs at least two cookies"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let index = build_index(profiles, depth)?;
    let lists: Vec<(usize, Vec<(usize, f64)>)> = (0..index.len())
        .into_par_iter()
        .map_init(
            || vec![0.0; index.len()],
            |acc, q| (q, topk_with(&index, q, k, acc)),
        )
        .collect();
    Ok(merge_directed(profiles, lists))
}

/// Oracle for [`generate_candidates`] built from exhaustive scans.
pub fn brute_force_candidates(
    profiles: &ProfileSet,
    depth: usize,
    k: usize,
) -> Result<Vec<CandidatePair>> {
    let modality = retrieval_modality(profiles, depth)?;
    let vectors = weighted_vectors(profiles, modality);
    let lists = (0..profiles.len())
        .map(|q| (q, brute_force_with(&vectors, profiles, q, k)))
        .collect();
    Ok(merge_directed(profiles, lists))
}
