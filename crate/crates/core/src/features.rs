//! Baseline pairwise features: TF-IDF cosines, term matching and time
//! features.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use crate::corpus::{CookiePair, EventLog};
use crate::error::{Error, Result};
use crate::profile::{CookieProfile, IdfTable, ProfileSet};
use crate::tokenizer::{Lexicon, VocabFingerprint, OOV, PAD};

/// Number of fixed baseline columns.
pub const BASE_FEATURES: usize = 11;

pub const FEATURE_NAMES: [&str; BASE_FEATURES] = [
    "tfidf_cos_d1",
    "tfidf_cos_d2",
    "tfidf_cos_d3",
    "tfidf_cos_d4",
    "jaccard_d1",
    "log1p_shared_d4",
    "hour_cos",
    "dow_cos",
    "span_overlap",
    "log1p_min_events",
    "log1p_max_events",
];

/// Sparse non-negative vector with strictly increasing ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVector {
    entries: Vec<(u32, f64)>,
}

impl SparseVector {
    /// Build from arbitrary entries; duplicate ids are summed and
    /// non-positive weights dropped.
    pub fn from_entries(entries: impl IntoIterator<Item = (u32, f64)>) -> Self {
        let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
        for (id, w) in entries {
            *acc.entry(id).or_default() += w;
        }
        SparseVector {
            entries: acc.into_iter().filter(|&(_, w)| w > 0.0).collect(),
        }
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|&(id, _)| id)
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|&(_, w)| w * w).sum::<f64>().sqrt()
    }

    /// Reweight by `idf`; zero-weight entries vanish.
    pub fn tfidf(&self, idf: &IdfTable) -> SparseVector {
        SparseVector {
            entries: self
                .entries
                .iter()
                .map(|&(id, tf)| (id, tf * idf.get(id)))
                .filter(|&(_, w)| w > 0.0)
                .collect(),
        }
    }
}

/// Raw counts per id with PAD and OOV dropped.
pub fn tf_vector(ids: &[u32]) -> SparseVector {
    SparseVector::from_entries(
        ids.iter()
            .filter(|&&id| id != PAD && id != OOV)
            .map(|&id| (id, 1.0)),
    )
}

/// `idf(id) = ln(n_docs / df(id))` over the ids present in `docs`.
pub fn idf_weights<'a>(
    docs: impl IntoIterator<Item = &'a SparseVector>,
    n_docs: usize,
) -> BTreeMap<u32, f64> {
    let mut df: BTreeMap<u32, usize> = BTreeMap::new();
    for doc in docs {
        for id in doc.ids() {
            *df.entry(id).or_default() += 1;
        }
    }
    df.into_iter()
        .map(|(id, d)| (id, (n_docs as f64 / d as f64).ln()))
        .collect()
}

fn dot(a: &SparseVector, b: &SparseVector) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    let (ea, eb) = (a.entries(), b.entries());
    while i < ea.len() && j < eb.len() {
        match ea[i].0.cmp(&eb[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += ea[i].1 * eb[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

/// Cosine similarity, 0 when either vector is zero. Clamped to `[0, 1]`
/// against rounding.
pub fn cosine(a: &SparseVector, b: &SparseVector) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(0.0, 1.0)
}

/// Jaccard index and intersection size of two sorted id sets.
pub fn term_match(a: &[u32], b: &[u32]) -> (f64, usize) {
    let (mut i, mut j, mut shared) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                shared += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - shared;
    if union == 0 {
        (0.0, 0)
    } else {
        (shared as f64 / union as f64, shared)
    }
}

/// Hour-of-day and day-of-week histograms plus activity span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeProfile {
    pub hour_hist: [u32; 24],
    pub dow_hist: [u32; 7],
    pub t_min: i64,
    pub t_max: i64,
    pub n_events: usize,
}

pub fn time_profile(log: &EventLog) -> Result<TimeProfile> {
    let events = log.events();
    if events.is_empty() {
        return Err(Error::EmptyInput("time profile of an empty log".into()));
    }
    let mut p = TimeProfile {
        hour_hist: [0; 24],
        dow_hist: [0; 7],
        t_min: i64::MAX,
        t_max: i64::MIN,
        n_events: events.len(),
    };
    for e in events {
        let hour = e.timestamp.div_euclid(3600).rem_euclid(24) as usize;
        let dow = e.timestamp.div_euclid(86_400).rem_euclid(7) as usize;
        p.hour_hist[hour] += 1;
        p.dow_hist[dow] += 1;
        p.t_min = p.t_min.min(e.timestamp);
        p.t_max = p.t_max.max(e.timestamp);
    }
    Ok(p)
}

fn hist_cosine(a: &[u32], b: &[u32]) -> f64 {
    let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        d += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (d / (na.sqrt() * nb.sqrt())).clamp(0.0, 1.0)
    }
}

/// Returns `(hour_cos, dow_cos, span_overlap)`.
pub fn time_features(a: &TimeProfile, b: &TimeProfile) -> (f64, f64, f64) {
    let hour = hist_cosine(&a.hour_hist, &b.hour_hist);
    let dow = hist_cosine(&a.dow_hist, &b.dow_hist);
    let hull = a.t_max.max(b.t_max) - a.t_min.min(b.t_min);
    let inter = (a.t_max.min(b.t_max) - a.t_min.max(b.t_min)).max(0);
    let overlap = if hull == 0 {
        1.0
    } else {
        inter as f64 / hull as f64
    };
    (hour, dow, overlap)
}

/// Baseline columns followed by any extra columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Lexicon, IDF tables and the modality of every feature depth.
#[derive(Debug, Clone)]
pub struct FeatureSpace<'a> {
    idf: &'a [IdfTable],
    depth_modality: [usize; 4],
    identity: Vec<VocabFingerprint>,
}

impl<'a> FeatureSpace<'a> {
    pub fn new(lexicon: &Lexicon, idf: &'a [IdfTable]) -> Result<Self> {
        let mut depth_modality = [0; 4];
        for (slot, depth) in depth_modality.iter_mut().zip(1..=4) {
            *slot = lexicon.modality_at_depth(depth).ok_or_else(|| {
                Error::invalid(format!("baseline features need a modality at depth {depth}"))
            })?;
        }
        if idf.len() != lexicon.vocabs().len() {
            return Err(Error::VocabularyMismatch("one IDF table per modality".into()));
        }
        Ok(FeatureSpace {
            idf,
            depth_modality,
            identity: lexicon.fingerprints(),
        })
    }

    pub fn of(profiles: &'a ProfileSet) -> Result<Self> {
        Self::new(profiles.lexicon(), profiles.idf())
    }
}

fn id_set(v: &SparseVector) -> Vec<u32> {
    v.ids().collect()
}

/// The 11 baseline features of a pair followed by `extras`.
pub fn assemble(
    a: &CookieProfile,
    b: &CookieProfile,
    space: &FeatureSpace<'_>,
    extras: &[f64],
) -> Result<FeatureVector> {
    if !a.same_vocabularies(b) || a.vocab_identity() != space.identity.as_slice() {
        return Err(Error::VocabularyMismatch(format!(
            "cookies {} and {} were not encoded under the feature lexicon",
            a.cookie_id, b.cookie_id
        )));
    }
    let mut values = Vec::with_capacity(BASE_FEATURES + extras.len());
    for &m in &space.depth_modality {
        let idf = &space.idf[m];
        values.push(cosine(&a.term_counts[m].tfidf(idf), &b.term_counts[m].tfidf(idf)));
    }
    let d1 = space.depth_modality[0];
    let (jaccard, _) = term_match(&id_set(&a.term_counts[d1]), &id_set(&b.term_counts[d1]));
    values.push(jaccard);
    let d4 = space.depth_modality[3];
    let (_, shared) = term_match(&id_set(&a.term_counts[d4]), &id_set(&b.term_counts[d4]));
    values.push((shared as f64).ln_1p());
    let (hour, dow, overlap) = time_features(&a.time, &b.time);
    values.extend([hour, dow, overlap]);
    let (na, nb) = (a.time.n_events as f64, b.time.n_events as f64);
    values.push(na.min(nb).ln_1p());
    values.push(na.max(nb).ln_1p());
    values.extend_from_slice(extras);
    Ok(FeatureVector { values })
}

/// Write `cookie_a<TAB>cookie_b<TAB>f0<TAB>...` rows with six decimals.
pub fn write_feature_rows<W: Write>(
    rows: &[(CookiePair, FeatureVector)],
    mut sink: W,
) -> Result<()> {
    for (pair, fv) in rows {
        let mut line = pair.to_string();
        for v in &fv.values {
            line.push('\t');
            line.push_str(&format!("{v:.6}"));
        }
        line.push('\n');
        sink.write_all(line.as_bytes())?;
    }
    sink.flush()?;
    Ok(())
}

/// Read rows of `cookie_a<TAB>cookie_b<TAB>value...`; every row must have
/// the same number of values. Lines starting with `#` are skipped. Used for
/// feature matrices and extras files.
pub fn read_feature_rows<R: BufRead>(reader: R) -> Result<Vec<(CookiePair, FeatureVector)>> {
    let mut rows = Vec::new();
    let mut width = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::parse(line_no, "expected a pair and at least one value"));
        }
        if *width.get_or_insert(fields.len()) != fields.len() {
            return Err(Error::parse(line_no, "inconsistent column count"));
        }
        let pair = CookiePair::new(fields[0], fields[1])
            .map_err(|e| Error::parse(line_no, e.to_string()))?;
        let values = fields[2..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(line_no, format!("bad value {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((pair, FeatureVector { values }));
    }
    Ok(rows)
}

/// Extras keyed by pair.
pub fn extras_map(rows: Vec<(CookiePair, FeatureVector)>) -> HashMap<CookiePair, Vec<f64>> {
    rows.into_iter().map(|(p, f)| (p, f.values)).collect()
}
