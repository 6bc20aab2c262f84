//! Data model and TSV ingestion/serialization for event logs, ground-truth
//! pairs and scored pairs.
//!
//! Formats (UTF-8, LF line endings, one record per line):
//!
//! * events: `cookie_id<TAB>timestamp<TAB>url`
//! * pairs: `cookie_a<TAB>cookie_b`
//! * scored pairs: `cookie_a<TAB>cookie_b<TAB>score` with six decimals

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub url: String,
    pub timestamp: i64,
}

/// One cookie's browsing history, ordered by timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventLog {
    cookie_id: String,
    events: Vec<Event>,
}

impl EventLog {
    /// Build a log, sorting events by timestamp (stable on ties).
    pub fn new(cookie_id: impl Into<String>, mut events: Vec<Event>) -> Result<Self> {
        let cookie_id = cookie_id.into();
        if cookie_id.is_empty() {
            return Err(Error::invalid("empty cookie id"));
        }
        if events.is_empty() {
            return Err(Error::EmptyInput(format!("cookie {cookie_id} has no events")));
        }
        events.sort_by_key(|e| e.timestamp);
        Ok(EventLog { cookie_id, events })
    }

    pub fn cookie_id(&self) -> &str {
        &self.cookie_id
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// An unordered cookie pair stored with `first < second`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CookiePair {
    first: String,
    second: String,
}

impl CookiePair {
    /// Canonicalize `(a, b)`. Self-pairs are rejected.
    pub fn new(a: impl Into<String>, b: impl Into<String>) -> Result<Self> {
        let (a, b) = (a.into(), b.into());
        match a.cmp(&b) {
            std::cmp::Ordering::Less => Ok(CookiePair { first: a, second: b }),
            std::cmp::Ordering::Greater => Ok(CookiePair { first: b, second: a }),
            std::cmp::Ordering::Equal => Err(Error::invalid(format!("self-pair ({a}, {b})"))),
        }
    }

    pub fn first(&self) -> &str {
        &self.first
    }

    pub fn second(&self) -> &str {
        &self.second
    }

    pub fn contains(&self, cookie: &str) -> bool {
        self.first == cookie || self.second == cookie
    }
}

impl fmt::Display for CookiePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}", self.first, self.second)
    }
}

/// A set of canonical pairs, iterated in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSet {
    pairs: BTreeSet<CookiePair>,
}

impl PairSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, pair: CookiePair) -> bool {
        self.pairs.insert(pair)
    }

    pub fn contains(&self, pair: &CookiePair) -> bool {
        self.pairs.contains(pair)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CookiePair> + '_ {
        self.pairs.iter()
    }

    pub fn intersection_len(&self, other: &PairSet) -> usize {
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.iter().filter(|p| large.contains(p)).count()
    }

    /// Pairs whose two cookies both satisfy `keep`.
    pub fn restrict(&self, mut keep: impl FnMut(&str) -> bool) -> PairSet {
        self.iter()
            .filter(|p| keep(p.first()) && keep(p.second()))
            .cloned()
            .collect()
    }
}

impl FromIterator<CookiePair> for PairSet {
    fn from_iter<I: IntoIterator<Item = CookiePair>>(iter: I) -> Self {
        PairSet {
            pairs: iter.into_iter().collect(),
        }
    }
}

impl IntoIterator for PairSet {
    type Item = CookiePair;
    type IntoIter = std::collections::btree_set::IntoIter<CookiePair>;

    fn into_iter(self) -> Self::IntoIter {
        self.pairs.into_iter()
    }
}

impl<'a> IntoIterator for &'a PairSet {
    type Item = &'a CookiePair;
    type IntoIter = std::collections::btree_set::Iter<'a, CookiePair>;

    fn into_iter(self) -> Self::IntoIter {
        self.pairs.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pair: CookiePair,
    pub score: f64,
}

impl ScoredPair {
    pub fn new(pair: CookiePair, score: f64) -> Self {
        ScoredPair { pair, score }
    }
}

/// Parse `cookie_id<TAB>timestamp<TAB>url` lines into per-cookie logs,
/// returned in ascending cookie-id order. Blank lines are ignored.
pub fn parse_events<R: BufRead>(reader: R) -> Result<Vec<EventLog>> {
    let mut grouped: BTreeMap<String, Vec<Event>> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                line_no,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let (cookie, ts, url) = (fields[0], fields[1], fields[2]);
        if cookie.is_empty() {
            return Err(Error::parse(line_no, "empty cookie id"));
        }
        if url.is_empty() {
            return Err(Error::parse(line_no, "empty url"));
        }
        let timestamp: i64 = ts
            .parse()
            .map_err(|_| Error::parse(line_no, format!("non-integer timestamp {ts:?}")))?;
        grouped.entry(cookie.to_string()).or_default().push(Event {
            url: url.to_string(),
            timestamp,
        });
    }
    grouped
        .into_iter()
        .map(|(cookie, events)| EventLog::new(cookie, events))
        .collect()
}

/// Serialize logs back to the events TSV format, cookie by cookie.
pub fn write_events<W: Write>(logs: &[EventLog], mut sink: W) -> Result<usize> {
    let mut written = 0;
    for log in logs {
        for e in log.events() {
            let line = format!("{}\t{}\t{}\n", log.cookie_id(), e.timestamp, e.url);
            sink.write_all(line.as_bytes())?;
            written += line.len();
        }
    }
    sink.flush()?;
    Ok(written)
}

/// Parse `cookie_a<TAB>cookie_b` lines. Pairs are canonicalized and
/// deduplicated; self-pairs are an error.
pub fn parse_pairs<R: BufRead>(reader: R) -> Result<PairSet> {
    let mut set = PairSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::parse(
                line_no,
                format!("expected 2 tab-separated fields, found {}", fields.len()),
            ));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::parse(line_no, "empty cookie id"));
        }
        let pair = CookiePair::new(fields[0], fields[1])
            .map_err(|_| Error::parse(line_no, format!("self-pair {:?}", fields[0])))?;
        set.insert(pair);
    }
    Ok(set)
}

pub fn write_pairs<W: Write>(pairs: &PairSet, mut sink: W) -> Result<usize> {
    let mut written = 0;
    for p in pairs {
        let line = format!("{p}\n");
        sink.write_all(line.as_bytes())?;
        written += line.len();
    }
    sink.flush()?;
    Ok(written)
}

/// Write scored pairs as `cookie_a<TAB>cookie_b<TAB>score`, sorted by
/// descending score then pair. Returns the number of bytes written.
pub fn write_predictions<W: Write>(pairs: &[ScoredPair], mut sink: W) -> Result<usize> {
    for sp in pairs {
        if !sp.score.is_finite() || !(0.0..=1.0).contains(&sp.score) {
            return Err(Error::invalid(format!(
                "score {} for pair ({}) outside [0, 1]",
                sp.score, sp.pair
            )));
        }
    }
    let mut order: Vec<&ScoredPair> = pairs.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.pair.cmp(&b.pair)));
    let mut written = 0;
    for sp in order {
        let line = format!("{}\t{:.6}\n", sp.pair, sp.score);
        sink.write_all(line.as_bytes())?;
        written += line.len();
    }
    sink.flush()?;
    Ok(written)
}

/// Read back a scored-pair file (predictions or candidates).
pub fn parse_scored<R: BufRead>(reader: R) -> Result<Vec<ScoredPair>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                line_no,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let pair = CookiePair::new(fields[0], fields[1])
            .map_err(|e| Error::parse(line_no, e.to_string()))?;
        let score: f64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(line_no, format!("bad score {:?}", fields[2])))?;
        if !score.is_finite() {
            return Err(Error::parse(line_no, "non-finite score"));
        }
        out.push(ScoredPair::new(pair, score));
    }
    Ok(out)
}
