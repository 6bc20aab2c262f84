//! Seeded synthetic corpora with planted cross-device identities.
//!
//! Each user owns two cookies. The user has a set of preferred URLs and an
//! hour-of-day habit shared by both cookies; every event visits a preferred
//! URL, or with probability `noise` a URL from the global pool. Site
//! popularity is Zipfian, so popular sites recur across unrelated users.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{CookiePair, Event, EventLog, PairSet};
use crate::error::{Error, Result};
use crate::rng::{Categorical, Rng};

/// 2015-01-01T00:00:00Z.
pub const EPOCH_START: i64 = 1_420_070_400;
pub const WINDOW_DAYS: i64 = 30;
const SECTIONS: usize = 3;
const ITEMS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_domains: usize,
    pub paths_per_domain: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub preferred_urls: usize,
    pub noise: f64,
    /// Zipf exponent of site popularity.
    pub popularity_exponent: f64,
    /// Largest standard deviation (hours) of a user's hour-of-day habit.
    pub max_hour_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 2_000,
            n_domains: 500,
            paths_per_domain: 10,
            min_events: 20,
            max_events: 40,
            preferred_urls: 8,
            noise: 0.2,
            popularity_exponent: 1.0,
            max_hour_spread: 4.0,
            seed: 20_170_412,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_users", self.n_users),
            ("n_domains", self.n_domains),
            ("paths_per_domain", self.paths_per_domain),
            ("min_events", self.min_events),
            ("preferred_urls", self.preferred_urls),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.max_events < self.min_events {
            return Err(Error::invalid("max_events must be at least min_events"));
        }
        if self.preferred_urls > self.n_domains * self.paths_per_domain {
            return Err(Error::invalid("more preferred URLs than URLs"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::invalid("noise must lie in [0, 1]"));
        }
        if !(self.popularity_exponent >= 0.0 && self.popularity_exponent.is_finite()) {
            return Err(Error::invalid("popularity_exponent must be non-negative"));
        }
        if !(self.max_hour_spread > 0.0 && self.max_hour_spread.is_finite()) {
            return Err(Error::invalid("max_hour_spread must be positive"));
        }
        Ok(())
    }

    /// `key=value` lines echoing every field.
    pub fn write_sidecar<W: Write>(&self, mut sink: W) -> Result<()> {
        let v = serde_json::to_value(self)?;
        if let Some(map) = v.as_object() {
            for (k, val) in map {
                writeln!(sink, "{k}={val}")?;
            }
        }
        Ok(())
    }
}

pub fn url(domain: usize, path: usize, item: usize) -> String {
    format!(
        "http://www.site{domain}.example/s{}/p{path}/i{item}",
        path % SECTIONS
    )
}

struct Habit {
    peak_hour: f64,
    spread: f64,
}

fn draw_url(
    rng: &mut Rng,
    domains: &Categorical,
    paths: usize,
) -> (usize, usize) {
    (rng.categorical(domains), rng.below(paths))
}

fn cookie_events(
    rng: &mut Rng,
    cfg: &SynthConfig,
    preferred: &[(usize, usize)],
    habit: &Habit,
    domains: &Categorical,
) -> Vec<Event> {
    let n = rng.range_inclusive(cfg.min_events, cfg.max_events);
    (0..n)
        .map(|_| {
            let (d, p) = if rng.bernoulli(cfg.noise) {
                draw_url(rng, domains, cfg.paths_per_domain)
            } else {
                preferred[rng.below(preferred.len())]
            };
            let item = rng.below(ITEMS);
            let day = rng.below(WINDOW_DAYS as usize) as i64;
            let hour = (habit.peak_hour + habit.spread * rng.gaussian())
                .floor()
                .rem_euclid(24.0) as i64;
            let second = rng.below(3600) as i64;
            Event {
                url: url(d, p, item),
                timestamp: EPOCH_START + day * 86_400 + hour * 3600 + second,
            }
        })
        .collect()
}

/// Event logs (grouped by cookie id, ascending) and the sibling pairs.
pub fn generate(cfg: &SynthConfig) -> Result<(Vec<EventLog>, PairSet)> {
    cfg.validate()?;
    let weights: Vec<f64> = (0..cfg.n_domains)
        .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.popularity_exponent))
        .collect();
    let domains = Categorical::new(&weights).ok_or_else(|| Error::invalid("bad popularity"))?;

    let width = (2 * cfg.n_users).to_string().len().max(6);
    let mut ids: Vec<usize> = (0..2 * cfg.n_users).collect();
    Rng::derive(cfg.seed, u64::MAX).shuffle(&mut ids);

    let mut logs = Vec::with_capacity(2 * cfg.n_users);
    let mut truth = PairSet::new();
    for user in 0..cfg.n_users {
        let mut rng = Rng::derive(cfg.seed, user as u64);
        let mut preferred: Vec<(usize, usize)> = Vec::with_capacity(cfg.preferred_urls);
        while preferred.len() < cfg.preferred_urls {
            let u = draw_url(&mut rng, &domains, cfg.paths_per_domain);
            if !preferred.contains(&u) {
                preferred.push(u);
            }
        }
        let habit = Habit {
            peak_hour: rng.uniform(0.0, 24.0),
            spread: rng.uniform(1.0, cfg.max_hour_spread.max(1.0)),
        };
        let names = [
            format!("c{:0width$}", ids[2 * user]),
            format!("c{:0width$}", ids[2 * user + 1]),
        ];
        for name in &names {
            let events = cookie_events(&mut rng, cfg, &preferred, &habit, &domains);
            logs.push(EventLog::new(name.clone(), events)?);
        }
        truth.insert(CookiePair::new(names[0].clone(), names[1].clone())?);
    }
    logs.sort_by(|a, b| a.cookie_id().cmp(b.cookie_id()));
    Ok((logs, truth))
}
