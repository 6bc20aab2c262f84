//! Shared fixtures for the benchmarks in `benches/`.

use xmatch_core::scemnet::{ScemnetConfig, ScemnetParams};
use xmatch_core::synth::{generate, SynthConfig};
use xmatch_core::{Lexicon, ProfileSet, TokenizerConfig};

/// Profiles of a small synthetic corpus.
pub fn profiles(n_users: usize, seed: u64) -> ProfileSet {
    let (logs, _) = generate(&SynthConfig {
        n_users,
        seed,
        ..SynthConfig::default()
    })
    .expect("synthetic corpus");
    let lexicon = Lexicon::build(&logs, &TokenizerConfig::default()).expect("lexicon");
    ProfileSet::build(&logs, lexicon).expect("profiles")
}

/// Freshly initialised ranker with the default layout.
pub fn model(set: &ProfileSet, embed_dim: usize) -> ScemnetParams {
    let cfg = ScemnetConfig {
        embed_dim,
        ..ScemnetConfig::default()
    };
    ScemnetParams::init(cfg, set.lexicon(), 0).expect("model")
}
