//! Cross-device cookie matching: candidate retrieval over URL token
//! histories, then pairwise ranking with a logistic regression over
//! hand-made pair features, a siamese convolutional network (SCEmNet), or
//! both trained jointly (JSCEmNet).

pub mod autodiff;
pub mod candidates;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod features;
pub mod jscemnet;
pub mod profile;
pub mod rng;
pub mod scemnet;
pub mod synth;
pub mod tokenizer;

pub use candidates::{generate_candidates, CandidatePair};
pub use corpus::{CookiePair, Event, EventLog, PairSet, ScoredPair};
pub use error::{Error, Result};
pub use evaluator::{half_split_eval, prf1, select_pairs, tune_threshold, EvalReport};
pub use features::{assemble, FeatureVector};
pub use jscemnet::{FeatureTable, JointParams, LogregModel, WideWeights};
pub use profile::{CookieProfile, ProfileSet};
pub use rng::Rng;
pub use scemnet::{ScemnetConfig, ScemnetParams, TrainConfig};
pub use synth::SynthConfig;
pub use tokenizer::{Lexicon, TokenizerConfig};
