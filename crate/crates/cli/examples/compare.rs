//! Train and compare the three rankers on a synthetic corpus.

use std::time::Instant;

use clap::Parser;
use xmatch_core::candidates::generate_candidates;
use xmatch_core::experiment::{compare_rankers, ExperimentConfig};
use xmatch_core::profile::ProfileSet;
use xmatch_core::synth::{generate, SynthConfig};
use xmatch_core::tokenizer::{Lexicon, TokenizerConfig};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 2000)]
    users: usize,
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    zipf: f64,
    #[arg(long)]
    synth_seed: Option<u64>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long)]
    wide_lr: Option<f64>,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 4)]
    neg_ratio: usize,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args = Args::parse();
    let mut synth = SynthConfig {
        n_users: args.users,
        noise: args.noise,
        popularity_exponent: args.zipf,
        ..SynthConfig::default()
    };
    if let Some(s) = args.synth_seed {
        synth.seed = s;
    }
    let t = Instant::now();
    let (logs, truth) = generate(&synth)?;
    let tok = TokenizerConfig {
        sequence_len: args.seq_len,
        ..TokenizerConfig::default()
    };
    let lexicon = Lexicon::build(&logs, &tok)?;
    let profiles = ProfileSet::build(&logs, lexicon)?;
    let candidates = generate_candidates(&profiles, 2, args.k)?;
    let hit = candidates.iter().filter(|c| truth.contains(&c.pair)).count();
    eprintln!(
        "corpus: {} cookies, {} candidates, candidate recall {:.4} ({:.1}s)",
        logs.len(),
        candidates.len(),
        hit as f64 / truth.len() as f64,
        t.elapsed().as_secs_f64()
    );

    let mut cfg = ExperimentConfig::default();
    cfg.scemnet.embed_dim = args.embed_dim;
    cfg.train.epochs = args.epochs;
    cfg.train.lr = args.lr;
    cfg.train.batch_size = args.batch;
    cfg.train.neg_ratio = args.neg_ratio;
    cfg.train.seed = args.seed;
    cfg.wide_lr = args.wide_lr;
    cfg.seed = args.seed;
    let t = Instant::now();
    let c = compare_rankers(&profiles, &truth, &candidates, &cfg)?;
    for r in [&c.baseline, &c.stacked, &c.joint] {
        println!(
            "{:<18} tau {:.4}  val F1 {:.4}  test P {:.4} R {:.4} F1 {:.4}",
            r.name, r.threshold, r.validation_f1, r.test.precision, r.test.recall, r.test.f1
        );
    }
    println!("scemnet loss: {:.4} -> {:?}", c.scemnet_report.initial_loss, c.scemnet_report.epoch_losses);
    println!("joint loss:   {:.4} -> {:?}", c.joint_report.initial_loss, c.joint_report.epoch_losses);
    println!("test candidate recall {:.4}; {:.1}s", c.test_candidate_recall, t.elapsed().as_secs_f64());
    Ok(())
}
