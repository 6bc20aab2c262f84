//! The `xmatch` command line: every pipeline stage reads and writes plain
//! TSV files so stages can be run, inspected and resumed independently.
//!
//! Exit codes: 0 on success, 1 on input or data errors, 2 on usage errors.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use xmatch_core::candidates::{generate_candidates, DEFAULT_K, DEFAULT_RETRIEVAL_DEPTH};
use xmatch_core::corpus::{
    parse_events, parse_pairs, parse_scored, write_events, write_pairs, write_predictions,
    CookiePair, EventLog, PairSet, ScoredPair,
};
use xmatch_core::evaluator::{
    half_split_eval, select_pairs, tune_threshold, EvalReport, DEFAULT_SPLITS,
};
use xmatch_core::features::{extras_map, read_feature_rows, write_feature_rows, FeatureVector};
use xmatch_core::jscemnet::{
    self, feature_columns, joint_score_pairs, logreg_training_rows, train_joint, train_logreg,
    FeatureTable, JointParams, JointTrainConfig, LogregConfig, LogregModel,
};
use xmatch_core::profile::ProfileSet;
use xmatch_core::scemnet::{
    self, score_pairs, train_scemnet, EmbeddingCache, ScemnetConfig, ScemnetParams, TrainConfig,
};
use xmatch_core::synth::{generate, SynthConfig};
use xmatch_core::tokenizer::{Lexicon, TokenizerConfig};
use xmatch_core::{CandidatePair, Error};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "xmatch", version, about = "Cross-device cookie matching pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted sibling cookies.
    Synth(SynthArgs),
    /// Retrieve candidate pairs by TF-IDF nearest neighbors.
    Candidates(CandidatesArgs),
    /// Compute pair feature rows for candidate pairs.
    Features(FeaturesArgs),
    /// Train a ranker.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Score candidate pairs with a trained model.
    Predict(PredictArgs),
    /// Precision, recall and F1 of thresholded predictions.
    Eval(EvalArgs),
    /// Half-split evaluation with confidence intervals.
    EvalHalfsplit(HalfSplitArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Subcommand)]
enum TrainCommand {
    /// Siamese convolutional ranker.
    Scemnet(TrainArgs),
    /// Logistic regression over pair features.
    Logreg(TrainArgs),
    /// Joint wide and deep ranker.
    Joint(TrainArgs),
}

#[derive(Debug, Args, Serialize)]
struct ThreadArgs {
    /// Worker threads for data-parallel stages.
    #[arg(long, env = "XMATCH_THREADS")]
    threads: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct TokenArgs {
    /// URL depths, one modality each.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    depths: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    /// Tokens seen fewer times map to the out-of-vocabulary id.
    #[arg(long, default_value_t = 2)]
    min_count: usize,
}

impl TokenArgs {
    fn config(&self) -> TokenizerConfig {
        TokenizerConfig {
            depths: self.depths.clone(),
            sequence_len: self.seq_len,
            min_count: self.min_count,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct CandidatesArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_RETRIEVAL_DEPTH)]
    retrieval_depth: usize,
    #[command(flatten)]
    tokens: TokenArgs,
    #[command(flatten)]
    threads: ThreadArgs,
}

#[derive(Debug, Args, Serialize)]
struct FeaturesArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Additional feature columns keyed by pair.
    #[arg(long)]
    extras: Option<PathBuf>,
    #[command(flatten)]
    tokens: TokenArgs,
    #[command(flatten)]
    threads: ThreadArgs,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    events: PathBuf,
    /// Truth pairs of the training cookies.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    extras: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Learning rate of the wide weights in joint training.
    #[arg(long)]
    wide_lr: Option<f64>,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 4)]
    neg_ratio: usize,
    #[arg(long, default_value_t = jscemnet::DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 5_000)]
    max_iter: usize,
    #[command(flatten)]
    tokens: TokenArgs,
    #[command(flatten)]
    threads: ThreadArgs,
}

#[derive(Debug, Args, Serialize)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    extras: Option<PathBuf>,
    #[command(flatten)]
    threads: ThreadArgs,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    /// Truth pairs to score against.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fixed threshold; ignored when `--tune-pairs` is given.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Truth pairs of validation cookies to tune the threshold on.
    #[arg(long)]
    tune_pairs: Option<PathBuf>,
    /// Keep only predicted pairs whose cookies both occur in `--pairs`.
    #[arg(long)]
    within_truth: bool,
    #[arg(long, default_value_t = DEFAULT_SPLITS)]
    splits: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct HalfSplitArgs {
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Debug, Args, Serialize)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
}

/// What a run did, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub subcommand: &'a str,
    pub argv: Vec<String>,
    pub params: Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub version: &'a str,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Run with full argv (program name first) and return the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, &argv[1..]) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("xmatch: usage error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Data(msg)) => {
            eprintln!("xmatch: {msg}");
            EXIT_DATA
        }
    }
}

fn dispatch(cli: Cli, args: &[String]) -> Outcome {
    match cli.command {
        Command::Synth(a) => synth(&a, args),
        Command::Candidates(a) => with_threads(&a.threads, || candidates(&a, args)),
        Command::Features(a) => with_threads(&a.threads, || features(&a, args)),
        Command::Train(TrainCommand::Scemnet(a)) => {
            with_threads(&a.threads, || train(Ranker::Scemnet, &a, args))
        }
        Command::Train(TrainCommand::Logreg(a)) => {
            with_threads(&a.threads, || train(Ranker::Logreg, &a, args))
        }
        Command::Train(TrainCommand::Joint(a)) => {
            with_threads(&a.threads, || train(Ranker::Joint, &a, args))
        }
        Command::Predict(a) => with_threads(&a.threads, || predict(&a, args)),
        Command::Eval(a) => eval(&a, false, args),
        Command::EvalHalfsplit(a) => eval(&a.eval, true, args),
        Command::Replay(a) => replay(&a),
    }
}

fn with_threads(t: &ThreadArgs, f: impl FnOnce() -> Outcome + Send) -> Outcome {
    match t.threads {
        None => f(),
        Some(0) => Err(usage("--threads must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Failure::Data(e.to_string()))?
            .install(f),
    }
}

fn open(path: &Path) -> Outcome<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn with_context<T>(path: &Path, r: xmatch_core::Result<T>) -> Outcome<T> {
    r.map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn read_events(path: &Path) -> Outcome<Vec<EventLog>> {
    with_context(path, parse_events(open(path)?))
}

fn read_pairs(path: &Path) -> Outcome<PairSet> {
    with_context(path, parse_pairs(open(path)?))
}

fn read_scored(path: &Path) -> Outcome<Vec<ScoredPair>> {
    with_context(path, parse_scored(open(path)?))
}

fn read_candidates(path: &Path) -> Outcome<Vec<CandidatePair>> {
    let mut cands: Vec<CandidatePair> = read_scored(path)?
        .into_iter()
        .map(|s| CandidatePair {
            pair: s.pair,
            retrieval_score: s.score,
        })
        .collect();
    cands.sort_by(|a, b| a.pair.cmp(&b.pair));
    cands.dedup_by(|a, b| a.pair == b.pair);
    Ok(cands)
}

fn read_extras(path: &Path) -> Outcome<(Vec<String>, HashMap<CookiePair, Vec<f64>>)> {
    let rows = with_context(path, read_feature_rows(open(path)?))?;
    let width = rows.first().map_or(0, |(_, f)| f.len());
    let names = (0..width).map(|i| format!("extra{i}")).collect();
    Ok((names, extras_map(rows)))
}

fn profiles(events: &[EventLog], tokens: &TokenizerConfig) -> Outcome<ProfileSet> {
    let lexicon = Lexicon::build(events, tokens)?;
    Ok(ProfileSet::build(events, lexicon)?)
}

fn write_json(path: &Path, v: &Value) -> Outcome {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, v)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_manifest(
    path: &Path,
    subcommand: &str,
    argv: &[String],
    params: &impl Serialize,
    inputs: &[&Path],
    outputs: &[&Path],
    seed: Option<u64>,
) -> Outcome {
    let show = |ps: &[&Path]| ps.iter().map(|p| p.display().to_string()).collect();
    let m = RunManifest {
        subcommand,
        argv: argv.to_vec(),
        params: serde_json::to_value(params)?,
        inputs: show(inputs),
        outputs: show(outputs),
        seed,
        version: env!("CARGO_PKG_VERSION"),
    };
    write_json(path, &serde_json::to_value(m)?)
}

fn synth(a: &SynthArgs, argv: &[String]) -> Outcome {
    let mut cfg = SynthConfig::default();
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.users {
        cfg.n_users = n;
    }
    if let Some(x) = a.noise {
        cfg.noise = x;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let (logs, truth) = generate(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    let events = a.out.join("events.tsv");
    let pairs = a.out.join("truth.tsv");
    let sidecar = a.out.join("synth.txt");
    write_events(&logs, create(&events)?)?;
    write_pairs(&truth, create(&pairs)?)?;
    let mut side = create(&sidecar)?;
    cfg.write_sidecar(&mut side)?;
    side.flush()?;
    write_manifest(
        &a.out.join("manifest.json"),
        "synth",
        argv,
        &cfg,
        &[],
        &[&events, &pairs, &sidecar],
        Some(cfg.seed),
    )
}

fn candidates(a: &CandidatesArgs, argv: &[String]) -> Outcome {
    let tokens = a.tokens.config();
    tokens.validate().map_err(|e| usage(e.to_string()))?;
    if a.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    if !tokens.depths.contains(&a.retrieval_depth) {
        return Err(usage("--retrieval-depth must be one of --depths"));
    }
    let logs = read_events(&a.events)?;
    let set = profiles(&logs, &tokens)?;
    let cands = generate_candidates(&set, a.retrieval_depth, a.k)?;
    let scored: Vec<ScoredPair> = cands.iter().map(ScoredPair::from).collect();
    write_predictions(&scored, create(&a.out)?)?;
    write_manifest(&manifest_path(&a.out), "candidates", argv, a, &[&a.events], &[&a.out], None)
}

fn features(a: &FeaturesArgs, argv: &[String]) -> Outcome {
    let tokens = a.tokens.config();
    tokens.validate().map_err(|e| usage(e.to_string()))?;
    let logs = read_events(&a.events)?;
    let cands = read_candidates(&a.candidates)?;
    let set = profiles(&logs, &tokens)?;
    let (names, extras) = match &a.extras {
        Some(p) => read_extras(p)?,
        None => (Vec::new(), HashMap::new()),
    };
    let pairs: Vec<CookiePair> = cands.iter().map(|c| c.pair.clone()).collect();
    let table = FeatureTable::compute(&set, &pairs, &names, &extras)?;
    let rows: Vec<(CookiePair, FeatureVector)> = pairs
        .iter()
        .map(|p| {
            Ok((
                p.clone(),
                FeatureVector {
                    values: table.require(p)?.to_vec(),
                },
            ))
        })
        .collect::<xmatch_core::Result<_>>()?;
    let mut w = create(&a.out)?;
    writeln!(w, "#cookie_a\tcookie_b\t{}", table.columns.join("\t"))?;
    write_feature_rows(&rows, w)?;
    let mut inputs = vec![a.events.as_path(), a.candidates.as_path()];
    inputs.extend(a.extras.as_deref());
    write_manifest(&manifest_path(&a.out), "features", argv, a, &inputs, &[&a.out], None)
}

#[derive(Debug, Clone, Copy)]
enum Ranker {
    Scemnet,
    Logreg,
    Joint,
}

impl Ranker {
    fn name(self) -> &'static str {
        match self {
            Ranker::Scemnet => "train scemnet",
            Ranker::Logreg => "train logreg",
            Ranker::Joint => "train joint",
        }
    }
}

fn train(kind: Ranker, a: &TrainArgs, argv: &[String]) -> Outcome {
    let tokens = a.tokens.config();
    tokens.validate().map_err(|e| usage(e.to_string()))?;
    let cfg = TrainConfig {
        lr: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        neg_ratio: a.neg_ratio,
        seed: a.seed,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let deep_cfg = ScemnetConfig {
        embed_dim: a.embed_dim,
        ..ScemnetConfig::default()
    };
    deep_cfg
        .validate(tokens.sequence_len)
        .map_err(|e| usage(e.to_string()))?;
    if !(a.lambda >= 0.0 && a.lambda.is_finite()) {
        return Err(usage("--lambda must be non-negative"));
    }
    if matches!(kind, Ranker::Scemnet) && a.extras.is_some() {
        return Err(usage("--extras applies to logreg and joint training only"));
    }

    let logs = read_events(&a.events)?;
    let truth = read_pairs(&a.pairs)?;
    let cands = read_candidates(&a.candidates)?;
    let set = profiles(&logs, &tokens)?;
    let (names, extras) = match &a.extras {
        Some(p) => read_extras(p)?,
        None => (Vec::new(), HashMap::new()),
    };
    let table = || -> Outcome<FeatureTable> {
        let pairs: Vec<CookiePair> = cands.iter().map(|c| c.pair.clone()).collect();
        Ok(FeatureTable::compute(&set, &pairs, &names, &extras)?)
    };

    let (model, report) = match kind {
        Ranker::Scemnet => {
            let init = ScemnetParams::init(deep_cfg, set.lexicon(), a.seed)?;
            let (params, report) = train_scemnet(init, &truth, &cands, &set, &cfg)?;
            (params.to_json(), Some(report))
        }
        Ranker::Logreg => {
            let table = table()?;
            let (rows, labels) =
                logreg_training_rows(&truth, &cands, &set, &table, a.neg_ratio, a.seed)?;
            let lcfg = LogregConfig {
                max_iter: a.max_iter,
                ..LogregConfig::default()
            };
            let wide = train_logreg(&rows, &labels, table.columns.clone(), a.lambda, &lcfg)?;
            (LogregModel { tokenizer: tokens.clone(), wide }.to_json(), None)
        }
        Ranker::Joint => {
            let table = table()?;
            let init = ScemnetParams::init(deep_cfg, set.lexicon(), a.seed)?;
            let jinit = JointParams::new(init, feature_columns(&names), a.lambda);
            let jcfg = JointTrainConfig {
                train: cfg.clone(),
                wide_lr: a.wide_lr,
            };
            let (params, report) = train_joint(jinit, &truth, &cands, &set, &table, &jcfg)?;
            (params.to_json(), Some(report))
        }
    };
    write_json(&a.out, &model)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(r) = report {
        let curve = a.out.with_extension("loss.tsv");
        let mut w = create(&curve)?;
        writeln!(w, "epoch\tloss")?;
        writeln!(w, "0\t{:.6}", r.initial_loss)?;
        for (i, l) in r.epoch_losses.iter().enumerate() {
            writeln!(w, "{}\t{l:.6}", i + 1)?;
        }
        w.flush()?;
        outputs.push(curve);
    }
    let mut inputs = vec![a.events.as_path(), a.pairs.as_path(), a.candidates.as_path()];
    inputs.extend(a.extras.as_deref());
    let outs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    write_manifest(&manifest_path(&a.out), kind.name(), argv, a, &inputs, &outs, Some(a.seed))
}

enum Model {
    Scemnet(ScemnetParams),
    Logreg(LogregModel),
    Joint(JointParams),
}

fn load_model(path: &Path) -> Outcome<Model> {
    let v: Value = serde_json::from_reader(open(path)?)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let model = match v.get("version").and_then(Value::as_str) {
        Some(scemnet::FORMAT_VERSION) => Model::Scemnet(with_context(path, ScemnetParams::from_json(&v))?),
        Some(jscemnet::LOGREG_FORMAT_VERSION) => Model::Logreg(with_context(path, LogregModel::from_json(&v))?),
        Some(jscemnet::FORMAT_VERSION) => Model::Joint(with_context(path, JointParams::from_json(&v))?),
        other => {
            return Err(Failure::Data(format!(
                "{}: unknown model version {other:?}",
                path.display()
            )))
        }
    };
    Ok(model)
}

fn predict(a: &PredictArgs, argv: &[String]) -> Outcome {
    let model = load_model(&a.model)?;
    let logs = read_events(&a.events)?;
    let cands = read_candidates(&a.candidates)?;
    let pairs: Vec<CookiePair> = cands.iter().map(|c| c.pair.clone()).collect();
    let (names, extras) = match &a.extras {
        Some(p) => read_extras(p)?,
        None => (Vec::new(), HashMap::new()),
    };
    let table = |set: &ProfileSet, columns: &[String]| -> Outcome<FeatureTable> {
        let t = FeatureTable::compute(set, &pairs, &names, &extras)?;
        if t.columns != columns {
            return Err(Failure::Data(format!(
                "model expects {} feature columns, inputs give {}",
                columns.len(),
                t.columns.len()
            )));
        }
        Ok(t)
    };
    let scores = match &model {
        Model::Scemnet(m) => {
            let set = profiles(&logs, m.tokenizer())?;
            let cache = EmbeddingCache::build(m, set.profiles())?;
            score_pairs(m, &cache, &pairs)?
        }
        Model::Logreg(m) => {
            let set = profiles(&logs, &m.tokenizer)?;
            let t = table(&set, &m.wide.columns)?;
            pairs
                .iter()
                .map(|p| Ok(xmatch_core::autodiff::sigmoid(m.wide.logit(t.require(p)?)?)))
                .collect::<xmatch_core::Result<_>>()?
        }
        Model::Joint(m) => {
            let set = profiles(&logs, m.deep().tokenizer())?;
            let t = table(&set, m.columns())?;
            let cache = EmbeddingCache::build(m.deep(), set.profiles())?;
            joint_score_pairs(m, &cache, &t, &pairs)?
        }
    };
    let scored: Vec<ScoredPair> = pairs
        .into_iter()
        .zip(scores)
        .map(|(p, s)| ScoredPair::new(p, s))
        .collect();
    write_predictions(&scored, create(&a.out)?)?;
    let mut inputs = vec![a.model.as_path(), a.events.as_path(), a.candidates.as_path()];
    inputs.extend(a.extras.as_deref());
    write_manifest(&manifest_path(&a.out), "predict", argv, a, &inputs, &[&a.out], None)
}

fn cookies_of(pairs: &PairSet) -> BTreeSet<&str> {
    pairs.iter().flat_map(|p| [p.first(), p.second()]).collect()
}

fn within(scored: &[ScoredPair], cookies: &BTreeSet<&str>) -> Vec<ScoredPair> {
    scored
        .iter()
        .filter(|s| cookies.contains(s.pair.first()) && cookies.contains(s.pair.second()))
        .cloned()
        .collect()
}

fn report_paths(out: &Path) -> (PathBuf, PathBuf) {
    if out.extension().is_some_and(|e| e == "tsv") {
        (out.with_extension("txt"), out.to_path_buf())
    } else {
        (out.to_path_buf(), out.with_extension("tsv"))
    }
}

fn eval(a: &EvalArgs, half: bool, argv: &[String]) -> Outcome {
    if half && a.splits == 0 {
        return Err(usage("--splits must be at least 1"));
    }
    let scored = read_scored(&a.predictions)?;
    let truth = read_pairs(&a.pairs)?;
    let tau = match &a.tune_pairs {
        Some(p) => {
            let tune_truth = read_pairs(p)?;
            let pool = within(&scored, &cookies_of(&tune_truth));
            tune_threshold(&pool, &tune_truth)?
        }
        None => a.threshold,
    };
    let scored = if a.within_truth {
        within(&scored, &cookies_of(&truth))
    } else {
        scored
    };
    let predicted = select_pairs(&scored, tau);
    let report = if half {
        half_split_eval(&predicted, &truth, a.splits, a.seed)?
    } else {
        EvalReport::evaluate(&predicted, &truth)?
    };
    let (text, tsv) = report_paths(&a.out);
    let mut w = create(&text)?;
    writeln!(w, "{:<10} {:>9.6}", "threshold", tau)?;
    write!(w, "{report}")?;
    w.flush()?;
    let mut w = create(&tsv)?;
    writeln!(w, "{}", report.tsv_line())?;
    w.flush()?;
    let mut inputs = vec![a.predictions.as_path(), a.pairs.as_path()];
    inputs.extend(a.tune_pairs.as_deref());
    let name = if half { "eval-halfsplit" } else { "eval" };
    let seed = half.then_some(a.seed);
    write_manifest(&manifest_path(&text), name, argv, a, &inputs, &[&text, &tsv], seed)
}

fn replay(a: &ReplayArgs) -> Outcome {
    let v: Value = serde_json::from_reader(open(&a.manifest)?)?;
    let args: Vec<String> = serde_json::from_value(v["argv"].clone())
        .map_err(|e| Failure::Data(format!("{}: {e}", a.manifest.display())))?;
    if args.first().is_some_and(|s| s == "replay") {
        return Err(Failure::Data("a manifest cannot replay a replay".into()));
    }
    let mut full = vec!["xmatch".to_string()];
    full.extend(args);
    match run(full) {
        EXIT_OK => Ok(()),
        EXIT_USAGE => Err(usage("recorded command was rejected")),
        _ => Err(Failure::Data("recorded command failed".into())),
    }
}
