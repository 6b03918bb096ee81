//! `fuzzqe`: query generation, training, evaluation, answering and verification.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 verification failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fuzzqe::config::RunConfig;
use fuzzqe::eval::{evaluate, random_baseline, QuerySets};
use fuzzqe::gen::{generate, Split};
use fuzzqe::grad::SHARD_SIZE;
use fuzzqe::model::{load_checkpoint, Encoder};
use fuzzqe::oracle::answer_query;
use fuzzqe::query::{parse_structure_list, read_labeled, Query, Structure};
use fuzzqe::synth::{synthetic_kg, SynthConfig};
use fuzzqe::train::{make_1p_queries, train};
use fuzzqe::verify::{gradcheck_suite, logic_laws, oracle_agreement, score_laws};
use fuzzqe::{GraphView, KnowledgeGraph, Logic, Parameters};

#[derive(Parser)]
#[command(name = "fuzzqe", version, about = "Fuzzy-logic query embeddings over knowledge graphs")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on this value.
    #[arg(long, global = true, env = "FUZZQE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample labeled train/valid/test queries from a graph.
    GenQueries(GenArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on labeled query files.
    Eval(EvalArgs),
    /// Rank entities for one query.
    Answer(AnswerArgs),
    /// Run a self-verification suite.
    Verify(VerifyArgs),
    /// Write a synthetic compositional graph.
    SynthKg(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Training queries per training structure.
    #[arg(long)]
    train_count: Option<usize>,
    /// Validation queries per structure (all fourteen).
    #[arg(long)]
    valid_count: Option<usize>,
    /// Test queries per structure (all fourteen).
    #[arg(long)]
    test_count: Option<usize>,
    /// Structures that receive training queries.
    #[arg(long)]
    structures: Option<String>,
    #[arg(long)]
    max_answers: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Directory with `<split>-<tag>.jsonl` query files.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Training structures, e.g. `1p` or `1p,2p,3p,2i,3i,2in,3in,inp,pin,pni`.
    #[arg(long)]
    structures: Option<String>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// Continue from `last.ckpt` in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory with `<split>-<tag>.jsonl` query files.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Where to write report.json / report.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also print the exact random-scorer MRR per structure.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct AnswerArgs {
    /// Required unless only `--exact` is given.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Graph directory (names, and edges for `--exact`).
    #[arg(long)]
    kg: Option<PathBuf>,
    /// Query JSON, or `@path` to read it from a file.
    #[arg(long)]
    query: String,
    #[arg(short, long, default_value_t = 10)]
    k: usize,
    /// Answer by exact graph traversal.
    #[arg(long)]
    exact: bool,
    #[arg(long, value_enum, default_value = "full")]
    view: ViewArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    Train,
    TrainValid,
    Full,
}

impl From<ViewArg> for GraphView {
    fn from(v: ViewArg) -> Self {
        match v {
            ViewArg::Train => GraphView::Train,
            ViewArg::TrainValid => GraphView::TrainValid,
            ViewArg::Full => GraphView::Full,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Laws,
    Gradcheck,
    Oracle,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(value_enum)]
    suite: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    entities: usize,
    #[arg(long, default_value_t = 6)]
    relations: usize,
    #[arg(long, default_value_t = 5)]
    cluster_size: usize,
    #[arg(long, default_value_t = 3)]
    fanout: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Verify(String),
}

type CmdResult = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn data(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

/// Joins the error chain, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::GenQueries(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Answer(a) => cmd_answer(a),
        Command::Verify(a) => cmd_verify(a),
        Command::SynthKg(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
        Err(Failure::Verify(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
    }
}

/// Loads the config file and applies the shared overrides.
fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref()).map_err(usage)?;
    if let Some(k) = &common.kg {
        cfg.kg_dir = Some(k.clone());
    }
    if let Some(o) = &common.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.gen.seed = s;
    }
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, Failure> {
    p.as_deref().ok_or_else(|| usage(anyhow!("{what} is required (flag or config field)")))
}

fn load_kg(dir: &Path) -> Result<KnowledgeGraph, Failure> {
    if !dir.is_dir() {
        return Err(data(anyhow!("knowledge graph directory {} does not exist", dir.display())));
    }
    KnowledgeGraph::load(dir).with_context(|| format!("loading {}", dir.display())).map_err(data)
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let mut cfg = resolve(&a.common)?;
    let train_structs = match &a.structures {
        Some(s) => parse_structure_list(s).map_err(usage)?,
        None => Structure::TRAINING.to_vec(),
    };
    if let Some(n) = a.train_count {
        cfg.gen = cfg.gen.clone().with_counts(Split::Train, &train_structs, n);
    }
    if let Some(n) = a.valid_count {
        cfg.gen = cfg.gen.clone().with_counts(Split::Valid, &Structure::ALL, n);
    }
    if let Some(n) = a.test_count {
        cfg.gen = cfg.gen.clone().with_counts(Split::Test, &Structure::ALL, n);
    }
    if let Some(m) = a.max_answers {
        cfg.gen.max_answers = m;
    }
    cfg.validate().map_err(usage)?;
    if cfg.gen.counts.values().all(|m| m.values().all(|n| *n == 0)) {
        return Err(usage(anyhow!("no queries requested (set gen.counts or --train-count/--valid-count/--test-count)")));
    }
    let kg = load_kg(required(&cfg.kg_dir, "--kg")?)?;
    let out = required(&cfg.out_dir, "--out")?.to_path_buf();
    cfg.write_resolved(&out).map_err(data)?;
    let generated = generate(&kg, &cfg.gen).map_err(usage)?;
    generated.write(&out).map_err(data)?;
    let manifest = generated.manifest.as_ref().expect("manifest");
    for (split, s, want, got) in manifest.shortfalls() {
        warn!("{split}-{s}: requested {want}, achieved {got}");
    }
    println!("wrote queries and manifest.json to {}", out.display());
    Ok(())
}

fn read_split(dir: &Path, split: &str, tags: &[Structure]) -> Result<QuerySets, Failure> {
    let mut sets = QuerySets::new();
    for s in tags {
        let path = dir.join(format!("{split}-{s}.jsonl"));
        if path.exists() {
            sets.insert(*s, read_labeled(&path).map_err(data)?);
        }
    }
    Ok(sets)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = resolve(&a.common)?;
    if let Some(q) = &a.queries {
        cfg.queries_dir = Some(q.clone());
    }
    if let Some(s) = &a.structures {
        cfg.train.structures = parse_structure_list(s).map_err(usage)?;
    }
    if let Some(n) = a.max_steps {
        cfg.train.max_steps = n;
        cfg.train.patience_steps = cfg.train.patience_steps.min(n);
    }
    if let Some(n) = a.eval_every {
        cfg.train.eval_every = n;
    }
    cfg.validate().map_err(usage)?;
    let kg = load_kg(required(&cfg.kg_dir, "--kg")?)?;
    let out = required(&cfg.out_dir, "--out")?.to_path_buf();
    let qdir = cfg.queries_dir.clone();

    let mut train_sets = match &qdir {
        Some(d) => read_split(d, "train", &cfg.train.structures)?,
        None => QuerySets::new(),
    };
    if cfg.train.structures.contains(&Structure::P1) && !train_sets.contains_key(&Structure::P1) {
        info!("no train-1p.jsonl; using every training edge as a 1p query");
        train_sets.insert(Structure::P1, make_1p_queries(&kg, GraphView::Train));
    }
    let valid = match &qdir {
        Some(d) => read_split(d, "valid", &Structure::ALL)?,
        None => QuerySets::new(),
    };
    if valid.is_empty() {
        warn!("no validation queries; the last checkpoint doubles as the best one");
    }
    for s in &cfg.train.structures {
        if !train_sets.contains_key(s) {
            return Err(data(anyhow!("no training queries for {s} (expected train-{s}.jsonl)")));
        }
    }
    cfg.write_resolved(&out).map_err(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let init = Parameters::init(&cfg.model, kg.num_entities(), kg.num_relations(), &mut rng);
    info!("gradient shards of {SHARD_SIZE} examples across {} threads", rayon::current_num_threads());
    let outcome = train(&cfg.model, &cfg.train, &kg, init, &train_sets, &valid, &out, a.resume).map_err(|e| {
        use fuzzqe::train::TrainError::*;
        match e {
            Config(_) | MissingStructure(_) => usage(e),
            other => data(other),
        }
    })?;
    println!(
        "trained {} steps; best validation mean MRR {:.4} at step {}{}",
        outcome.steps,
        outcome.best_valid_mrr,
        outcome.best_step,
        if outcome.stopped_early { " (early stop)" } else { "" }
    );
    println!("checkpoints: {} and {}", out.join("best.ckpt").display(), out.join("last.ckpt").display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let (params, model) = load_checkpoint(&a.checkpoint).map_err(data)?;
    let sets = read_split(&a.queries, &a.split, &Structure::ALL)?;
    for s in Structure::ALL {
        if !sets.contains_key(&s) {
            warn!("no {}-{s}.jsonl; {s} is absent from the report", a.split);
        }
    }
    if sets.is_empty() {
        return Err(data(anyhow!("no {}-<tag>.jsonl files in {}", a.split, a.queries.display())));
    }
    let report = evaluate(&params, &model, &sets).map_err(data)?;
    let base = a.baseline.then(|| random_baseline(params.num_entities, &sets));
    println!("{:>4} {:>8} {:>8} {:>8} {:>8} {:>6}{}", "tag", "mrr", "hits1", "hits3", "hits10", "n", if base.is_some() { "   random" } else { "" });
    for (s, m) in &report.per_structure {
        let b = base.as_ref().map_or(String::new(), |b| format!(" {:>8.4}", b.per_structure[s].mrr));
        println!("{:>4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>6}{b}", s.as_str(), m.mrr, m.hits1, m.hits3, m.hits10, m.n_queries);
    }
    let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("avg_epfo {}  avg_neg {}", fmt(report.avg_epfo), fmt(report.avg_neg));
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(data)?;
        let echo = serde_json::json!({
            "checkpoint": a.checkpoint, "queries": a.queries, "split": a.split, "model": model,
        });
        fs::write(out.join("config.json"), serde_json::to_string_pretty(&echo).expect("json") + "\n").map_err(data)?;
        fs::write(out.join("report.json"), report.to_json() + "\n").map_err(data)?;
        fs::write(out.join("report.csv"), report.to_csv()).map_err(data)?;
        println!("wrote {}/report.{{json,csv}}", out.display());
    }
    Ok(())
}

fn cmd_answer(a: AnswerArgs) -> CmdResult {
    let text = match a.query.strip_prefix('@') {
        Some(path) => fs::read_to_string(path).with_context(|| format!("reading {path}")).map_err(data)?,
        None => a.query.clone(),
    };
    let query = Query::parse(&text).map_err(usage)?;
    if a.checkpoint.is_none() && !a.exact {
        return Err(usage(anyhow!("--checkpoint is required unless --exact is given")));
    }
    let kg = match &a.kg {
        Some(dir) => Some(load_kg(dir)?),
        None if a.exact => return Err(usage(anyhow!("--exact needs --kg"))),
        None => None,
    };
    let name = |e: u32| kg.as_ref().and_then(|k| k.entity_name(e)).unwrap_or("").to_string();

    let mut ranked = None;
    if let Some(ckpt) = &a.checkpoint {
        let (params, model) = load_checkpoint(ckpt).map_err(data)?;
        query.check_ids(params.num_entities, params.num_relations).map_err(usage)?;
        let enc = Encoder::new(&params, &model).map_err(data)?;
        let top = enc.answer(&query, a.k, &[]).map_err(data)?;
        println!("# top-{} by embedding score", top.len());
        for (e, s) in &top {
            println!("{e}\t{}\t{s:.6}", name(*e));
        }
        ranked = Some(top);
    }
    if a.exact {
        let kg = kg.as_ref().expect("checked above");
        query.check_ids(kg.num_entities(), kg.num_relations()).map_err(usage)?;
        let exact = answer_query(kg, a.view.into(), query.root());
        println!("# exact answers ({})", exact.len());
        for e in &exact {
            println!("{e}\t{}", name(*e));
        }
        if let Some(top) = ranked {
            let hits = top.iter().filter(|(e, _)| exact.binary_search(e).is_ok()).count();
            let denom = a.k.min(exact.len()).max(1);
            println!("overlap@{}: {hits}/{denom} = {:.4}", a.k, hits as f64 / denom as f64);
        }
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    let report = match a.suite {
        Suite::Laws => {
            let laws = logic_laws(&[Logic::Product, Logic::Godel], 10_000, 16, a.seed);
            let scores = score_laws(1_000, a.seed);
            print!("{laws}{scores}");
            let v = laws.violations() + scores.violations();
            return if v == 0 { Ok(()) } else { Err(Failure::Verify(format!("{v} law violations"))) };
        }
        Suite::Gradcheck => {
            let r = gradcheck_suite(a.seed, 1e-4);
            print!("{r}");
            println!("max relative error {:.3e} (threshold 1e-4)", r.max_error());
            r
        }
        Suite::Oracle => {
            let r = oracle_agreement(20, 50, a.seed);
            print!("{r}");
            r
        }
    };
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verify(format!("{}: {} violations", report.name, report.violations())))
    }
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        num_entities: a.entities,
        num_relations: a.relations,
        cluster_size: a.cluster_size,
        fanout: a.fanout,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let kg = synthetic_kg(&cfg).map_err(usage)?;
    kg.save(&a.out).map_err(data)?;
    let counts: BTreeMap<&str, usize> = [
        ("train", kg.train_edges().len()),
        ("valid", kg.valid_edges().len()),
        ("test", kg.test_edges().len()),
    ]
    .into();
    println!("wrote {} ({} entities, {} relations, edges {counts:?})", a.out.display(), kg.num_entities(), kg.num_relations());
    Ok(())
}
