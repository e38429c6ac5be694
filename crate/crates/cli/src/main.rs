//! `fabsearch` command line: register providers, run requests, benchmarks.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fabsearch::bench::{run_bench, write_csv, BenchKind, BenchOptions};
use fabsearch::datastore::{
    read_bounds, CorpusConfig, CorpusStore, RegisterArgs, RequestArgs, PROVIDER_MAX_SUBSET, REQUEST_MAX_SUBSET,
};
use fabsearch::registry::RegisteredSketchSet;

#[derive(Parser, Debug)]
#[command(name = "fabsearch", version, about = "Task-based dataset search over covariance sketches")]
struct Cli {
    /// Corpus directory.
    #[arg(long, global = true, env = "FABSEARCH_CORPUS", default_value = "corpus")]
    corpus: PathBuf,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sketch a provider CSV and add it to the corpus.
    Register(RegisterCmd),
    /// Search the corpus for augmentations of a train/test task.
    Request(RequestCmd),
    /// Run a benchmark and write its CSV.
    Bench(BenchCmd),
}

/// Settings shared with `FABSEARCH_*` variables and the corpus config file.
#[derive(Args, Debug)]
struct ConfigFlags {
    #[arg(long, env = "FABSEARCH_EPSILON")]
    epsilon: Option<f64>,
    #[arg(long, env = "FABSEARCH_DELTA")]
    delta: Option<f64>,
    #[arg(long, env = "FABSEARCH_SEED")]
    seed: Option<u64>,
    /// Largest join-key subset sketched together.
    #[arg(long, env = "FABSEARCH_MAX_SUBSET")]
    max_subset: Option<usize>,
    /// Sketch exactly; no budget is spent.
    #[arg(long, env = "FABSEARCH_NO_PRIVACY")]
    no_privacy: bool,
}

#[derive(Args, Debug, Default)]
struct SearchFlags {
    #[arg(long, env = "FABSEARCH_MAX_ITERS")]
    max_iters: Option<usize>,
    #[arg(long, env = "FABSEARCH_MIN_IMPROVE")]
    min_improve: Option<f64>,
    #[arg(long, env = "FABSEARCH_MAX_JOINS")]
    max_joins: Option<usize>,
    #[arg(long, env = "FABSEARCH_JOIN_THRESHOLD")]
    join_threshold: Option<f64>,
    #[arg(long, env = "FABSEARCH_UNION_THRESHOLD")]
    union_threshold: Option<f64>,
    /// Ridge penalty; defaults to a tiny multiple of the row count.
    #[arg(long, env = "FABSEARCH_LAMBDA")]
    lambda: Option<f64>,
}

#[derive(Args, Debug)]
struct RegisterCmd {
    csv: PathBuf,
    /// Dataset id; defaults to the file stem.
    #[arg(long)]
    id: Option<String>,
    /// Join key columns.
    #[arg(long, value_delimiter = ',')]
    keys: Vec<String>,
    /// Numeric columns to sketch; all numeric columns when omitted.
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<String>>,
    /// TOML file of public `column = [lo, hi]` bounds.
    #[arg(long)]
    bounds: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args, Debug)]
struct RequestCmd {
    train: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    target: String,
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<String>>,
    /// Key columns offered for joins.
    #[arg(long, value_delimiter = ',')]
    keys: Vec<String>,
    #[arg(long)]
    bounds: Option<PathBuf>,
    /// Where the plan report is written.
    #[arg(long, short, default_value = "plan.txt")]
    output: PathBuf,
    #[command(flatten)]
    config: ConfigFlags,
    #[command(flatten)]
    search: SearchFlags,
}

#[derive(Args, Debug)]
struct BenchCmd {
    /// equivalence, speed, privacy-scaling or request-scaling.
    kind: BenchKind,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long, env = "FABSEARCH_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "FABSEARCH_EPSILON")]
    epsilon: Option<f64>,
    #[arg(long, env = "FABSEARCH_DELTA")]
    delta: Option<f64>,
    /// x values (provider rows, corpus sizes or request counts).
    #[arg(long, value_delimiter = ',')]
    xs: Vec<u64>,
    #[arg(long, env = "FABSEARCH_MAX_ITERS")]
    max_iters: Option<usize>,
    /// Timing repetitions per size in the speed bench.
    #[arg(long)]
    reps: Option<usize>,
    /// CSV destination; stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

impl ConfigFlags {
    fn layered(&self, search: Option<&SearchFlags>, store: &CorpusStore) -> Result<CorpusConfig> {
        let none = SearchFlags::default();
        let s = search.unwrap_or(&none);
        let flags = CorpusConfig {
            epsilon: self.epsilon,
            delta: self.delta,
            seed: self.seed,
            max_iters: s.max_iters,
            min_improve: s.min_improve,
            max_joins: s.max_joins,
            join_threshold: s.join_threshold,
            union_threshold: s.union_threshold,
            lambda: s.lambda,
            max_subset: self.max_subset,
        };
        Ok(flags.over(&store.config()?))
    }
}

fn bounds(path: Option<&Path>) -> Result<Option<fabsearch::privacy::Bounds>> {
    path.map(|p| read_bounds(p).with_context(|| format!("reading bounds from {}", p.display())))
        .transpose()
}

fn register(store: &CorpusStore, cmd: &RegisterCmd) -> Result<()> {
    let cfg = cmd.config.layered(None, store)?;
    let args = RegisterArgs {
        csv: cmd.csv.clone(),
        id: cmd.id.clone(),
        keys: cmd.keys.clone(),
        features: cmd.features.clone(),
        budget: cfg.budget(cmd.config.no_privacy)?,
        bounds: bounds(cmd.bounds.as_deref())?,
        max_subset: cfg.max_subset.unwrap_or(PROVIDER_MAX_SUBSET),
        seed: cfg.seed(),
    };
    let entry = store.register(&args)?;
    let set = RegisteredSketchSet::load(store.root().join(&entry.sketch))?;
    let provenance = if set.is_privatized() { "noisy" } else { "exact" };
    println!("registered {} ({provenance}) -> {}", entry.id, entry.sketch);
    Ok(())
}

fn request(store: &CorpusStore, cmd: &RequestCmd) -> Result<()> {
    let cfg = cmd.config.layered(Some(&cmd.search), store)?;
    let args = RequestArgs {
        train: cmd.train.clone(),
        test: cmd.test.clone(),
        target: cmd.target.clone(),
        features: cmd.features.clone(),
        keys: cmd.keys.clone(),
        budget: cfg.budget(cmd.config.no_privacy)?,
        bounds: bounds(cmd.bounds.as_deref())?,
        config: cfg.search_config()?,
        max_subset: cfg.max_subset.unwrap_or(REQUEST_MAX_SUBSET),
        seed: cfg.seed(),
        output: cmd.output.clone(),
    };
    let outcome = store.request(&args)?;
    println!("selected: {}", outcome.plan.selected().join(", "));
    println!("final utility (R2): {:.6}", outcome.plan.final_utility);
    println!("report written to {}", outcome.output.display());
    Ok(())
}

fn bench(cmd: &BenchCmd) -> Result<()> {
    let mut opts = BenchOptions::new(cmd.kind);
    opts.seed = cmd.seed;
    opts.xs = cmd.xs.clone();
    if let Some(r) = cmd.runs {
        opts.runs = r;
    }
    if let Some(e) = cmd.epsilon {
        opts.epsilon = e;
    }
    if let Some(d) = cmd.delta {
        opts.delta = d;
    }
    if let Some(m) = cmd.max_iters {
        opts.max_iters = m;
    }
    if let Some(r) = cmd.reps {
        opts.reps = r;
    }
    let rows = run_bench(cmd.kind, &opts)?;
    match &cmd.output {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_csv(cmd.kind, &rows, file)?;
        }
        None => {
            let stdout = io::stdout();
            write_csv(cmd.kind, &rows, stdout.lock())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let store = CorpusStore::new(&cli.corpus);
    let result = match &cli.command {
        Command::Register(cmd) => register(&store, cmd),
        Command::Request(cmd) => request(&store, cmd),
        Command::Bench(cmd) => bench(cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(io::stderr(), "error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
