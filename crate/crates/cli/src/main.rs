use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use petsql::catalog::load_catalog;
use petsql::evaluation::{ex_accuracy, render_summary, EvalOptions, GoldInstance};
use petsql::pipeline::{load_questions, load_train, Pipeline, RunConfig, Stage};
use petsql::retrieval::{build_pool, ProviderConfig};
use petsql::sqlanalysis::{grade_difficulty, linked_tables};

#[derive(Parser)]
#[command(
    name = "petsql",
    version,
    about = "Two-round text-to-SQL with cross-consistency voting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Write every rendered prompt under <output>/prompts.
    #[arg(long)]
    dump_prompts: bool,
    /// Cached demonstration pool (overrides the config).
    #[arg(long)]
    demo_pool: Option<PathBuf>,
    /// Seed for picking the winner inside the top vote group at random.
    #[arg(long)]
    random_pick: Option<u64>,
    /// Numeric tolerance when comparing results.
    #[arg(long)]
    float_eps: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Only the first N questions of the split.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// All stages: PreSQL, linking, FinSQL, voting, evaluation.
    Run(RunArgs),
    /// Stop after the PreSQL round.
    Presql(RunArgs),
    /// Link tables. With --config, runs through the linking stage; with
    /// --sql-file and --db, links each line of the file.
    Link(LinkArgs),
    /// Stop after the FinSQL round.
    Finsql(RunArgs),
    /// Run through voting (reuses finished stages).
    Vote(RunArgs),
    /// Execution accuracy of a prediction file against gold queries.
    Eval(EvalArgs),
    /// Build and save a demonstration pool from training files.
    BuildPool(PoolArgs),
}

#[derive(Args)]
struct LinkArgs {
    #[command(flatten)]
    run: Option<RunArgs>,
    /// One SQL query per line.
    #[arg(long, requires_all = ["db", "tables"], conflicts_with = "config")]
    sql_file: Option<PathBuf>,
    #[arg(long)]
    db: Option<String>,
    /// Spider tables.json holding the database.
    #[arg(long)]
    tables: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions, one query per line.
    #[arg(long)]
    pred: PathBuf,
    /// Gold queries: Spider JSON, or lines of `query<TAB>db_id`.
    #[arg(long)]
    gold: PathBuf,
    /// Directory holding <db_id>/<db_id>.sqlite.
    #[arg(long)]
    db_root: PathBuf,
    #[arg(long, default_value_t = petsql::execution::DEFAULT_TIMEOUT_MS)]
    timeout_ms: u64,
    #[arg(long, default_value_t = 0.0)]
    float_eps: f64,
    /// Also write the full report as JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PoolArgs {
    /// Spider-format training files.
    #[arg(long, required = true)]
    train: Vec<PathBuf>,
    #[arg(long)]
    tables: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Provider configuration as JSON; defaults to TF-IDF trigrams.
    #[arg(long)]
    provider: Option<String>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(a) | Command::Vote(a) => run(a, Stage::Vote),
        Command::Presql(a) => run(a, Stage::Presql),
        Command::Finsql(a) => run(a, Stage::Finsql),
        Command::Link(a) => match (a.sql_file, a.run) {
            (Some(file), _) => link_file(
                &file,
                a.db.as_deref().unwrap(),
                a.tables.as_deref().unwrap(),
            ),
            (None, Some(run_args)) => run(run_args, Stage::Link),
            (None, None) => bail!("link needs --config, or --sql-file with --db and --tables"),
        },
        Command::Eval(a) => eval(a),
        Command::BuildPool(a) => build(a),
    }
}

fn run(args: RunArgs, until: Stage) -> Result<bool> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.dump_prompts |= args.dump_prompts;
    if args.demo_pool.is_some() {
        cfg.demo_pool = args.demo_pool;
    }
    if args.random_pick.is_some() {
        cfg.random_pick = args.random_pick;
    }
    if let Some(eps) = args.float_eps {
        cfg.float_eps = eps;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if args.limit.is_some() {
        cfg.limit = args.limit;
    }
    if args.output_dir.is_some() {
        cfg.output_dir = args.output_dir;
    }
    let pipeline = Pipeline::new(cfg)?;
    let outcome = pipeline.run_split(until)?;
    let total = outcome.states.len();
    println!(
        "{}: {} of {total} questions reached {until:?}",
        pipeline.config().run_id,
        total - outcome.incomplete
    );
    if let Some(path) = &outcome.predictions_path {
        println!("predictions: {}", path.display());
    }
    if let Some(report) = &outcome.report {
        print!("{}", render_summary(report));
    }
    Ok(outcome.incomplete == 0)
}

fn link_file(sql_file: &Path, db: &str, tables: &Path) -> Result<bool> {
    let catalog = load_catalog(tables)?;
    let schema = catalog
        .get(db)
        .with_context(|| format!("database `{db}` not in {}", tables.display()))?;
    let text = std::fs::read_to_string(sql_file).with_context(|| sql_file.display().to_string())?;
    let mut all_ok = true;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match linked_tables(line, schema) {
            Ok(links) => {
                let grade = grade_difficulty(line)
                    .map(|g| g.to_string())
                    .unwrap_or_default();
                let tables: Vec<&str> = links.tables.iter().map(String::as_str).collect();
                println!("{}\t{grade}", tables.join(","));
            }
            Err(e) => {
                all_ok = false;
                println!("error: {e}");
            }
        }
    }
    Ok(all_ok)
}

fn read_golds(path: &Path) -> Result<Vec<GoldInstance>> {
    if path.extension().is_some_and(|e| e == "json") {
        return load_questions(path)?
            .into_iter()
            .map(|q| {
                let sql = q
                    .gold
                    .with_context(|| format!("question {} has no query", q.question_id))?;
                Ok(GoldInstance {
                    question_id: q.question_id,
                    db_id: q.db_id,
                    sql,
                })
            })
            .collect();
    }
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let (sql, db) = line
                .rsplit_once('\t')
                .with_context(|| format!("gold line {} lacks a tab-separated db_id", i + 1))?;
            Ok(GoldInstance {
                question_id: i.to_string(),
                db_id: db.trim().to_string(),
                sql: sql.trim().to_string(),
            })
        })
        .collect()
}

fn eval(args: EvalArgs) -> Result<bool> {
    let golds = read_golds(&args.gold)?;
    let preds_text =
        std::fs::read_to_string(&args.pred).with_context(|| args.pred.display().to_string())?;
    let preds: Vec<&str> = preds_text.lines().collect();
    let options = EvalOptions {
        timeout_ms: args.timeout_ms,
        float_eps: args.float_eps,
    };
    let report = ex_accuracy(&preds, &golds, &args.db_root, &options)?;
    print!("{}", render_summary(&report));
    if let Some(path) = &args.report {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(true)
}

fn build(args: PoolArgs) -> Result<bool> {
    let provider: ProviderConfig = match &args.provider {
        Some(json) => serde_json::from_str(json).context("--provider")?,
        None => ProviderConfig::default(),
    };
    let catalog = load_catalog(&args.tables)?;
    let train = load_train(&args.train)?;
    let pool = build_pool(&train, &catalog, provider.build())?;
    pool.save(&args.out)?;
    println!("{} demonstrations -> {}", pool.len(), args.out.display());
    Ok(true)
}
