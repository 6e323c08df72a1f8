//! Command-line dispatch. Exit status: 0 on success, 1 for usage and
//! validation errors, 2 for numeric failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use hyperalign_core::eval::evaluate;
use hyperalign_core::gradsuite::{check_path, GradTarget, TOLERANCE};
use hyperalign_core::model::RunConfig;
use hyperalign_core::retrieval::{index_build, RetrievalIndex};
use hyperalign_core::synth::{
    synth_generate, SynthConfig, DEFAULT_LOCAL_PROMPTS, DEFAULT_NOISE, DEFAULT_PROMPT_DIM,
};
use hyperalign_core::train::{train, StepLog};

use crate::checkpoint::{load_model, save_model};
use crate::config::{load_config, load_priors};
use crate::corpus::{read_corpus, write_corpus};
use crate::error::{Error, Result};
use crate::sweep::{run_sweep, summary, to_csv, Grid};
use crate::{fsio, index, paired_corpora};

#[derive(Parser, Debug)]
#[command(name = "hyperalign", version, about = "Hyperbolic retrieval and optimal-transport attention at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic long-tailed corpus (JSON lines).
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score retrieval of a held-out corpus against the brute-force oracle.
    Eval(EvalArgs),
    /// Nearest database records for one query record.
    Retrieve(RetrieveArgs),
    /// Embed a corpus once and save the index.
    Index(IndexArgs),
    /// Train and evaluate every cell of a config grid.
    Sweep(SweepArgs),
    /// Finite-difference checks of the loss paths.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// JSON array with one Positive rate per category.
    #[arg(long)]
    priors_file: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_NOISE)]
    noise: f64,
    #[arg(long, default_value_t = DEFAULT_PROMPT_DIM)]
    prompt_dim: usize,
    #[arg(long, default_value_t = DEFAULT_LOCAL_PROMPTS)]
    local_prompts: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat JSON RunConfig; the tuned desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Per-step losses as JSON.
    #[arg(long)]
    out_curve: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    train_corpus: PathBuf,
    #[arg(long)]
    test_corpus: PathBuf,
    /// Metrics JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss curve written by `train --out-curve`, echoed into the report.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Corpus holding the query record; also the database unless --index is given.
    #[arg(long)]
    corpus: PathBuf,
    /// Prebuilt index to search instead of embedding --corpus.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    query_id: String,
    #[arg(long, default_value_t = 1)]
    k: usize,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON object of field -> list of values; the backend x attention table when omitted.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, requires = "test_corpus")]
    train_corpus: Option<PathBuf>,
    #[arg(long, requires = "train_corpus")]
    test_corpus: Option<PathBuf>,
    /// Size of the generated database corpus (when no corpora are given).
    #[arg(long, default_value_t = 512)]
    n_train: usize,
    #[arg(long, default_value_t = 128)]
    n_test: usize,
    #[arg(long, default_value_t = DEFAULT_NOISE)]
    noise: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TargetArg {
    Rank,
    Fcc,
    Mpsa,
    All,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = TargetArg::All)]
    target: TargetArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    points: usize,
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Retrieve(a) => retrieve_cmd(a),
        Command::Index(a) => index_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
    .map(|()| 0)
    .or_else(|e| match e {
        Exit(code) => Ok(code),
        Fail(e) => Err(e),
    })
}

/// A command either fails with an error or asks for a specific exit status.
enum Outcome {
    Exit(i32),
    Fail(Error),
}
use Outcome::{Exit, Fail};

impl<E: Into<Error>> From<E> for Outcome {
    fn from(e: E) -> Self {
        Fail(e.into())
    }
}

type CmdResult = std::result::Result<(), Outcome>;

fn run_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(RunConfig::desk()),
    }
}

fn json_pretty<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let mut synth = SynthConfig::new(a.n, a.seed);
    synth.noise = a.noise;
    synth.prompt_dim = a.prompt_dim;
    synth.local_prompts = a.local_prompts;
    if let Some(p) = &a.priors_file {
        synth.priors = load_priors(p)?;
    }
    let records = synth_generate(&synth)?;
    write_corpus(&a.out, &records)?;
    eprintln!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let config = run_config(&a.config)?;
    let corpus = read_corpus(&a.corpus)?;
    let start = Instant::now();
    let outcome = train(&config, &corpus)?;
    save_model(&a.out_checkpoint, &outcome.model, &config)?;
    if let Some(p) = &a.out_curve {
        fsio::write_atomic(p, json_pretty(&outcome.curve).as_bytes())?;
    }
    if let (Some(first), Some(last)) = (outcome.curve.first(), outcome.curve.last()) {
        eprintln!(
            "trained {} steps in {:.1}s: total loss {:.4} -> {:.4}",
            last.step,
            start.elapsed().as_secs_f64(),
            first.total,
            last.total
        );
    }
    Ok(())
}

fn read_curve(path: &Path) -> Result<Vec<f64>> {
    let steps: Vec<StepLog> =
        serde_json::from_str(&fsio::read_string(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(steps.into_iter().map(|s| s.total).collect())
}

fn eval_cmd(a: EvalArgs) -> CmdResult {
    let (model, config) = load_model(&a.checkpoint)?;
    let train_set = read_corpus(&a.train_corpus)?;
    let test_set = read_corpus(&a.test_corpus)?;
    let curve = match &a.curve {
        Some(p) => read_curve(p)?,
        None => Vec::new(),
    };
    let start = Instant::now();
    let report = evaluate(&model, &config, &train_set, &test_set, curve)?;
    let text = json_pretty(&report);
    match &a.out {
        Some(p) => fsio::write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    eprintln!(
        "p@1 {:.4}  mean hamming {:.3} (oracle {:.3})  wall_time {:.3}s",
        report.p_at_1,
        report.mean_retrieved_hamming,
        report.mean_oracle_hamming,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn retrieve_cmd(a: RetrieveArgs) -> CmdResult {
    let corpus = read_corpus(&a.corpus)?;
    let query = corpus
        .iter()
        .find(|r| r.id == a.query_id)
        .ok_or_else(|| Error::Invalid(format!("no record with id {:?} in {}", a.query_id, a.corpus.display())))?;
    let index: RetrievalIndex = match (&a.index, &a.checkpoint) {
        (Some(p), _) => index::load(p)?,
        (None, Some(ck)) => {
            let (model, config) = load_model(ck)?;
            index_build(&corpus, &model.hnn, config.backend)?
        }
        (None, None) => return Err(Error::Invalid("retrieve needs --checkpoint or --index".into()).into()),
    };
    for (rank, n) in index.query(&query.logits, a.k)?.iter().enumerate() {
        println!("{}\t{}\t{:.9}", rank + 1, n.id, n.distance);
    }
    Ok(())
}

fn index_cmd(a: IndexArgs) -> CmdResult {
    let (model, config) = load_model(&a.checkpoint)?;
    let corpus = read_corpus(&a.corpus)?;
    let mut built = index_build(&corpus, &model.hnn, config.backend)?;
    built.meta.model_checksum = index::model_checksum(&model.hnn);
    built.meta.created_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    index::save(&a.out, &built)?;
    eprintln!("indexed {} records ({} backend)", built.len(), config.backend);
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> CmdResult {
    let base = run_config(&a.config)?;
    let grid = match &a.grid {
        Some(p) => serde_json::from_str::<Grid>(&fsio::read_string(p)?).map_err(|e| Error::format(p, e.to_string()))?,
        None => Grid::ablation(),
    };
    let (train_set, test_set) = match (&a.train_corpus, &a.test_corpus) {
        (Some(tr), Some(te)) => (read_corpus(tr)?, read_corpus(te)?),
        _ => {
            let mut synth = SynthConfig::new(a.n_train, base.seed);
            synth.noise = a.noise;
            synth.prompt_dim = base.d_t;
            paired_corpora(base.seed, a.n_train, a.n_test, &synth)?
        }
    };
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let results = run_sweep(&base, &grid, &train_set, &test_set)?;
    fsio::write_atomic(&a.out_dir.join("sweep.csv"), to_csv(&results).as_bytes())?;
    fsio::write_atomic(&a.out_dir.join("sweep.json"), json_pretty(&results).as_bytes())?;
    let table = summary(&results);
    fsio::write_atomic(&a.out_dir.join("summary.txt"), table.as_bytes())?;
    print!("{table}");
    let failed: Vec<i32> = results.iter().filter_map(|r| r.error_code).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        eprintln!("{} of {} cells failed", failed.len(), results.len());
        Err(Exit(failed.into_iter().min().unwrap_or(1)))
    }
}

fn gradcheck_cmd(a: GradcheckArgs) -> CmdResult {
    let targets: Vec<GradTarget> = match a.target {
        TargetArg::Rank => vec![GradTarget::Rank],
        TargetArg::Fcc => vec![GradTarget::Fcc],
        TargetArg::Mpsa => vec![GradTarget::Mpsa],
        TargetArg::All => GradTarget::ALL.to_vec(),
    };
    let mut all_ok = true;
    for t in targets {
        let r = check_path(t, a.seed, a.points)?;
        all_ok &= r.passed();
        println!(
            "{:<5} worst_rel_err={:.3e} points={} rejected={} worst_input={:?} {}",
            t.name(),
            r.worst.max_rel_err,
            r.points,
            r.rejected,
            r.worst_input,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    if all_ok {
        Ok(())
    } else {
        eprintln!("gradient check above tolerance {TOLERANCE:e}");
        Err(Exit(2))
    }
}
