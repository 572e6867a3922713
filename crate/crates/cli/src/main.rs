//! `slidematch` — match corrupted camera frames to presentation slides.
//!
//! Subcommands: `generate` (build a synthetic dataset), `train` (boosted
//! rounds with per-round persistence and resume), `eval` (stratified
//! retrieval report), `query` (rank one image), `inspect-weights` (list
//! the heaviest boosting weights).
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (malformed or inconsistent inputs), 3 runtime error (I/O and other
//! environmental failures).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use slidematch::dataset::{Manifest, Split};
use slidematch::error::Error;
use slidematch::pipeline::{
    evaluate_run, generate_dataset, inspect_weights, query_run, train_run, write_reports,
    EvalSpec, GenerateSpec, Profile, RunConfig,
};

#[derive(Parser)]
#[command(name = "slidematch", version, about = "Boosted siamese matching of camera frames to presentation slides")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render procedural slides, corrupt query frames from them, and write
    /// a dataset directory with a manifest.
    Generate(GenerateArgs),
    /// Run boosting rounds against a dataset, fresh or resuming from the
    /// run directory's checkpoint.
    Train(TrainArgs),
    /// Rank every query of a split against all targets and report top-k
    /// hit rates, stratified by noise level and quality decile.
    Eval(EvalArgs),
    /// Rank a single image against every target in the manifest.
    Query(QueryArgs),
    /// List the heaviest entries of a boosting weight table.
    InspectWeights(InspectWeightsArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Master seed; fixes every image and manifest byte.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of slides (retrieval targets).
    #[arg(long, default_value_t = 20)]
    slides: usize,
    /// Training queries generated per slide.
    #[arg(long, default_value_t = 5)]
    queries_per_slide: usize,
    /// Additional held-out queries per slide.
    #[arg(long, default_value_t = 0)]
    heldout_per_slide: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    /// Noise levels (1..=10) cycled across the query sequence.
    #[arg(long, value_delimiter = ',', default_values_t = (1..=10u8).collect::<Vec<_>>())]
    levels: Vec<u8>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (containing manifest.txt).
    #[arg(long, value_name = "DIR")]
    manifest: PathBuf,
    /// Run directory for the checkpoint, weight table, and training log.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Master seed for initialization, sampling, and shuffling.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Total boosting rounds to reach (0 = just write the initialized
    /// checkpoint).
    #[arg(long, default_value_t = 10)]
    rounds: usize,
    /// Training epochs per boosting round.
    #[arg(long, default_value_t = 3)]
    epochs_per_round: usize,
    /// Round set size m (even; half matches, half non-matches).
    #[arg(long, default_value_t = 256)]
    round_size: usize,
    /// SGD minibatch size.
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    /// Adam first-moment decay.
    #[arg(long, default_value_t = 0.5)]
    beta1: f64,
    /// L2 weight decay.
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    /// Margin scale of the squared hinge loss.
    #[arg(long, default_value_t = 2.0)]
    delta: f64,
    /// Hard-case rate: per-class top weight fraction eligible per batch.
    #[arg(long, default_value_t = 0.2)]
    mu: f64,
    /// Acceptance-balance alpha; defaults to the manifest's
    /// positives-per-query mean.
    #[arg(long)]
    alpha: Option<f64>,
    /// Model geometry: "desk" (64 px) or "paper" (256 px).
    #[arg(long, default_value = "desk")]
    profile: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory (containing manifest.txt).
    #[arg(long, value_name = "DIR")]
    manifest: PathBuf,
    /// Checkpoint file to evaluate.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Directory to write report.txt and report_table.txt into; the table
    /// always prints to standard output.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Hit-rate cutoffs.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 5, 10])]
    ks: Vec<usize>,
    /// Which queries to evaluate: all, train, or heldout.
    #[arg(long, default_value = "all")]
    split: String,
    /// Feature-extraction batch size.
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

#[derive(Args)]
struct QueryArgs {
    /// Dataset directory providing the target set.
    #[arg(long, value_name = "DIR")]
    manifest: PathBuf,
    /// Checkpoint file with the trained model.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Grayscale image to rank (the model's input size).
    #[arg(long, value_name = "FILE")]
    image: PathBuf,
    /// Number of targets to list (clipped to the target count).
    #[arg(short, long, default_value_t = 10)]
    k: usize,
    /// Feature-extraction batch size.
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

#[derive(Args)]
struct InspectWeightsArgs {
    /// Weight table file (weights.tsv of a run directory).
    #[arg(long, value_name = "FILE")]
    table: PathBuf,
    /// Number of heaviest entries to list.
    #[arg(long, default_value_t = 20)]
    top: usize,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too; they are not errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e.category() {
        "contract" | "config" => 1,
        "data" => 2,
        _ => 3,
    }
}

/// Accepts either the dataset directory or a path to its manifest.txt.
fn dataset_root(path: &Path) -> PathBuf {
    if path.is_file() {
        path.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        path.to_path_buf()
    }
}

fn parse_split(s: &str) -> Result<Option<Split>, Error> {
    match s {
        "all" => Ok(None),
        other => Split::parse(other).map(Some),
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Query(args) => cmd_query(args),
        Command::InspectWeights(args) => cmd_inspect_weights(args),
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Error> {
    let spec = GenerateSpec {
        out: args.out,
        slides: args.slides,
        queries_per_slide: args.queries_per_slide,
        heldout_per_slide: args.heldout_per_slide,
        image_size: args.image_size,
        seed: args.seed,
        levels: args.levels,
    };
    let manifest = generate_dataset(&spec)?;
    println!(
        "wrote {} targets and {} queries ({} train, {} heldout) to {}",
        manifest.targets.len(),
        manifest.queries.len(),
        manifest.queries_in(Some(Split::Train)).len(),
        manifest.queries_in(Some(Split::Heldout)).len(),
        manifest.root().display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let profile = Profile::parse(&args.profile)?;
    let manifest = Manifest::load(dataset_root(&args.manifest))?;
    let alpha = match args.alpha {
        Some(a) => a,
        None => manifest.training_index()?.alpha(),
    };
    let mut cfg = RunConfig::for_profile(profile, args.seed, alpha);
    cfg.epochs_per_round = args.epochs_per_round;
    cfg.round_size = args.round_size;
    cfg.candidate_k = 16 * args.round_size;
    cfg.mini_batch = args.batch;
    cfg.mu = args.mu;
    cfg.model.delta = args.delta;
    cfg.model.adam.lr = args.lr;
    cfg.model.adam.beta1 = args.beta1;
    cfg.model.adam.weight_decay = args.weight_decay;

    let outcome = train_run(&manifest, &cfg, args.rounds, &args.out)?;
    println!(
        "completed {} rounds ({} run now); checkpoint {}, weights {}",
        outcome.rounds_completed,
        outcome.new_reports.len(),
        outcome.checkpoint.display(),
        outcome.weights.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let manifest = Manifest::load(dataset_root(&args.manifest))?;
    let spec = EvalSpec {
        ks: args.ks,
        split: parse_split(&args.split)?,
        batch: args.batch,
    };
    let products = evaluate_run(&manifest, &args.checkpoint, &spec)?;
    print!("{}", products.table_text);
    if let Some(out) = args.out {
        let (machine, table) = write_reports(&products, &out)?;
        println!("wrote {} and {}", machine.display(), table.display());
    }
    Ok(())
}

fn cmd_query(args: QueryArgs) -> Result<(), Error> {
    let manifest = Manifest::load(dataset_root(&args.manifest))?;
    let outcome = query_run(&manifest, &args.checkpoint, &args.image, args.k, args.batch)?;
    if let Some(requested) = outcome.clipped {
        eprintln!(
            "warning: k = {requested} exceeds the {} available targets; listing all of them",
            outcome.ranked.len()
        );
    }
    for (id, score) in &outcome.ranked {
        println!("{id}\t{score}");
    }
    Ok(())
}

fn cmd_inspect_weights(args: InspectWeightsArgs) -> Result<(), Error> {
    let listing = inspect_weights(&args.table, args.top)?;
    println!(
        "universe {} stored {} default {}",
        listing.universe_size, listing.stored, listing.default_weight
    );
    for (key, weight) in &listing.top {
        println!("{}\t{}\t{}", key.query_id(), key.target_id(), weight);
    }
    Ok(())
}
