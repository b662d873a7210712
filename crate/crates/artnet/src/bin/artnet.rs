//! Command-line front end: dataset generation, training, evaluation, the
//! label-fraction sweep, gradient audits, and retrieval inspection.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use artnet::harness::{
    evaluate_run, gradcheck, negative_control, sweep, train_and_eval, write_eval_report,
    HarnessError, MetricsReport, RetrievalRecord, RunConfig, SWEEP_FRACTIONS,
};
use artnet::model::{PairSource, Variant};
use artnet::world::{
    gen_episodes, gen_world, make_split, save_episodes, DataError, WorldConfig, WorldError,
};

#[derive(Parser)]
#[command(name = "artnet", version, about = "Multimodal masked word learning with analogical retrieval")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic episode dataset with a withheld composition split.
    GenData(GenDataArgs),
    /// Train a run from a config file and evaluate both test splits.
    Train(RunArgs),
    /// Re-evaluate an existing run directory from its checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate at label fractions 1.0, 0.8, 0.6, 0.4, 0.2.
    Sweep(RunArgs),
    /// Finite-difference audit of every differentiable module family.
    Gradcheck(GradcheckArgs),
    /// Pretty-print retrieval diagnostics recorded by a run.
    InspectRetrieval(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of verbs in the vocabulary.
    #[arg(long, default_value_t = 12)]
    verbs: usize,
    /// Number of nouns in the vocabulary.
    #[arg(long, default_value_t = 20)]
    nouns: usize,
    /// Number of context words available for sentence padding.
    #[arg(long, default_value_t = 10)]
    contexts: usize,
    /// Fraction of verb-noun pairs that are affordable.
    #[arg(long, default_value_t = 0.5)]
    density: f64,
    /// Dimension of each region feature vector.
    #[arg(long, default_value_t = 32)]
    dvis: usize,
    /// Noise scale applied to prototypes when rendering regions.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Number of episodes to generate.
    #[arg(long, default_value_t = 2400)]
    episodes: usize,
    /// Fraction of affordable compositions withheld as test_new.
    #[arg(long, default_value_t = 0.2)]
    withheld: f64,
    /// Fraction of remaining episodes held out as test_seen.
    #[arg(long, default_value_t = 0.15)]
    test_seen: f64,
    /// World seed; every stream below it is derived deterministically.
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Output episode file (JSON lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Run config file; omit to start from built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Episode file override.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Parent directory for run outputs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Model variant: artnet, multimodal-baseline or text-only-baseline.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Fraction of training episodes to keep.
    #[arg(long)]
    fraction: Option<f64>,
    /// Learning rate override.
    #[arg(long)]
    lr: Option<f64>,
    /// Share the word embedding table with the prediction head.
    #[arg(long)]
    tie_embeddings: Option<bool>,
    /// Reference pair embeddings: initial or contextual.
    #[arg(long, value_parser = parse_pair_source)]
    pair_source: Option<PairSource>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding config.toml and checkpoint.json.
    #[arg(long)]
    run_dir: PathBuf,
    /// Evaluate against a different episode file than the archived one.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random instances per module family.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 41)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    /// Run directory holding retrieval.jsonl.
    #[arg(long)]
    run_dir: PathBuf,
    /// Show at most this many episodes.
    #[arg(long, default_value_t = 5)]
    limit: usize,
    /// Only show this target episode id.
    #[arg(long)]
    episode: Option<u64>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| {
        format!("unknown variant {s:?} (expected artnet, multimodal-baseline or text-only-baseline)")
    })
}

fn parse_pair_source(s: &str) -> Result<PairSource, String> {
    match s {
        "initial" => Ok(PairSource::Initial),
        "contextual" => Ok(PairSource::Contextual),
        other => Err(format!("unknown pair source {other:?} (expected initial or contextual)")),
    }
}

/// Failures split by exit code: bad input vs. broken run.
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(1),
            CliError::Runtime(_) => ExitCode::from(2),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

// World construction rejects flag values, not broken state.
impl From<WorldError> for CliError {
    fn from(e: WorldError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; clap knows which.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenData(args) => gen_data(args),
        Cmd::Train(args) => {
            let cfg = resolve_config(args)?;
            let report = train_and_eval(&cfg)?;
            print_report(&report);
            Ok(())
        }
        Cmd::Eval(args) => eval(args),
        Cmd::Sweep(args) => {
            let cfg = resolve_config(args)?;
            let reports = sweep(&cfg, &SWEEP_FRACTIONS)?;
            for report in &reports {
                print_report(report);
            }
            Ok(())
        }
        Cmd::Gradcheck(args) => run_gradcheck(args),
        Cmd::InspectRetrieval(args) => inspect_retrieval(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let cfg = WorldConfig {
        verbs: args.verbs,
        nouns: args.nouns,
        context_words: args.contexts,
        d_vis: args.dvis,
        affordance_density: args.density,
        sigma: args.sigma,
    };
    let world = gen_world(&cfg, args.seed)?;
    let mut episodes = gen_episodes(&world, args.episodes, args.seed);
    let split = make_split(
        &mut episodes,
        &world.vocab,
        args.withheld,
        args.test_seen,
        args.seed,
    )?;
    save_episodes(&args.out, &world.vocab, args.dvis, &episodes)?;
    println!(
        "wrote {} episodes to {} ({} train, {} test_seen, {} test_new)",
        episodes.len(),
        args.out.display(),
        split.train.len(),
        split.test_seen.len(),
        split.test_new.len(),
    );
    let names: Vec<String> = split
        .withheld
        .iter()
        .map(|&(v, n)| {
            format!(
                "{} {}",
                world.vocab.token_name(world.vocab.verb_token(v)),
                world.vocab.token_name(world.vocab.noun_token(n))
            )
        })
        .collect();
    println!("withheld compositions: {}", names.join(", "));
    Ok(())
}

/// Loads the config file (or defaults) and applies flag overrides on top.
fn resolve_config(args: RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = args.data {
        cfg.data = v;
    }
    if let Some(v) = args.out_dir {
        cfg.out_dir = v;
    }
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.fraction {
        cfg.fraction = v;
    }
    if let Some(v) = args.lr {
        cfg.optimizer.lr = v;
    }
    if let Some(v) = args.tie_embeddings {
        cfg.tie_embeddings = v;
    }
    if let Some(v) = args.pair_source {
        cfg.pair_source = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(report: &MetricsReport) {
    let last_loss = report.epoch_mean_loss.last().copied().unwrap_or(f64::NAN);
    println!(
        "run {} fraction {:.2}: final epoch mean loss {:.4}",
        report.run_id, report.fraction, last_loss
    );
    for outcome in [&report.seen, &report.new] {
        println!(
            "  {:<9} ({:>4} episodes)  top1 {:.3}  top5 {:.3}  affordance {:.3}  (verb {:.3}, noun {:.3})",
            outcome.split.as_str(),
            outcome.episodes,
            outcome.top1,
            outcome.top5,
            outcome.affordance,
            outcome.verb_top1,
            outcome.noun_top1,
        );
    }
    for w in &report.warnings {
        println!("  warning: {w}");
    }
    println!("  outputs in {}", report.run_dir.display());
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let (cfg, outcomes) = evaluate_run(&args.run_dir, args.data.as_deref())?;
    let path = write_eval_report(&args.run_dir, &cfg, &outcomes)?;
    for outcome in &outcomes {
        println!(
            "{:<9} ({:>4} episodes)  top1 {:.3}  top5 {:.3}  affordance {:.3}  (verb {:.3}, noun {:.3})",
            outcome.split.as_str(),
            outcome.episodes,
            outcome.top1,
            outcome.top5,
            outcome.affordance,
            outcome.verb_top1,
            outcome.noun_top1,
        );
    }
    println!("report written to {}", path.display());
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let reports = gradcheck(args.instances, args.seed)?;
    let mut all_ok = true;
    for r in &reports {
        println!(
            "{:<12} {:>3} instances  max rel err {:.3e}  (tol {:.0e})  {}",
            r.module,
            r.instances,
            r.max_rel_err,
            r.tol,
            if r.passed() { "ok" } else { "FAIL" },
        );
        all_ok &= r.passed();
    }
    let control = negative_control()?;
    let control_ok = control > artnet::tensor::DEFAULT_TOL;
    println!(
        "negative control: corrupted backward flagged at rel err {:.3e}  {}",
        control,
        if control_ok { "ok" } else { "FAIL" },
    );
    if all_ok && control_ok {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}

fn inspect_retrieval(args: InspectArgs) -> Result<(), CliError> {
    let path = args.run_dir.join("retrieval.jsonl");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut shown = 0;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RetrievalRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Runtime(format!("{}: bad record: {e}", path.display())))?;
        if let Some(id) = args.episode {
            if rec.target != id {
                continue;
            }
        }
        if shown >= args.limit {
            break;
        }
        shown += 1;
        println!("target {} ({})", rec.target, rec.split.as_str());
        for (i, (&r, &s)) in rec.references.iter().zip(&rec.scores).enumerate() {
            let trace = &rec.traces[i];
            println!(
                "  ref {r:>5}  relevance {s:.4}  text alpha {}  vis alpha {}",
                fmt_weights(&trace.alpha_text),
                fmt_weights(&trace.alpha_vis),
            );
        }
    }
    if shown == 0 {
        println!("no matching records in {}", path.display());
    }
    Ok(())
}

/// Compact rendering of an attention weight vector.
fn fmt_weights(w: &[f64]) -> String {
    if w.is_empty() {
        return "[]".into();
    }
    let mut parts: Vec<String> = w.iter().take(8).map(|x| format!("{x:.2}")).collect();
    if w.len() > 8 {
        parts.push(format!("… {} more", w.len() - 8));
    }
    format!("[{}]", parts.join(" "))
}
