use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use textcot::backend::{Client, MockBackend};
use textcot::config::RunConfig;
use textcot::dataset::{convert, RawFormat};
use textcot::geometry::{CropConfig, CropMode};
use textcot::harness::{self, RunSummary};
use textcot::metrics::aggregate;
use textcot::pipeline::{LoadedImage, Pipeline, Strategy};
use textcot::prompting::PromptSet;
use textcot::store::ResponseStore;
use textcot::synthetic::{generate_suite, write_suite, OracleParams, MANIFEST_FILE, SIDECAR_FILE};

/// Zoom-in chain-of-thought evaluation for text-rich images.
#[derive(Parser)]
#[command(name = "textcot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the configured strategies over the configured datasets.
    Run(RunArgs),
    /// Answer one question about one image.
    Ask(AskArgs),
    /// Run an ablation matrix and write one combined report.
    Ablate(AblateArgs),
    /// Convert a raw benchmark file into a manifest.
    Convert(ConvertArgs),
    /// Generate a synthetic scene suite.
    Synth(SynthArgs),
    /// Inspect or clean the response cache.
    Cache {
        #[command(subcommand)]
        command: CacheCommand,
    },
    /// Rebuild report tables from a results file.
    Report(ReportArgs),
}

#[derive(Args)]
struct Overrides {
    /// Output directory (overrides the config).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Skip samples already traced in the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Response cache directory (overrides the config).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, config: &mut RunConfig) {
        if let Some(o) = &self.output {
            config.output_dir = o.clone();
        }
        if self.resume {
            config.resume = true;
        }
        if let Some(c) = self.concurrency {
            config.concurrency = c;
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(c) = &self.cache_dir {
            config.cache_dir = Some(c.clone());
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Replace the configured strategies; repeatable.
    #[arg(long = "strategy")]
    strategies: Vec<Strategy>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct AskArgs {
    image: PathBuf,
    question: String,
    #[arg(long, default_value = "textcot")]
    strategy: Strategy,
    /// Backend and prompt settings; defaults to the mock backend.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    crop_mode: Option<CropMode>,
    /// Print the full trace as JSON.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Reasoning ablation rows: direct, ground, ground+crop, full chain.
    #[arg(long)]
    reasoning: bool,
    /// Cropping ablation rows: one full chain per crop mode.
    #[arg(long)]
    cropping: bool,
    /// Extra rows; repeatable.
    #[arg(long = "strategy")]
    strategies: Vec<Strategy>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ConvertArgs {
    /// textvqa_json or funsd_kie
    #[arg(long)]
    format: RawFormat,
    /// Raw annotation file, or a directory of FUNSD annotation files.
    #[arg(long)]
    input: PathBuf,
    /// Image directory as seen from the manifest's location.
    #[arg(long, default_value = "images")]
    image_prefix: String,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    legibility_threshold: Option<f64>,
    #[arg(long)]
    grounding_jitter: Option<f64>,
    #[arg(long)]
    model_input_side: Option<u32>,
}

#[derive(Subcommand)]
enum CacheCommand {
    Stats {
        #[arg(long)]
        dir: PathBuf,
    },
    Gc {
        #[arg(long)]
        dir: PathBuf,
        /// Also remove entries older than this many days.
        #[arg(long)]
        max_age_days: Option<u64>,
    },
}

#[derive(Args)]
struct ReportArgs {
    /// results.jsonl from a run.
    results: PathBuf,
    /// Write report.md and report.csv here instead of printing.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn print_summary(summary: &RunSummary) {
    print!("{}", summary.report.to_markdown());
    eprintln!(
        "{} traces ({} resumed, {} failed), {} backend calls, {} cache hits -> {}",
        summary.traces.len(),
        summary.resumed,
        summary.errors,
        summary.counters.backend_calls,
        summary.counters.cache_hits,
        summary.output_dir.display()
    );
}

fn run_and_report(config: &RunConfig) -> Result<ExitCode> {
    let summary = harness::execute(config)?;
    print_summary(&summary);
    Ok(if summary.errors == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let mut config = RunConfig::load(&args.config)?;
    if !args.strategies.is_empty() {
        config.strategies = args.strategies;
    }
    args.overrides.apply(&mut config);
    run_and_report(&config)
}

fn cmd_ablate(args: AblateArgs) -> Result<ExitCode> {
    let mut strategies = Vec::new();
    if args.reasoning {
        strategies.extend(harness::reasoning_ablation());
    }
    if args.cropping {
        strategies.extend(harness::cropping_ablation());
    }
    strategies.extend(args.strategies);
    let mut seen = Vec::new();
    strategies.retain(|s| {
        let label = s.to_string();
        let fresh = !seen.contains(&label);
        seen.push(label);
        fresh
    });
    if strategies.is_empty() {
        eprintln!("error: empty ablation matrix; pass --reasoning, --cropping or --strategy");
        return Ok(ExitCode::from(2));
    }
    let mut config = RunConfig::load(&args.config)?;
    config.strategies = strategies;
    args.overrides.apply(&mut config);
    run_and_report(&config)
}

fn cmd_ask(args: AskArgs) -> Result<ExitCode> {
    let (client, prompts, crop, seed) = match &args.config {
        Some(path) => {
            let config = RunConfig::load(path)?;
            (config.build_client()?, config.prompts, config.crop, config.seed)
        }
        None => (
            Client::new(Arc::new(MockBackend::default())),
            PromptSet::default(),
            CropConfig::default(),
            0,
        ),
    };
    let mut strategy = args.strategy;
    if let (Some(mode), Strategy::TextCot(opts)) = (args.crop_mode, &mut strategy) {
        opts.crop_mode = mode;
    }
    let image = LoadedImage::open(&args.image)?;
    let pipeline = Pipeline::new(&client, prompts, crop).with_seed(seed);
    let trace = pipeline.run("ask", &args.question, &image, &strategy)?;
    if args.trace {
        println!("{}", serde_json::to_string_pretty(&trace)?);
    } else {
        println!("{}", trace.final_answer);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_convert(args: ConvertArgs) -> Result<ExitCode> {
    let text = convert(&args.input, args.format, &args.image_prefix)?;
    let count = text.lines().filter(|l| !l.starts_with("{\"manifest\"")).count();
    fs::write(&args.output, text).with_context(|| format!("writing {}", args.output.display()))?;
    eprintln!("wrote {count} samples to {}", args.output.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let mut params = OracleParams {
        seed: args.seed,
        ..OracleParams::default()
    };
    if let Some(t) = args.legibility_threshold {
        params.legibility_threshold = t;
    }
    if let Some(j) = args.grounding_jitter {
        params.grounding_jitter = j;
    }
    if let Some(s) = args.model_input_side {
        params.model_input_side = s;
    }
    if let Err(e) = params.validate() {
        bail!("invalid oracle parameters: {e}");
    }
    let scenes = generate_suite(args.n, &params, args.seed)?;
    write_suite(&args.output, &scenes, &params, args.seed)?;
    eprintln!(
        "wrote {} scenes: {} and {}",
        scenes.len(),
        args.output.join(MANIFEST_FILE).display(),
        args.output.join(SIDECAR_FILE).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_cache(command: CacheCommand) -> Result<ExitCode> {
    match command {
        CacheCommand::Stats { dir } => {
            let stats = ResponseStore::open(&dir)?.stats()?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        CacheCommand::Gc { dir, max_age_days } => {
            let max_age = max_age_days.map(|d| Duration::from_secs(d * 86_400));
            let report = ResponseStore::open(&dir)?.gc(max_age)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode> {
    let results = harness::read_results(&args.results)?;
    let report = aggregate(&results);
    match &args.output {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write(&dir.join(harness::REPORT_MD_FILE), &report.to_markdown())?;
            write(&dir.join(harness::REPORT_CSV_FILE), &report.to_csv())?;
        }
        None => print!("{}", report.to_markdown()),
    }
    Ok(ExitCode::SUCCESS)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Ask(a) => cmd_ask(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Convert(a) => cmd_convert(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Cache { command } => cmd_cache(command),
        Command::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
