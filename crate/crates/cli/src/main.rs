//! `otadapt`: synthesize embedding streams, run adaptation, sweep grids and
//! inspect embedding files.
//!
//! Exit codes: 0 on success, 1 for usage or validation errors, 2 for runtime
//! failures. Each successful command prints one `key=value` summary line on
//! stdout; logs go to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use otadapt::adapt::{AdaptConfig, Variant};
use otadapt::data::{read_embedding_file, EmbeddingFile, ShiftKind, SyntheticShiftSpec};
use otadapt::eval::{
    prepare_synthetic, render_report, run_embedding_stream, run_grid, run_stream, write_report, ExperimentGrid,
    Scenario, StreamOutcome,
};
use otadapt::ot::{NanPolicy, Stabilization};

#[derive(Debug, Parser)]
#[command(name = "otadapt", version, about = "Optimal-transport test-time adaptation against class prototypes")]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic shifted stream to an embedding file.
    Gen(GenArgs),
    /// Adapt over one stream and report accuracy.
    Adapt(AdaptArgs),
    /// Run a variant x epsilon x template-count x severity grid and write reports.
    Sweep(SweepArgs),
    /// Print the header of an embedding file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Synthetic preset: default, clean or dominant_cluster.
    #[arg(long, conflicts_with = "input")]
    synthetic: Option<String>,
    /// Embedding file (zero_shot and training_free only).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Override the preset's shift kind: none, mean_shift, rotation, feature_mask.
    #[arg(long)]
    shift: Option<ShiftKind>,
    /// Override the preset's shift severity, in [0, 1].
    #[arg(long, allow_negative_numbers = true)]
    severity: Option<f64>,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    #[arg(long, allow_negative_numbers = true)]
    epsilon: Option<f64>,
    #[arg(long)]
    sinkhorn_iters: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    /// plain, shifted or log_domain.
    #[arg(long)]
    stabilization: Option<Stabilization>,
    /// error or fallback_log_domain.
    #[arg(long)]
    nan_policy: Option<NanPolicy>,
    /// Keep LayerNorm state across streams instead of resetting it.
    #[arg(long)]
    no_reset: bool,
}

impl ConfigArgs {
    fn apply(&self, mut cfg: AdaptConfig) -> AdaptConfig {
        cfg.epsilon = self.epsilon.unwrap_or(cfg.epsilon);
        cfg.sinkhorn_iters = self.sinkhorn_iters.unwrap_or(cfg.sinkhorn_iters);
        cfg.lr = self.lr.unwrap_or(cfg.lr);
        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        cfg.tau = self.tau.unwrap_or(cfg.tau);
        cfg.stabilization = self.stabilization.unwrap_or(cfg.stabilization);
        cfg.nan_policy = self.nan_policy.unwrap_or(cfg.nan_policy);
        cfg.reset_per_scenario = !self.no_reset;
        cfg
    }
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Output file.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    #[arg(long, default_value = "clip_ot")]
    variant: Variant,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the first M templates of the bank (default: all).
    #[arg(long)]
    templates: Option<usize>,
    #[command(flatten)]
    scenario: ScenarioArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "zero_shot,training_free,avg_template,clip_ot,tent")]
    variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    epsilons: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    template_counts: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    severities: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Directory for results.md, results.csv and timings.csv.
    #[arg(short, long)]
    out: PathBuf,
    /// Worker threads (0: one per core).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct InspectArgs {
    file: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure::Usage(message.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let result = match cli.command {
        Command::Gen(args) => gen(args),
        Command::Adapt(args) => adapt(args),
        Command::Sweep(args) => sweep(args),
        Command::Inspect(args) => inspect(args),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(message)) => {
            eprintln!("error: {message}\n\nUsage: otadapt <gen|adapt|sweep|inspect> [OPTIONS]\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn synthetic_spec(args: &ScenarioArgs, preset: &str) -> Result<SyntheticShiftSpec, Failure> {
    let mut spec = SyntheticShiftSpec::preset(preset).map_err(|e| usage(e.to_string()))?;
    if let Some(kind) = args.shift {
        spec.shift_kind = kind;
    }
    if let Some(severity) = args.severity {
        spec.severity = severity;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    Ok(spec)
}

fn gen(args: GenArgs) -> Result<String, Failure> {
    let preset = match (&args.scenario.synthetic, &args.scenario.input) {
        (Some(p), None) => p.clone(),
        (None, None) => "default".to_string(),
        (_, Some(_)) => return Err(usage("gen takes --synthetic, not --input")),
    };
    if args.batch_size == 0 {
        return Err(usage("--batch-size must be >= 1"));
    }
    let spec = synthetic_spec(&args.scenario, &preset)?.with_seed(args.seed);
    let scenario = otadapt::generate_synthetic(&spec, args.batch_size).context("generating stream")?;
    let file = scenario.to_embedding_file().context("encoding stream")?;
    file.write(&args.output)
        .with_context(|| format!("writing {}", args.output.display()))?;
    log::info!("wrote {} bytes to {}", file.encoded_len(), args.output.display());
    Ok(format!(
        "file={} d={} n={} K={} M={} preset={preset} seed={}",
        args.output.display(),
        file.dim(),
        file.n_items(),
        file.classes(),
        file.templates(),
        args.seed
    ))
}

fn outcome_summary(variant: Variant, cfg: &AdaptConfig, templates: usize, o: &StreamOutcome) -> String {
    format!(
        "variant={variant} accuracy={:.4} collapse={:.4} final_collapse={:.4} batches={} epsilon={} sinkhorn_iters={} lr={} batch_size={} tau={} templates={templates} seed={}",
        o.accuracy, o.collapse, o.final_collapse, o.batches, cfg.epsilon, cfg.sinkhorn_iters, cfg.lr, cfg.batch_size, cfg.tau, cfg.seed
    )
}

fn adapt(args: AdaptArgs) -> Result<String, Failure> {
    let cfg = args.config.apply(AdaptConfig {
        variant: args.variant,
        seed: args.seed,
        ..AdaptConfig::default()
    });
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    if let Some(path) = &args.scenario.input {
        if args.variant.updates_encoder() {
            return Err(usage(format!(
                "variant {} needs the encoder; embedding files support zero_shot and training_free",
                args.variant
            )));
        }
        let data = read_embedding_file(path).with_context(|| format!("reading {}", path.display()))?;
        let bank = data
            .bank
            .ok_or_else(|| anyhow::anyhow!("{} has no prototype block", path.display()))?;
        let labels = data
            .labels
            .ok_or_else(|| anyhow::anyhow!("{} has no labels", path.display()))?;
        let templates = args.templates.unwrap_or(bank.templates());
        if templates == 0 || templates > bank.templates() {
            return Err(usage(format!("--templates must be in [1, {}]", bank.templates())));
        }
        let bank = bank
            .subset(&(0..templates).collect::<Vec<_>>())
            .context("selecting templates")?;
        let outcome = run_embedding_stream(&bank, &data.items, &labels, &cfg)
            .map_err(|e| anyhow::anyhow!("{} ({})", e.message, e.code))?;
        return Ok(outcome_summary(args.variant, &cfg, templates, &outcome));
    }

    let preset = args.scenario.synthetic.clone().unwrap_or_else(|| "default".to_string());
    let spec = synthetic_spec(&args.scenario, &preset)?.with_seed(args.seed);
    let templates = args.templates.unwrap_or(spec.templates);
    if templates == 0 || templates > spec.templates {
        return Err(usage(format!("--templates must be in [1, {}]", spec.templates)));
    }
    let setup = prepare_synthetic(&spec, templates, cfg.batch_size)
        .map_err(|e| anyhow::anyhow!("{} ({})", e.message, e.code))?;
    log::info!("{} batches of up to {} items", setup.batches.len(), cfg.batch_size);
    let outcome = run_stream(&setup.encoder, &setup.bank, &setup.batches, &cfg).map_err(|e| anyhow::anyhow!("{e} ({})", e.code()))?;
    Ok(outcome_summary(args.variant, &cfg, templates, &outcome))
}

fn sweep(args: SweepArgs) -> Result<String, Failure> {
    let counts_given = args.template_counts.is_some();
    let base = args.config.apply(AdaptConfig::default());
    base.validate().map_err(|e| usage(e.to_string()))?;
    let scenario = match (&args.scenario.synthetic, &args.scenario.input) {
        (_, Some(path)) => Scenario::File(path.clone()),
        (preset, None) => Scenario::Synthetic(synthetic_spec(&args.scenario, preset.as_deref().unwrap_or("default"))?),
    };
    let mut grid = ExperimentGrid::new(scenario)
        .with_variants(args.variants)
        .with_seeds(args.seeds)
        .with_base(base);
    if let Some(e) = args.epsilons {
        grid = grid.with_epsilons(e);
    }
    if let Some(t) = args.template_counts {
        grid = grid.with_template_counts(t);
    }
    if let Some(s) = args.severities {
        grid = grid.with_severities(s);
    }
    if let Scenario::File(path) = &grid.scenario {
        if !counts_given {
            let file = EmbeddingFile::read(path).with_context(|| format!("reading {}", path.display()))?;
            grid = grid.with_template_counts(vec![file.templates()]);
        }
    }

    let rows = run_grid(&grid, args.jobs).map_err(|e| match e {
        otadapt::EvalError::InvalidGrid(m) => usage(m),
        other => Failure::Runtime(other.into()),
    })?;
    let report = render_report(&rows).context("rendering report")?;
    write_report(&report, &args.out).with_context(|| format!("writing reports to {}", args.out.display()))?;
    let errors = rows.iter().filter(|r| r.error.is_some()).count();
    Ok(format!(
        "rows={} errors={errors} csv={}",
        rows.len(),
        args.out.join("results.csv").display()
    ))
}

fn inspect(args: InspectArgs) -> Result<String, Failure> {
    let file = EmbeddingFile::read(&args.file).with_context(|| format!("reading {}", args.file.display()))?;
    Ok(format!(
        "file={} d={} n={} K={} M={} flags={} labels={} prototypes={}",
        args.file.display(),
        file.dim(),
        file.n_items(),
        file.classes(),
        file.templates(),
        file.flags(),
        file.labels().is_some(),
        file.prototypes().is_some()
    ))
}
