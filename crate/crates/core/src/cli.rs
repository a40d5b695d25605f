//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation failure, 3 runtime
//! failure. Machine-readable output goes to stdout, diagnostics to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::archbuilder::{
    build_network, estimate_resources, ArchConfig, ArchSettings, MemoryBudget, DEFAULT_BUDGET_BYTES,
    DEFAULT_NUM_CLASSES,
};
use crate::blockgraph::OperationMatrix;
use crate::crs::{run_search, CrsConfig};
use crate::evaluators::{
    AnalyticEvaluator, EvaluatorBinding, ExternalTrainer, Landscape, SurrogateEvaluator,
    TrainerProtocolConfig, TrainingSettings,
};
use crate::objective::{read_trajectory, EvalPipeline, Evaluator};
use crate::report::{plot_series, write_plot_series, write_run, RunManifest};
use crate::searchspace::{DecodedConfig, RelaxedPoint, SearchSpace};

/// Environment variable naming the default root for search output.
pub const OUT_DIR_ENV: &str = "CRSNAS_OUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "crsnas", version, about = "Architecture search for 3D segmentation networks with controlled random search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Show the dimensions, population size and cardinality of a space.
    SpaceInfo(SpaceInfoArgs),
    /// Check a block's operation matrix for sources and sinks.
    Validate(ValidateArgs),
    /// Build the network for one point or configuration and price it.
    Build(BuildArgs),
    /// Run a controlled random search.
    Search(SearchArgs),
    /// Turn a trajectory CSV into plot-ready series.
    ExportPlot(ExportPlotArgs),
}

#[derive(Debug, Args)]
struct SpaceInfoArgs {
    /// Preset name (segnas11, segnas4, segnas7) or path to a JSON definition.
    #[arg(long)]
    space: String,
    #[arg(long, default_value_t = 10)]
    pop_multiplier: usize,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Comma-separated operation codes.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    ops: Vec<u8>,
    #[arg(long)]
    nodes: usize,
}

#[derive(Debug, Args)]
struct ArchArgs {
    /// Input extents as `d,h,w`, or one value for a cube.
    #[arg(long, default_value = "128,128,128")]
    shape: String,
    #[arg(long, default_value_t = 1)]
    in_channels: usize,
    #[arg(long, default_value_t = DEFAULT_NUM_CLASSES)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    element_bytes: u64,
    #[arg(long, default_value_t = 1)]
    batch_per_device: u64,
    #[arg(long, default_value_t = DEFAULT_BUDGET_BYTES)]
    budget_bytes: u64,
}

impl ArchArgs {
    fn settings(&self) -> Result<ArchSettings, CliError> {
        Ok(ArchSettings {
            input_shape: parse_shape(&self.shape)?,
            in_channels: self.in_channels,
            num_classes: self.classes,
        })
    }

    fn budget(&self) -> MemoryBudget {
        MemoryBudget {
            element_bytes: self.element_bytes,
            batch_per_device: self.batch_per_device,
            budget_bytes: self.budget_bytes,
        }
    }
}

#[derive(Debug, Args)]
struct BuildArgs {
    #[arg(long)]
    space: String,
    /// Relaxed point, comma-separated, one value per free dimension.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "config", required_unless_present = "config")]
    point: Option<String>,
    /// Decoded configuration in key form, e.g. `n=21;p=3;sup=1;res=0;nodes=3;ops=2,0,2`.
    #[arg(long)]
    config: Option<String>,
    /// Also write the network JSON alone to this file.
    #[arg(long)]
    ir_out: Option<PathBuf>,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long)]
    space: String,
    /// arch-surrogate, sphere, step-sphere, rastrigin or external.
    #[arg(long, default_value = "arch-surrogate")]
    evaluator: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    iters: usize,
    #[arg(long, default_value_t = 10)]
    pop_multiplier: usize,
    #[arg(long)]
    no_mutation: bool,
    /// Run directory. Defaults to `<root>/<space>-<evaluator>-s<seed>` with
    /// the root taken from the environment or `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = OUT_DIR_ENV, default_value = "runs")]
    out_root: PathBuf,
    /// Trainer executable for the external evaluator.
    #[arg(long)]
    trainer: Option<String>,
    /// Argument passed to the trainer; repeatable.
    #[arg(long = "trainer-arg", allow_hyphen_values = true)]
    trainer_args: Vec<String>,
    #[arg(long, default_value_t = 3600.0)]
    trainer_timeout: f64,
    #[arg(long, default_value_t = 100)]
    epochs: u32,
    #[arg(long, default_value_t = 3)]
    batch: u32,
    /// JSON object forwarded as the request's `data` section.
    #[arg(long, default_value = "{}")]
    data: String,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Debug, Args)]
struct ExportPlotArgs {
    #[arg(long)]
    trajectory: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Invalid(String),
    Runtime(anyhow::Error),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Invalid(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

/// Parses `argv` (program name first) and runs the command.
pub fn run_cli<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    return EXIT_OK;
                }
                _ => EXIT_USAGE,
            };
            let _ = write!(err, "{e}");
            return code;
        }
    };
    let result = match cli.command {
        Command::SpaceInfo(args) => space_info(args, out),
        Command::Validate(args) => validate(args, out),
        Command::Build(args) => build(args, out),
        Command::Search(args) => search(args, out, err),
        Command::ExportPlot(args) => export_plot(args, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.code()
        }
    }
}

fn load_space(spec: &str) -> Result<SearchSpace, CliError> {
    if SearchSpace::preset_names().contains(&spec) {
        return SearchSpace::preset(spec).map_err(invalid);
    }
    let path = Path::new(spec);
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "`{spec}` is neither a preset ({}) nor a readable file",
            SearchSpace::preset_names().join(", ")
        )));
    }
    let text = std::fs::read_to_string(path)?;
    SearchSpace::from_json(&text).map_err(invalid)
}

fn parse_shape(text: &str) -> Result<[usize; 3], CliError> {
    let values: Vec<usize> = text
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad shape `{text}`")))?;
    match values.as_slice() {
        [e] => Ok([*e; 3]),
        [d, h, w] => Ok([*d, *h, *w]),
        _ => Err(CliError::Usage(format!("shape needs 1 or 3 extents, got `{text}`"))),
    }
}

fn space_info(args: SpaceInfoArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let space = load_space(&args.space)?;
    writeln!(out, "variant: {}", space.variant())?;
    writeln!(out, "n_h: {}", space.n_h())?;
    writeln!(out, "dimensions:")?;
    for spec in space.specs() {
        match spec.fixed {
            Some(v) => writeln!(out, "  {:<6} fixed {v}", spec.name)?,
            None => writeln!(out, "  {:<6} [{}, {})", spec.name, spec.lower, spec.upper)?,
        }
    }
    let crs = CrsConfig {
        population_multiplier: args.pop_multiplier,
        ..CrsConfig::default()
    };
    writeln!(out, "population: {}", crs.population_size(space.n_h()))?;
    writeln!(out, "cardinality: {}", space.cardinality())?;
    Ok(EXIT_OK)
}

fn validate(args: ValidateArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let matrix = OperationMatrix::from_ops(&args.ops, args.nodes).map_err(invalid)?;
    write!(out, "{matrix}")?;
    let verdict = matrix.validate();
    writeln!(out, "verdict: {verdict}")?;
    Ok(if verdict.is_legal() { EXIT_OK } else { EXIT_INVALID })
}

fn build(args: BuildArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let space = load_space(&args.space)?;
    let decoded: DecodedConfig = match (&args.point, &args.config) {
        (Some(point), _) => {
            let coords = point
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| CliError::Usage(format!("bad point `{point}`")))?;
            space.decode(&RelaxedPoint::new(coords)).map_err(invalid)?
        }
        (None, Some(key)) => {
            let config: DecodedConfig = key.parse().map_err(invalid)?;
            space.lift(&config).map_err(invalid)?;
            config
        }
        (None, None) => return Err(CliError::Usage("one of --point or --config is required".into())),
    };
    let settings = args.arch.settings()?;
    let ir = build_network(&ArchConfig::new(decoded, &settings)).map_err(invalid)?;
    let resources = estimate_resources(&ir, &args.arch.budget());
    if let Some(path) = &args.ir_out {
        std::fs::write(path, ir.to_json() + "\n")?;
    }
    let doc = serde_json::json!({ "resources": resources, "ir": ir });
    writeln!(out, "{}", serde_json::to_string_pretty(&doc).expect("json"))?;
    Ok(EXIT_OK)
}

fn search(args: SearchArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, CliError> {
    let space = load_space(&args.space)?;
    let settings = args.arch.settings()?;
    let budget = args.arch.budget();
    let crs = CrsConfig {
        population_multiplier: args.pop_multiplier,
        max_iterations: args.iters,
        rng_seed: args.seed,
        mutation_enabled: !args.no_mutation,
    };
    let (evaluator, binding): (Box<dyn Evaluator>, EvaluatorBinding) = match args.evaluator.as_str() {
        "arch-surrogate" => {
            let e = SurrogateEvaluator::default();
            let b = e.binding();
            (Box::new(e), b)
        }
        "external" => {
            let program = args
                .trainer
                .clone()
                .ok_or_else(|| CliError::Usage("--trainer is required for the external evaluator".into()))?;
            let data: serde_json::Value = serde_json::from_str(&args.data)
                .map_err(|e| CliError::Usage(format!("--data is not JSON: {e}")))?;
            let proto = TrainerProtocolConfig {
                command: std::iter::once(program).chain(args.trainer_args.clone()).collect(),
                timeout_seconds: args.trainer_timeout,
                working_dir: None,
            };
            let train = TrainingSettings {
                epochs: args.epochs,
                batch: args.batch,
                seed: args.seed,
                data,
            };
            let e = ExternalTrainer::new(proto, train);
            let b = e.binding();
            (Box::new(e), b)
        }
        other => {
            let landscape: Landscape = other.parse().map_err(|_| {
                CliError::Usage(format!(
                    "unknown evaluator `{other}` (arch-surrogate, sphere, step-sphere, rastrigin, external)"
                ))
            })?;
            let e = AnalyticEvaluator::new(landscape, &space);
            let b = e.binding();
            (Box::new(e), b)
        }
    };

    let mut pipeline = EvalPipeline::new(&space, evaluator, settings.clone(), budget);
    let result = run_search(&space, &mut pipeline, &crs).map_err(invalid)?;

    let best_ir = pipeline.realize(&result.best_decoded).ok().map(|(ir, _)| ir.to_json());
    if best_ir.is_none() {
        writeln!(err, "note: best configuration does not build a network; no {} written", crate::report::BEST_IR_FILE)?;
    }
    let dir = args.out.clone().unwrap_or_else(|| {
        args.out_root
            .join(format!("{}-{}-s{}", space.variant(), binding.id, args.seed))
    });
    let manifest = RunManifest::new(space.definition(), &crs, binding, &settings, &budget, &result);
    let paths = write_run(&dir, &manifest, &result, best_ir.as_deref())?;

    writeln!(out, "best: {}", result.best_decoded.canonical_key())?;
    writeln!(out, "best_f: {}", result.best_f)?;
    match result.best_dice {
        Some(d) => writeln!(out, "best_dice: {d}")?,
        None => writeln!(out, "best_dice: -")?,
    }
    writeln!(out, "iterations: {}", result.trajectory.len())?;
    writeln!(out, "effective_evaluations: {}", result.effective_evaluations)?;
    writeln!(out, "manifest: {}", paths.manifest.display())?;
    writeln!(out, "trajectory: {}", paths.trajectory.display())?;
    if let Some(p) = &paths.best_ir {
        writeln!(out, "best_ir: {}", p.display())?;
    }
    Ok(EXIT_OK)
}

fn export_plot(args: ExportPlotArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let file = std::fs::File::open(&args.trajectory)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.trajectory.display())))?;
    let rows = read_trajectory(std::io::BufReader::new(file)).map_err(invalid)?;
    let series = plot_series(&rows);
    match &args.out {
        Some(path) => {
            let file = std::fs::File::create(path)?;
            write_plot_series(std::io::BufWriter::new(file), &series)?;
        }
        None => write_plot_series(&mut *out, &series)?,
    }
    Ok(EXIT_OK)
}
