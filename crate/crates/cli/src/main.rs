//! `usplane`: file-driven runs of every pipeline stage.
//!
//! Each subcommand reads an optional JSON config (`--config`), applies
//! `--set key.path=value` and dedicated flag overrides, writes the resolved
//! config to `<run-dir>/<subcommand>.config.json` and its outputs under the
//! run directory. Exit status is 1 on a pipeline error and 2 on a config
//! error; either way a one-line JSON error object goes to stderr.

mod commands;
mod config;
mod pgm;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use usplane::par::{self, Exec};

use commands::Ctx;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Module(usplane::Error),
}

impl From<usplane::Error> for CliError {
    fn from(e: usplane::Error) -> Self {
        match e {
            // Rejected parameter values are config errors wherever caught.
            usplane::Error::InvalidArgument(m) => CliError::Config(m),
            e => CliError::Module(e),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Module(_) => 1,
            CliError::Config(_) => 2,
        }
    }

    fn to_json(&self) -> Value {
        match self {
            CliError::Config(m) => json!({ "error": { "kind": "config", "message": m } }),
            CliError::Module(e) => {
                let dbg = format!("{e:?}");
                let variant: String = dbg.chars().take_while(|c| c.is_alphanumeric()).collect();
                json!({ "error": { "kind": "module", "variant": variant, "message": e.to_string() } })
            }
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "usplane",
    version,
    about = "Sensorless slice localization toolkit"
)]
struct Cli {
    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; also where inputs are looked up by default.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Global seed. Falls back to the config's `seed`, then USPLANE_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded numerics.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Config override, `key.path=value` with a JSON value. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a phantom volume.
    GenPhantom(GenPhantomArgs),
    /// Sample labeled slices from a volume.
    SampleSlices(SampleArgs),
    /// Supervised training.
    Train(TrainArgs),
    /// Cycle-consistency fine-tuning on target images.
    Finetune(FinetuneArgs),
    /// Predict plane locations.
    Infer(InferArgs),
    /// ED/DA against labels, NSTD over sweeps.
    Eval(EvalArgs),
    /// Simulate a smooth sweep.
    Sweep(SweepArgs),
    /// Fit an implicit field to localized slices.
    FitImplicit(FitArgs),
    /// Refine slice poses against a field.
    RefinePoses(RefineArgs),
    /// Render a plane from a field or volume.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
struct GenPhantomArgs {
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    volume: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    unlabeled: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    slices: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    slices: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    slices: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Sweep bundle; repeatable.
    #[arg(long = "sweep")]
    sweeps: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    volume: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    slices: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args, Debug)]
struct RefineArgs {
    #[arg(long)]
    field: Option<PathBuf>,
    #[arg(long)]
    volume: Option<PathBuf>,
    #[arg(long)]
    slices: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    field: Option<PathBuf>,
    #[arg(long)]
    volume: Option<PathBuf>,
    #[arg(long)]
    slices: Option<PathBuf>,
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    name: Option<String>,
}

/// Dedicated flags as `(config key, value)` overrides.
fn flag_overrides(cmd: &Command) -> Vec<(&'static str, Value)> {
    let mut out = Vec::new();
    let mut put = |k: &'static str, v: Option<Value>| {
        if let Some(v) = v {
            out.push((k, v));
        }
    };
    let p = |p: &Option<PathBuf>| p.as_ref().map(|p| json!(p));
    match cmd {
        Command::GenPhantom(a) => put("size", a.size.map(|v| json!(v))),
        Command::SampleSlices(a) => {
            put("volume", p(&a.volume));
            put("name", a.name.as_ref().map(|v| json!(v)));
            put("count", a.count.map(|v| json!(v)));
            put("unlabeled", a.unlabeled.then_some(json!(true)));
        }
        Command::Train(a) => {
            put("slices", p(&a.slices));
            put("val", p(&a.val));
            put("train.max_steps", a.steps.map(|v| json!(v)));
        }
        Command::Finetune(a) => {
            put("model", p(&a.model));
            put("source", p(&a.source));
            put("targets", p(&a.targets));
            put("val", p(&a.val));
            put("train.max_steps", a.steps.map(|v| json!(v)));
        }
        Command::Infer(a) => {
            put("model", p(&a.model));
            put("slices", p(&a.slices));
        }
        Command::Eval(a) => {
            put("slices", p(&a.slices));
            put("predictions", p(&a.predictions));
            put("model", p(&a.model));
            put("sweeps", (!a.sweeps.is_empty()).then(|| json!(a.sweeps)));
        }
        Command::Sweep(a) => {
            put("volume", p(&a.volume));
            put("name", a.name.as_ref().map(|v| json!(v)));
            put("frames", a.frames.map(|v| json!(v)));
        }
        Command::FitImplicit(a) => {
            put("slices", p(&a.slices));
            put("fit.iters", a.iters.map(|v| json!(v)));
        }
        Command::RefinePoses(a) => {
            put("field", p(&a.field));
            put("volume", p(&a.volume));
            put("slices", p(&a.slices));
            put("refine.iters", a.iters.map(|v| json!(v)));
        }
        Command::Render(a) => {
            put("field", p(&a.field));
            put("volume", p(&a.volume));
            put("slices", p(&a.slices));
            put("index", a.index.map(|v| json!(v)));
            put("name", a.name.as_ref().map(|v| json!(v)));
        }
    }
    out
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::GenPhantom(_) => "gen-phantom",
        Command::SampleSlices(_) => "sample-slices",
        Command::Train(_) => "train",
        Command::Finetune(_) => "finetune",
        Command::Infer(_) => "infer",
        Command::Eval(_) => "eval",
        Command::Sweep(_) => "sweep",
        Command::FitImplicit(_) => "fit-implicit",
        Command::RefinePoses(_) => "refine-poses",
        Command::Render(_) => "render",
    }
}

struct Resolved<C> {
    config: C,
    ctx: Ctx,
    /// A seed was supplied by flag, config or environment.
    seed_given: bool,
    echo: Value,
}

fn resolve<C: DeserializeOwned + Serialize>(cli: &Cli) -> Result<Resolved<C>, CliError> {
    let mut raw = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => json!({}),
    };
    for (k, v) in flag_overrides(&cli.command) {
        config::set_path(&mut raw, k, v)?;
    }
    for o in &cli.overrides {
        let (k, v) = config::parse_override(o)?;
        config::set_path(&mut raw, &k, v)?;
    }
    let (config, cfg_seed): (C, _) = config::resolve(raw)?;
    let env_seed = match std::env::var("USPLANE_SEED") {
        Ok(s) => Some(
            s.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Config(format!("USPLANE_SEED={s:?} is not an integer")))?,
        ),
        Err(_) => None,
    };
    let seed = cli.seed.or(cfg_seed).or(env_seed);
    let exec = if cli.deterministic {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let mut echo = serde_json::to_value(&config).map_err(|e| CliError::Config(e.to_string()))?;
    if let Value::Object(m) = &mut echo {
        m.insert("seed".into(), json!(seed.unwrap_or(0)));
    }
    Ok(Resolved {
        config,
        ctx: Ctx {
            run_dir: cli.run_dir.clone(),
            seed: seed.unwrap_or(0),
            exec,
        },
        seed_given: seed.is_some(),
        echo,
    })
}

fn run_with<C: DeserializeOwned + Serialize>(
    cli: &Cli,
    f: impl FnOnce(&C, &Ctx, bool, &Value) -> Result<Value, CliError>,
) -> Result<Value, CliError> {
    let r: Resolved<C> = resolve(cli)?;
    fs::create_dir_all(&r.ctx.run_dir).map_err(usplane::Error::from)?;
    let echo_path = r
        .ctx
        .path(&format!("{}.config.json", command_name(&cli.command)));
    let mut bytes = serde_json::to_vec_pretty(&r.echo).map_err(usplane::Error::from)?;
    bytes.push(b'\n');
    fs::write(echo_path, bytes).map_err(usplane::Error::from)?;
    f(&r.config, &r.ctx, r.seed_given, &r.echo)
}

fn run(cli: &Cli) -> Result<Value, CliError> {
    if cli.deterministic {
        par::init_threads(1);
    } else if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        par::init_threads(t);
    }
    match &cli.command {
        Command::GenPhantom(_) => run_with(cli, |c, ctx, _, _| commands::gen_phantom_cmd(c, ctx)),
        Command::SampleSlices(_) => {
            run_with(cli, |c, ctx, _, _| commands::sample_slices_cmd(c, ctx))
        }
        Command::Train(_) => run_with(cli, |c, ctx, s, _| commands::train_cmd(c, ctx, s)),
        Command::Finetune(_) => run_with(cli, |c, ctx, s, _| commands::finetune_cmd(c, ctx, s)),
        Command::Infer(_) => run_with(cli, |c, ctx, _, _| commands::infer_cmd(c, ctx)),
        Command::Eval(_) => run_with(cli, |c, ctx, _, echo| commands::eval_cmd(c, ctx, echo)),
        Command::Sweep(_) => run_with(cli, |c, ctx, _, _| commands::sweep_cmd(c, ctx)),
        Command::FitImplicit(_) => {
            run_with(cli, |c, ctx, s, _| commands::fit_implicit_cmd(c, ctx, s))
        }
        Command::RefinePoses(_) => {
            run_with(cli, |c, ctx, s, _| commands::refine_poses_cmd(c, ctx, s))
        }
        Command::Render(_) => run_with(cli, |c, ctx, _, _| commands::render_cmd(c, ctx)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
