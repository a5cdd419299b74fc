use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde_json::Value;

use trajenv::eval::finetune::Task;
use trajenv::pipeline::commands;
use trajenv::pipeline::config::RunConfig;
use trajenv::pipeline::synth::SyntheticCitySpec;
use trajenv::Error;

#[derive(Parser)]
#[command(name = "trajenv", version, about = "Environment-aware trajectory representation pipeline")]
struct Cli {
    /// `key = value` configuration file; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,

    /// Extra `key=value` overrides applied after the configuration file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate inputs, split chronologically and build transition statistics.
    Ingest,
    /// Emit POI prompts and fill the embedding cache.
    Describe,
    /// Self-supervised pretraining; resumes from an existing checkpoint.
    Pretrain,
    /// Fine-tune a task head on the pretrained encoder.
    Finetune {
        /// rlp, tdp, tte or pr
        #[arg(long)]
        task: String,
    },
    /// Evaluate on the test split.
    Eval {
        /// rlp, tdp, tte, str or pr
        #[arg(long)]
        task: String,
    },
    /// Export one embedding per trajectory as CSV.
    Embed {
        /// Trajectory file; defaults to the test split.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate a synthetic city and a matching configuration file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Intersections per side.
        #[arg(long, default_value_t = 8)]
        m: usize,
        #[arg(long, default_value_t = 2000)]
        trajectories: usize,
    },
}

fn config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_synth_config(dir: &Path) -> Result<(), Error> {
    let text = "\
# generated by `trajenv synth`
segments = segments.csv
edges = edges.csv
pois = pois.csv
categories = categories.csv
trajectories = trajectories.traj
cache = cache
out = run
";
    let path = dir.join("trajenv.conf");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn run(cli: &Cli) -> Result<Value, Error> {
    if cli.device != "cpu" {
        return Err(Error::Config(format!("device {:?} is not available; use cpu", cli.device)));
    }
    if let Command::Synth { out, m, trajectories } = &cli.command {
        let spec = SyntheticCitySpec {
            m: *m,
            num_trajectories: *trajectories,
            ..Default::default()
        };
        let report = commands::synth(out, &spec, cli.seed.unwrap_or(0))?;
        write_synth_config(out)?;
        return Ok(report);
    }
    let cfg = config(cli)?;
    match &cli.command {
        Command::Ingest => commands::ingest(&cfg),
        Command::Describe => commands::describe(&cfg),
        Command::Pretrain => commands::pretrain(&cfg),
        Command::Finetune { task } => commands::finetune(&cfg, task.parse::<Task>()?),
        Command::Eval { task } => commands::eval(&cfg, task),
        Command::Embed { input, output } => commands::embed(&cfg, input.as_deref(), output),
        Command::Synth { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_input_error() { 1 } else { 2 })
        }
    }
}
