use std::path::PathBuf;
use std::process::ExitCode;

use apsense_cli::commands::{error_report, run, Command};
use apsense_cli::config::RunConfig;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "apsense", version, about = "Accident-prone feature detection pipeline")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Override `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override `workdir`.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Cluster collision records into hotspots.
    Cluster {
        /// Collision CSV (`cluster.input`).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Download street-view images and build the dataset manifest.
    Fetch,
    /// Train the classifier on the manifest.
    Train,
    /// Produce CAM heatmaps and AP-feature masks for the chosen split.
    Explain,
    /// Score the explanations with the masking metrics.
    Evaluate,
    /// Run the HUD projection scenario.
    Simulate {
        /// Scenario TOML (`simulate.scenario_file`).
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Replay a GPS trace and report detection-mode switches.
    Monitor {
        /// GPS trace CSV (`monitor.trace`).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Hotspot CSV (`monitor.hotspots`).
        #[arg(long)]
        hotspots: Option<PathBuf>,
        /// Switching radius in metres (`monitor.radius_m`).
        #[arg(long)]
        radius: Option<f64>,
    },
}

fn path_override(key: &str, path: &std::path::Path) -> String {
    format!("{key}={}", toml::Value::String(path.to_string_lossy().into_owned()))
}

fn execute(cli: Cli) -> anyhow::Result<serde_json::Value> {
    let mut overrides = cli.overrides;
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(w) = &cli.workdir {
        overrides.push(path_override("workdir", w));
    }
    let command = match &cli.command {
        Cmd::Cluster { input } => {
            if let Some(p) = input {
                overrides.push(path_override("cluster.input", p));
            }
            Command::Cluster
        }
        Cmd::Fetch => Command::Fetch,
        Cmd::Train => Command::Train,
        Cmd::Explain => Command::Explain,
        Cmd::Evaluate => Command::Evaluate,
        Cmd::Simulate { scenario } => {
            if let Some(p) = scenario {
                overrides.push(path_override("simulate.scenario_file", p));
            }
            Command::Simulate
        }
        Cmd::Monitor { trace, hotspots, radius } => {
            if let Some(p) = trace {
                overrides.push(path_override("monitor.trace", p));
            }
            if let Some(p) = hotspots {
                overrides.push(path_override("monitor.hotspots", p));
            }
            if let Some(r) = radius {
                overrides.push(format!("monitor.radius_m={r:?}"));
            }
            Command::Monitor
        }
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let out = run(command, &cfg)?;
    Ok(serde_json::json!({ "command": command.as_str(), "summary": out.summary, "outputs": out.outputs }))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_report(&e));
            ExitCode::FAILURE
        }
    }
}
