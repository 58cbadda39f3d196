use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use polymer_lab::{run, ConfigBuilder, ConfigError, Experiment, Origin};

/// Directed polymer on a cylinder: run one experiment and write
/// `<out>/<experiment>-<hash>/{results.csv, manifest.json, warnings.log}`.
#[derive(Debug, Parser)]
#[command(name = "polymer-lab", version, after_help = experiments_help())]
struct Cli {
    /// Experiment to run (may also come from the config file).
    experiment: Option<String>,

    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long, allow_negative_numbers = true)]
    seed: Option<String>,

    #[arg(long, allow_negative_numbers = true)]
    replicas: Option<String>,

    /// Noise strength.
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<String>,

    /// Polymer length in time units.
    #[arg(long = "N", allow_negative_numbers = true)]
    n: Option<String>,

    /// Grid cells per unit length.
    #[arg(long = "M", allow_negative_numbers = true)]
    m: Option<String>,

    /// Spatial period in units.
    #[arg(long = "L", allow_negative_numbers = true)]
    l: Option<String>,

    /// Winding truncation half-width.
    #[arg(long = "J", allow_negative_numbers = true)]
    j: Option<String>,

    /// Time steps per unit time.
    #[arg(long, allow_negative_numbers = true)]
    steps: Option<String>,

    /// Worker threads (0 = one per core).
    #[arg(long, allow_negative_numbers = true)]
    threads: Option<String>,

    /// Output root directory.
    #[arg(long)]
    out: Option<String>,

    /// Exit nonzero and write failure.json when an acceptance check fails.
    #[arg(long)]
    assert: bool,

    /// Recompute a single replica and dump its path and increment laws.
    #[arg(long)]
    replay: Option<String>,

    /// Any other config key, e.g. `--set n_max=10 --set threshold.z_gate=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn experiments_help() -> String {
    format!("Experiments: {}", Experiment::valid_names())
}

fn build(cli: &Cli) -> Result<polymer_lab::ExperimentConfig, ConfigError> {
    let mut b = ConfigBuilder::new();
    if let Some(path) = &cli.config {
        b.apply_file(path)?;
    }
    let flag = Origin::Flag;
    if let Some(e) = &cli.experiment {
        b.set("experiment", e, &flag)?;
    }
    let flags = [
        ("seed", &cli.seed),
        ("replicas", &cli.replicas),
        ("beta", &cli.beta),
        ("N", &cli.n),
        ("M", &cli.m),
        ("L", &cli.l),
        ("J", &cli.j),
        ("steps", &cli.steps),
        ("threads", &cli.threads),
        ("out", &cli.out),
        ("replay", &cli.replay),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            b.set(key, v, &flag)?;
        }
    }
    if cli.assert {
        b.set("assert", "true", &flag)?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { text: kv.clone(), origin: Origin::Flag })?;
        b.set(k.trim(), v, &flag)?;
    }
    b.build()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("polymer-lab: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cfg) {
        Ok(outcome) => {
            for c in &outcome.output.checks {
                println!("{} {}: {} (bound {})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.bound);
            }
            for w in &outcome.output.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", outcome.dir.display());
            ExitCode::from(outcome.exit_code(cfg.assert) as u8)
        }
        Err(e) => {
            eprintln!("polymer-lab: {e}");
            ExitCode::from(3)
        }
    }
}
