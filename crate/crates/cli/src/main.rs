use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use elastodyn_cli::commands::{cmd_eig, cmd_forward, cmd_invert, cmd_mesh, cmd_probe, CliError, Probe};
use elastodyn_cli::config::{ConfigError, ExperimentConfig, Overrides};
use elastodyn_cli::output::{write_atomic, OutputDir};

#[derive(Parser)]
#[command(name = "elastodyn", version, about = "Time-harmonic elastic forward and inverse experiments")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: run.out, else ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: hardware concurrency).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Linear solver relative tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and validate the mesh.
    Mesh,
    /// Smallest reference eigenvalue and the admissible frequency bound.
    Eig,
    /// Export the discrete Dirichlet-to-Neumann map of the configured material.
    Forward,
    /// Reconstruct the material from synthetic data.
    Invert,
    /// Run one empirical probe.
    Probe {
        #[arg(value_enum)]
        name: Probe,
    },
}

impl Command {
    fn label(&self) -> String {
        match self {
            Command::Mesh => "mesh".into(),
            Command::Eig => "eig".into(),
            Command::Forward => "forward".into(),
            Command::Invert => "invert".into(),
            Command::Probe { name } => format!("probe {}", name.name()),
        }
    }
}

fn run(cli: &Cli, label: &str) -> Result<(), (CliError, Option<PathBuf>)> {
    let overrides = Overrides { seed: cli.seed, threads: cli.threads, tol: cli.tol, out: cli.out.clone() };
    let Some(path) = &cli.config else {
        return Err((CliError::Config(vec!["--config: a configuration file is required".into()]), cli.out.clone()));
    };
    let cfg = ExperimentConfig::load(path, &overrides).map_err(|e| {
        let msgs = match e {
            ConfigError::Read(m) => vec![m],
            ConfigError::Fields(v) => v,
        };
        (CliError::Config(msgs), cli.out.clone())
    })?;
    let dir = cfg.run.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let fail = |e: CliError| (e, Some(dir.clone()));
    if let Some(n) = cfg.run.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| fail(CliError::Config(vec![format!("run.threads: {e}")])))?;
    }
    let out = OutputDir::new(&dir, label, &cfg).map_err(|e| fail(e.into()))?;
    let files = match &cli.command {
        Command::Mesh => cmd_mesh(&cfg, &out),
        Command::Eig => cmd_eig(&cfg, &out),
        Command::Forward => cmd_forward(&cfg, &out),
        Command::Invert => cmd_invert(&cfg, &out),
        Command::Probe { name } => cmd_probe(&cfg, *name, &out),
    }
    .map_err(fail)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let label = cli.command.label();
    match run(&cli, &label) {
        Ok(()) => ExitCode::SUCCESS,
        Err((err, dir)) => {
            let doc = err.to_json(&label);
            let text = serde_json::to_string_pretty(&doc).expect("error serializes") + "\n";
            eprint!("{text}");
            if let Some(dir) = dir {
                if std::fs::create_dir_all(&dir).is_ok() {
                    let _ = write_atomic(&dir.join("error.json"), text.as_bytes());
                }
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
