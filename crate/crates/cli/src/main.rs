use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use knode_mpc_cli::config::RunConfig;
use knode_mpc_cli::pipeline::{self, RunError, RunResult};
use knode_mpc_cli::report;

#[derive(Parser)]
#[command(name = "knode-mpc", version, about = "KNODE-ensemble MPC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; plant defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// `key=value` override, e.g. `mpc.horizon=15`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides the config and the environment).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for parallel stages; 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Record a training trajectory under nominal MPC.
    Collect(Common),
    /// Train the ensemble members and fit blend weights.
    Train(Common),
    /// Size and check the terminal set.
    Certify(Common),
    /// Prediction and closed-loop evaluation.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Also write per-step solver telemetry.
        #[arg(long)]
        telemetry: bool,
    },
    /// Merge metrics files into summary tables.
    Report {
        /// Metrics files to merge.
        metrics: Vec<PathBuf>,
        /// Directory for the tables.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn load(common: &Common) -> RunResult<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(out) = &common.out {
        overrides.push(format!("output_dir={}", toml_string(&out.to_string_lossy())));
    }
    if let Some(t) = common.threads {
        overrides.push(format!("evaluate.threads={t}"));
    }
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path, &overrides)?,
        None => RunConfig::from_toml_str("", &overrides)?,
    };
    if let Some(out) = &common.out {
        std::env::remove_var(knode_mpc_cli::config::OUTPUT_DIR_ENV);
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn run(cli: Cli) -> RunResult<()> {
    match cli.command {
        Command::Collect(c) => {
            let cfg = load(&c)?;
            let path = pipeline::collect(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Train(c) => {
            let cfg = load(&c)?;
            let path = pipeline::train(&cfg)?;
            let manifest = pipeline::read_manifest(&cfg)?;
            println!(
                "wrote {} ({} members, {} failed; hold-out loss equal {:e}, optimized {:e})",
                path.display(),
                manifest.members.len(),
                manifest.failed.len(),
                manifest.weights.equal_loss,
                manifest.weights.optimized_loss
            );
        }
        Command::Certify(c) => {
            let cfg = load(&c)?;
            let cert = pipeline::certify(&cfg)?;
            let r = &cert.report;
            println!(
                "certified gamma {:e} (epsilon {:e}, margin {:e}); requested gamma {} {}",
                r.gamma,
                r.epsilon,
                r.descent_margin.unwrap_or(f64::NAN),
                cfg.mpc.gamma,
                match r.requested_gamma_certified {
                    Some(true) => "certified",
                    Some(false) => "not certified",
                    None => "not checked",
                }
            );
        }
        Command::Evaluate { common, telemetry } => {
            let cfg = load(&common)?;
            let metrics = pipeline::evaluate(&cfg, telemetry)?;
            for (name, s) in &metrics.prediction {
                if let Some(m) = s.median() {
                    println!("prediction {name}: median mse {m:e} ({} failed)", s.failed);
                }
            }
            for (name, per) in &metrics.closed_loop {
                for (metric, s) in per {
                    if let Some(m) = s.median() {
                        println!("closed-loop {name} {metric}: median {m:e} ({} failed)", s.failed);
                    }
                }
            }
        }
        Command::Report { metrics, out } => {
            let sources = report::load_sources(&metrics).map_err(|e| RunError::Usage(format!("{e:#}")))?;
            for path in report::write_tables(&out, &report::tables(&sources))? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
