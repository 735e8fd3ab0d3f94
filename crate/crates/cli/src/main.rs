use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedbayes::bnn::check::{gradcheck, klcheck, GRADCHECK_TOL, KLCHECK_TOL};
use fedbayes::experiment::{build_partition, final_metric, run_experiment_with, sweep, ExperimentConfig};
use fedbayes::{Error, Exec};

const THREADS_ENV: &str = "FEDBAYES_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "fedbayes",
    version,
    about = "Personalized Bayesian federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every configured mode for K rounds and write metrics.
    Run(Common),
    /// Final accuracy over a data-fraction x noise grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated data fractions.
        #[arg(long, default_value = "1.0,0.5,0.25,0.1", value_delimiter = ',')]
        fractions: Vec<f64>,
        /// Comma-separated noise levels.
        #[arg(long, default_value = "0,0.0001,0.001,0.01,0.1", value_delimiter = ',')]
        epsilons: Vec<f64>,
    },
    /// Partition the dataset, print per-client class counts, write the manifest.
    Partition(Common),
    /// Finite-difference check of the analytic ELBO gradient.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        nets: usize,
    },
    /// Closed-form KL against numeric integration.
    Klcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
    /// Print the version.
    Version,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file (`key = value` lines, `schema = 1` required).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's `out`, then `./out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run clients and modes one after another.
    #[arg(long)]
    sequential: bool,
    /// Print per-round global metrics.
    #[arg(short, long)]
    verbose: bool,
    /// Config overrides as `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_divergence() { 2 } else { 1 };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        msg: msg.into(),
    }
}

/// Pair up `--key value` / `--key=value` tokens. Dashes in keys map to
/// underscores, so `--meta-overlap` and `--meta_overlap` are the same key.
fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let Some(flag) = tok.strip_prefix("--") else {
            return Err(usage(format!("expected --key, found {tok:?}")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| usage(format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

fn build_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for (k, v) in parse_overrides(&common.overrides)? {
        cfg.set(&k, &v)?;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if cfg.out.is_none() {
        cfg.out = Some(PathBuf::from("out"));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exec_for(common: &Common) -> Exec {
    if common.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn cmd_run(common: &Common) -> Result<(), Failure> {
    let cfg = build_config(common)?;
    let outcome = run_experiment_with(&cfg, exec_for(common))?;
    let rows = outcome.rows();
    for m in &outcome.modes {
        if common.verbose {
            for r in &m.reports {
                if let Some((acc, loss)) = r.global {
                    println!("{} round {:>3}  acc {acc:.4}  loss {loss:.4}", m.label, r.round);
                }
            }
        }
        let acc = final_metric(&rows, &m.label, "test_accuracy").unwrap_or(f64::NAN);
        let loss = final_metric(&rows, &m.label, "test_loss").unwrap_or(f64::NAN);
        println!("{:<24} final accuracy {acc:.4}  loss {loss:.4}", m.label);
    }
    println!(
        "wrote {}",
        cfg.out.as_deref().unwrap_or_else(|| "out".as_ref()).display()
    );
    Ok(())
}

fn cmd_sweep(common: &Common, fractions: &[f64], epsilons: &[f64]) -> Result<(), Failure> {
    let cfg = build_config(common)?;
    let table = sweep(&cfg, fractions, epsilons, exec_for(common))?;
    print!("{}", table.to_csv());
    Ok(())
}

fn cmd_partition(common: &Common) -> Result<(), Failure> {
    let cfg = build_config(common)?;
    let (ds, partition) = build_partition(&cfg)?;
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    let path = dir.join("partition.manifest");
    std::fs::write(&path, partition.manifest()).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let classes: Vec<String> = (0..ds.n_classes()).map(|c| format!("c{c}")).collect();
    println!("client,{},total", classes.join(","));
    for (n, counts) in partition.histogram(&ds).iter().enumerate() {
        let cells: Vec<String> = counts.iter().map(usize::to_string).collect();
        println!("{n},{},{}", cells.join(","), counts.iter().sum::<usize>());
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(common) => cmd_run(&common),
        Command::Sweep {
            common,
            fractions,
            epsilons,
        } => cmd_sweep(&common, &fractions, &epsilons),
        Command::Partition(common) => cmd_partition(&common),
        Command::Gradcheck { seed, nets } => {
            let report = gradcheck(seed, nets)?;
            println!(
                "gradcheck: {} nets, {} coordinates, max relative error {:.3e} (tolerance {GRADCHECK_TOL:e})",
                report.cases, report.coords_checked, report.max_rel_err
            );
            if report.passed() {
                Ok(())
            } else {
                Err(usage("gradcheck failed"))
            }
        }
        Command::Klcheck { seed, cases } => {
            let report = klcheck(seed, cases);
            println!(
                "klcheck: {} cases, max absolute error {:.3e} (tolerance {KLCHECK_TOL:e})",
                report.cases, report.max_abs_err
            );
            if report.passed() {
                Ok(())
            } else {
                Err(usage("klcheck failed"))
            }
        }
        Command::Version => {
            println!("fedbayes {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| usage(format!("{THREADS_ENV} must be a non-negative integer, got {raw:?}")))?;
    fedbayes::exec::init_threads(n);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
