use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use odsgd_core::cluster::Mode;
use odsgd_core::harness::{compare_runs, run_experiment, run_with_baseline, ExperimentConfig};
use odsgd_core::simnet::{imp_rate_parts, t_new, t_org};
use odsgd_core::{Error, Result};

/// Simulated parameter-server training: SSGD, ASGD, DC-ASGD and OD-SGD on a
/// virtual clock.
#[derive(Parser)]
#[command(name = "odsgd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its metrics CSV.
    Run(Box<RunArgs>),
    /// Compare metrics files against a baseline run.
    Compare(CompareArgs),
    /// Closed-form iteration times for a timing model.
    Predict(PredictArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Key-value config file; omitted keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    /// Warm-up length in iterations.
    #[arg(long)]
    wp: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// One value, or a comma-separated value per worker.
    #[arg(long)]
    t_cop: Option<String>,
    #[arg(long)]
    t_com: Option<String>,
    #[arg(long)]
    t_com_prime: Option<String>,
    #[arg(long)]
    optimizer_local: Option<String>,
    /// Metrics CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Event trace path.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Also run this mode on the same config and report IMP/GR rates.
    #[arg(long)]
    baseline: Option<String>,
    /// Any other config key, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct CompareArgs {
    baseline: PathBuf,
    others: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    window: usize,
    /// First smoothed index; defaults to half the window.
    #[arg(long)]
    start: Option<usize>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    t_cop: f64,
    #[arg(long)]
    t_com: f64,
    /// Defaults to `t_com`.
    #[arg(long)]
    t_com_prime: Option<f64>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut ov = Vec::new();
        let flags = [
            ("mode", &self.mode),
            ("cluster.workers", &self.workers),
            ("train.wp", &self.wp),
            ("seed", &self.seed),
            ("timing.t_cop", &self.t_cop),
            ("timing.t_com", &self.t_com),
            ("timing.t_com_prime", &self.t_com_prime),
            ("local.optimizer", &self.optimizer_local),
        ];
        for (key, v) in flags {
            if let Some(v) = v {
                ov.push((key.to_string(), v.clone()));
            }
        }
        if let Some(p) = &self.out {
            ov.push(("output.metrics".into(), p.display().to_string()));
        }
        if let Some(p) = &self.trace {
            ov.push(("output.trace".into(), p.display().to_string()));
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::config_field("set", format!("`{kv}` is not key=value")))?;
            ov.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(ov)
    }
}

fn run(args: RunArgs) -> Result<()> {
    let ov = args.overrides()?;
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path, &ov)?,
        None => ExperimentConfig::parse("", &ov)?,
    };
    let Some(baseline) = &args.baseline else {
        print!("{}", run_experiment(&cfg)?.describe());
        return Ok(());
    };
    let baseline: Mode = baseline.parse()?;
    let (own, base) = run_with_baseline(&cfg, baseline)?;
    print!("{}", own.describe());
    println!("baseline        {baseline}");
    match own.imp_rate_vs(&base) {
        Some(imp) => println!("imp_rate        {imp:.6}"),
        None => println!("imp_rate        -"),
    }
    println!("gr_rate%        {:.4}", own.gr_rate_vs(&base)?);
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let start = args.start.unwrap_or(args.window / 2);
    let c = compare_runs(&args.baseline, &args.others, args.window, start)?;
    print!("{}", c.render_table());
    if let Some(path) = args.csv {
        std::fs::write(path, c.render_csv())?;
    }
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    let prime = args.t_com_prime.unwrap_or(args.t_com);
    let imp = imp_rate_parts(args.t_cop, args.t_com, prime)?;
    println!("t_org     {}", t_org(args.t_cop, prime));
    println!("t_new     {}", t_new(args.t_cop, args.t_com));
    println!("imp_rate  {imp:.6}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run(a) => run(*a),
        Command::Compare(a) => compare(a),
        Command::Predict(a) => predict(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("odsgd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
