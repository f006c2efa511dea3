use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use routenet::bench::config::LabSettings;
use routenet::bench::presets::{self, DIVERSITY_ALPHA};
use routenet::bench::{run_experiment, ExperimentConfig, ExperimentOutcome, Split};
use routenet::lab::run_protocol;
use routenet::Error;

#[derive(Parser, Debug)]
#[command(name = "routenet", version, about = "Routing-network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSV files.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the configured experiment and write `metrics.csv`.
    Train(Common),
    /// Compare gradient estimators on random softmax bandits; writes `estimators.csv`.
    EstimatorLab(Common),
    /// Collapse demo with and without the diversity reward.
    DemoCollapse(Common),
    /// Overfitting demo: depth-3 routing against one scalar module.
    DemoOverfit(Common),
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
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Train(c) => {
            let mut cfg = match &c.config {
                Some(path) => ExperimentConfig::load(path)?,
                None => ExperimentConfig::default(),
            };
            if let Some(seed) = c.seed {
                cfg.seed = seed;
            }
            cfg.out = Some(c.out.join("metrics.csv"));
            let outcome = run_experiment(&cfg)?;
            summarize("train", &outcome);
        }
        Command::EstimatorLab(c) => {
            let settings = match &c.config {
                Some(path) => LabSettings::parse(&std::fs::read_to_string(path)?)?,
                None => LabSettings::default(),
            };
            let report = run_protocol(&settings.ks, &settings.lab, c.seed.unwrap_or(0))?;
            let path = c.out.join("estimators.csv");
            create_dir(&c.out)?;
            report.save(&path)?;
            for r in &report.rows {
                println!(
                    "{:<22} k={:<3} variance={:.3e} mse={:.3e} biased={:.2}",
                    r.label(),
                    r.k,
                    r.variance,
                    r.mse,
                    r.bias_detected
                );
            }
            println!("wrote {}", path.display());
        }
        Command::DemoCollapse(c) => {
            reject_config(&c)?;
            let seed = c.seed.unwrap_or(0);
            for (name, alpha) in [("collapse_alpha0", 0.0), ("collapse_diverse", DIVERSITY_ALPHA)] {
                let mut cfg = presets::collapse(seed, alpha);
                cfg.out = Some(c.out.join(format!("{name}.csv")));
                let outcome = run_experiment(&cfg)?;
                summarize(&format!("{name} (alpha {alpha})"), &outcome);
            }
        }
        Command::DemoOverfit(c) => {
            reject_config(&c)?;
            let seed = c.seed.unwrap_or(0);
            for (name, mut cfg) in [
                ("overfit_routed", presets::overfit_routed(seed)),
                ("overfit_baseline", presets::overfit_baseline(seed)),
            ] {
                cfg.out = Some(c.out.join(format!("{name}.csv")));
                let outcome = run_experiment(&cfg)?;
                summarize(name, &outcome);
            }
        }
    }
    Ok(())
}

fn reject_config(c: &Common) -> Result<(), Error> {
    match &c.config {
        Some(_) => Err(Error::Config("demo presets take no config file".into())),
        None => Ok(()),
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn summarize(name: &str, outcome: &ExperimentOutcome) {
    let train = outcome.last(Split::Train);
    let test = outcome.last(Split::Test);
    println!(
        "{name}: epoch {} train loss {:.4} metric {:.4} | test loss {:.4} metric {:.4} | entropy {:.3}{}",
        train.epoch,
        train.loss,
        train.metric,
        test.loss,
        test.metric,
        train.entropy,
        if train.collapse { " (collapsed)" } else { "" }
    );
}
