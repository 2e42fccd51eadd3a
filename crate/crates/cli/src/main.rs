use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lqsgd::comm::{bytes_per_epoch, Ledger};
use lqsgd::experiment::{self, AttackSpec, ExperimentSpec, Overrides};
use lqsgd::Error;

/// Gradient compression experiments: train, attack, compare, inspect ledgers.
///
/// MNIST tasks read IDX files from the directory in LQSGD_DATA_DIR unless the
/// config names one.
#[derive(Parser)]
#[command(name = "lqsgd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (compressor, seed) cell, then attack it if the config has an [attack] table.
    Train(GridArgs),
    /// Run only the gradient inversion grid.
    Attack(GridArgs),
    /// Tabulate accuracy, MB/epoch and compute s/epoch across reports.
    Compare {
        /// report.json files or cell directories.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Emit CSV instead of a markdown table.
        #[arg(long)]
        csv: bool,
    },
    /// Summarise a ledger CSV per compressor and epoch.
    Ledger {
        path: PathBuf,
        /// Defaults to the value in the report.json beside the ledger.
        #[arg(long)]
        steps_per_epoch: Option<u64>,
    },
}

#[derive(Args)]
struct GridArgs {
    /// Experiment spec (TOML). Without it, a one-cell quadratic identity run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// identity, topk, powersgd or lqsgd; replaces the compressor list.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Top-K keep fraction in (0, 1].
    #[arg(long)]
    topk: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

impl GridArgs {
    fn spec(&self) -> lqsgd::Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(p) => ExperimentSpec::load(p)?,
            None => ExperimentSpec::smoke("out"),
        };
        spec.apply(&Overrides {
            seed: self.seed,
            workers: self.workers,
            method: self.method.clone(),
            rank: self.rank,
            bits: self.bits,
            alpha: self.alpha,
            topk: self.topk,
            epochs: self.epochs,
            out: self.out.clone(),
            jobs: self.jobs,
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

enum Failure {
    Lib(Error),
    AllDiverged,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Format(_) | Error::Serde(_) => 4,
        _ => 1,
    }
}

fn train(args: &GridArgs) -> Result<(), Failure> {
    let spec = args.spec()?;
    let outcome = experiment::run_experiment(&spec)?;
    for r in &outcome.rows {
        let acc = r.final_accuracy.map_or("-".into(), |a| format!("{a:.4}"));
        let dist = r.final_distance.map_or("-".into(), |d| format!("{d:.3e}"));
        let mark = if r.diverged { "  DIVERGED" } else { "" };
        println!(
            "{:<24} seed {:<6} acc {acc:<8} dist {dist:<10} payload {} bits{mark}",
            r.compressor, r.seed, r.payload_bits
        );
    }
    print_attacks(&outcome.attacks);
    println!("wrote {}", spec.out.display());
    if outcome.all_diverged() {
        return Err(Failure::AllDiverged);
    }
    Ok(())
}

fn print_attacks(rows: &[lqsgd::attack::AttackRow]) {
    for r in rows {
        println!("attack {:<24} seed {:<6} ssim {:.4} objective {:.4e}", r.compressor, r.seed, r.ssim, r.objective);
    }
}

fn attack(args: &GridArgs) -> Result<(), Failure> {
    let mut spec = args.spec()?;
    let a = spec.attack.get_or_insert_with(AttackSpec::default).clone();
    let rows = experiment::run_attack_grid(&spec, &a)?;
    print_attacks(&rows);
    println!("wrote {}", spec.out.display());
    Ok(())
}

fn compare(reports: &[PathBuf], csv: bool) -> Result<(), Failure> {
    let rows = experiment::compare_report(reports)?;
    if csv {
        experiment::compare_csv(&rows, std::io::stdout())?;
    } else {
        print!("{}", experiment::compare_markdown(&rows));
    }
    Ok(())
}

fn ledger(path: &Path, steps: Option<u64>) -> Result<(), Failure> {
    let ledger = Ledger::load_csv(path)?;
    let steps = match steps {
        Some(s) => s,
        None => experiment::load_report(&path.with_file_name("report.json"))?.steps_per_epoch as u64,
    };
    let report = bytes_per_epoch(&ledger, steps)?;
    println!("| compressor | epoch | payload bits | metadata bits | payload ratio vs identity |");
    println!("|---|---|---|---|---|");
    for r in &report.rows {
        let ratio = r.payload_ratio_vs_identity.map_or("-".into(), |x| format!("{x:.2}"));
        println!("| {} | {} | {} | {} | {ratio} |", r.compressor, r.epoch, r.payload_bits, r.metadata_bits);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Attack(a) => attack(a),
        Command::Compare { reports, csv } => compare(reports, *csv),
        Command::Ledger { path, steps_per_epoch } => ledger(path, *steps_per_epoch),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::AllDiverged) => {
            eprintln!("error: every cell diverged");
            ExitCode::from(3)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
