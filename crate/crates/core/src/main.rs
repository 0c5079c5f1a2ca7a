use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fairprune::config::ExperimentConfig;
use fairprune::experiment::{
    cmd_evaluate, cmd_pretrain, cmd_report, cmd_sparsify, cmd_suggest_tolerance,
    format_report_table, write_report_csv,
};
use fairprune::metrics::DisparityReport;

#[derive(Parser)]
#[command(name = "fairprune", version, about = "Train, prune and fine-tune grouped classifiers with excess-accuracy-gap constraints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense model by ERM and write a checkpoint per seed.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of every configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prune and fine-tune from a dense checkpoint with the configured
    /// mitigation scheme.
    Sparsify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dense checkpoint path (defaults to <run dir>/dense.ckpt).
        #[arg(long)]
        dense: Option<PathBuf>,
    },
    /// Exact disparity report of a sparse checkpoint against a dense one.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dense: PathBuf,
        /// Seed selecting the dataset (first configured seed by default).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate completed runs into an avg ± std table.
    Report {
        /// Completed run directories.
        dirs: Vec<PathBuf>,
        /// Also write the aggregated table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Suggest a tolerance from a completed NFT run.
    SuggestTolerance {
        /// Run directory of a completed NFT sparsify run.
        dir: PathBuf,
    },
}

fn print_report(name: &str, r: &DisparityReport) {
    println!("{} split:", name);
    println!("  delta (global accuracy gap): {:+.6}", r.global_gap);
    for (g, (gap, psi)) in r.group_gaps.iter().zip(&r.excess_gaps).enumerate() {
        println!("  group {}: gap {:+.6}  psi {:+.6}", g, gap, psi);
    }
    println!("  max_psi: {:+.6}", r.max_excess_gap);
    println!("  psi_pw:  {:.6}", r.pairwise_disparity);
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| cfg.seeds.clone());
            for s in seeds {
                let dir = cmd_pretrain(&cfg, s, &out)?;
                println!("pretrain seed {} -> {}", s, dir.display());
            }
        }
        Command::Sparsify {
            config,
            seed,
            out,
            dense,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| cfg.seeds.clone());
            for s in seeds {
                let dir = cmd_sparsify(&cfg, s, &out, dense.as_deref())?;
                println!("sparsify seed {} -> {}", s, dir.display());
            }
        }
        Command::Evaluate {
            config,
            checkpoint,
            dense,
            seed,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let (train, test) = cmd_evaluate(&cfg, seed, &checkpoint, &dense)?;
            print_report("train", &train);
            if let Some(test) = test {
                print_report("test", &test);
            }
        }
        Command::Report { dirs, out } => {
            let rows = cmd_report(&dirs)?;
            println!("{}", format_report_table(&rows));
            if let Some(out) = out {
                write_report_csv(&out, &rows)?;
                println!("wrote {}", out.display());
            }
        }
        Command::SuggestTolerance { dir } => {
            let suggestion = cmd_suggest_tolerance(&dir)?;
            println!(
                "final train max_psi: {:.6}",
                suggestion.final_train_max_psi
            );
            println!("suggested epsilon:   {:.6}", suggestion.suggested_epsilon);
            if let Some(warning) = suggestion.warning {
                println!("warning: {}", warning);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err);
            ExitCode::FAILURE
        }
    }
}
