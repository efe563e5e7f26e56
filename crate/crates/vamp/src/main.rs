use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vamp::commands::{self, DumpSplit, SplitChoice, DEFAULT_SAMPLES};
use vamp::config::RunConfig;
use vamp::error::{EXIT_OK, EXIT_USAGE};
use vamp::{Result, VampError};

/// Variational multi-modal prompt learning on a miniature frozen dual encoder.
#[derive(Debug, Parser)]
#[command(name = "vamp", version)]
struct Cli {
    /// Worker threads for evaluation and ablation grids.
    #[arg(long, global = true, env = "VAMP_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic few-shot task and write it as a dataset file.
    Datagen {
        /// Data spec (TOML); defaults to the built-in spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train prompts on the base classes and write a checkpoint plus metrics CSV.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics CSV; defaults to `<out>.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Score a checkpoint and print a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Monte Carlo draws per prediction.
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, value_enum, default_value_t = SplitChoice::Both)]
        split: SplitChoice,
        /// Noise seed; defaults to the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients for every parameter group.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Perturb the analytic gradient of one group (harness self-test).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Train every mode over several seeds and tabulate base/novel accuracy.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seeds 0..n; defaults to `ablation.seeds` of the config.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write aggregated posterior statistics per image and prompted layer.
    DumpPosterior {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated prompted layer indices; defaults to all.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value_t = DumpSplit::Base)]
        split: DumpSplit,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_out(path: &std::path::Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| VampError::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    if threads == 0 {
        return Err(VampError::usage("--threads must be at least 1"));
    }
    match cli.command {
        Command::Datagen { spec, out } => {
            let spec = commands::load_spec(spec.as_deref())?;
            let c = commands::datagen(&spec, &out)?;
            println!("base_train {}", c.base_train);
            println!("base_test {}", c.base_test);
            println!("novel_test {}", c.novel_test);
        }
        Command::Train { config, data, out, metrics } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let s = commands::train(&cfg, &data, &out, metrics.as_deref())?;
            if let Some(last) = s.outcome.history.last() {
                println!(
                    "epoch {} nll {:.6} kl {:.6} total {:.6} base_train_acc {:.4}",
                    last.epoch, last.nll, last.kl, last.total, last.base_train_acc
                );
            }
            println!("steps {}", s.outcome.steps);
            println!("checkpoint {}", s.checkpoint.display());
            println!("metrics {}", s.metrics.display());
        }
        Command::Eval { ckpt, data, samples, split, seed, out } => {
            eprintln!("samples {samples}");
            let doc = commands::eval(&ckpt, &data, samples, split, seed, threads)?;
            let text = serde_json::to_string_pretty(&doc).expect("documents serialize") + "\n";
            match out {
                Some(p) => write_out(&p, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Gradcheck { config, corrupt } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let corrupt = corrupt.as_deref().map(commands::parse_group).transpose()?;
            let reports = commands::gradcheck(&cfg, corrupt)?;
            println!("{:<24} {:<16} {:>7} {:>12}  result", "mode", "group", "checked", "max_rel_err");
            for r in &reports {
                println!(
                    "{:<24} {:<16} {:>7} {:>12.3e}  {}",
                    r.mode.name(),
                    r.group,
                    r.checked,
                    r.max_rel_err,
                    if r.passed { "pass" } else { "FAIL" }
                );
            }
            if let Some(e) = commands::gradcheck_failure(&reports) {
                return Err(e);
            }
        }
        Command::Ablate { config, seeds, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let rows = commands::ablate(&cfg, seeds.unwrap_or(cfg.ablation.seeds), &out, threads)?;
            for r in &rows {
                println!(
                    "{:<24} seed {:>3}  base {:.4}  novel {:.4}  H {:.4}",
                    r.mode.name(),
                    r.seed,
                    r.base_acc,
                    r.novel_acc,
                    r.harmonic
                );
            }
            for c in commands::mode_ladder(&rows) {
                println!(
                    "{} vs {}: novel wins {}/{}  mean delta {:+.4}",
                    c.candidate, c.baseline, c.wins, c.pairs, c.mean_delta
                );
            }
        }
        Command::DumpPosterior { ckpt, data, layers, split, out } => {
            let rows = commands::dump_posterior(&ckpt, &data, layers.as_deref(), split, &out)?;
            println!("rows {rows}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
