use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use slimda::cli::{self, ExperimentConfig, Overrides, TrainFlags};
use slimda::Result;

#[derive(Parser, Debug)]
#[command(name = "slimda", version, about = "Train width-switchable domain-adapted model banks and search them under FLOPs budgets")]
struct Args {
    /// Experiment config (JSON); omitted sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the source/target dataset.
    GenData,
    /// Train a model bank and write checkpoint.json and metrics.csv.
    Train {
        /// slimda, baseline or inplaced.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Fill the per-epoch probe accuracy columns from held-out target labels.
        #[arg(long)]
        reveal_labels: bool,
        /// Record wall time per epoch (makes metrics.csv non-reproducible).
        #[arg(long)]
        record_time: bool,
    },
    /// Search widths per FLOPs budget and write search_<strategy>.csv.
    Search {
        /// greedy or random.
        #[arg(long, default_value = "greedy")]
        strategy: String,
        /// Comma-separated budget ratios of full FLOPs.
        #[arg(long)]
        budgets: Option<String>,
        /// Add a held-out accuracy column to the report.
        #[arg(long)]
        reveal_labels: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// UPEM against true accuracy, per budget band.
    Correlate {
        /// Configs per band; defaults to the config value.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        budgets: Option<String>,
        /// Required: correlation needs held-out target labels.
        #[arg(long)]
        reveal_labels: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-width target accuracy after batchnorm recalibration.
    Eval {
        /// Comma-separated width labels such as 32-64-128-256.
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<String>>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(args: Args) -> Result<()> {
    let base = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut overrides = Overrides { seed: args.seed, out: args.out.clone(), ..Overrides::default() };
    match &args.command {
        Command::Train { mode, epochs, .. } => {
            overrides.mode = mode.clone();
            overrides.epochs = *epochs;
        }
        Command::Search { budgets: Some(b), .. } | Command::Correlate { budgets: Some(b), .. } => {
            overrides.budgets = Some(cli::parse_budgets(b)?);
        }
        _ => {}
    }
    let cfg = overrides.apply(base)?;
    match args.command {
        Command::GenData => println!("{}", cli::gen_data(&cfg)?.render()),
        Command::Train { reveal_labels, record_time, .. } => {
            let out = cli::train(&cfg, TrainFlags { reveal_labels, record_time })?;
            println!("wrote {} and {} ({} epochs)", out.checkpoint.display(), out.metrics.display(), out.rows.len());
        }
        Command::Search { strategy, reveal_labels, checkpoint, .. } => {
            let (path, rows) = cli::search(&cfg, &strategy, checkpoint.as_deref(), reveal_labels)?;
            println!("wrote {} ({} rows)", path.display(), rows.len());
        }
        Command::Correlate { samples, reveal_labels, checkpoint, .. } => {
            if !reveal_labels {
                return Err(slimda::Error::usage("correlate compares against held-out labels; pass --reveal-labels"));
            }
            let n = samples.unwrap_or(cfg.evaluation.correlate_samples);
            let out = cli::correlate(&cfg, checkpoint.as_deref(), n)?;
            println!(
                "wrote {} and {}; pooled pearson {:.4}, spearman {:.4} over {} configs",
                out.summary.display(),
                out.pairs.display(),
                out.overall.pearson,
                out.overall.spearman,
                out.overall.samples
            );
        }
        Command::Eval { widths, checkpoint } => {
            let (path, rows) = cli::eval(&cfg, checkpoint.as_deref(), widths.as_deref())?;
            for r in &rows {
                println!("{:>24}  flops {:.4}  acc {:.4}  drop {:+.4}", r.config.label(), r.flops_ratio, r.accuracy, r.drop);
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("slimda: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
