use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use meda_cli::{
    cmd_balance, cmd_compare, cmd_evaluate, cmd_export_features, cmd_generate, cmd_prepare, cmd_train, CliResult,
    Method, RunConfig, Split, TrainingSet,
};

#[derive(Parser)]
#[command(name = "meda-lude", version, about = "Minority oversampling through an evolved latent Gaussian mixture")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured run directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Build the imbalanced train/validation split.
    Prepare {
        /// Print the full default configuration and exit.
        #[arg(long)]
        emit_default_config: bool,
    },
    /// Run the training program and save models, mixtures and traces.
    Train,
    /// Decode samples of one class from the optimized mixture.
    Generate {
        #[arg(long)]
        class: usize,
        #[arg(long)]
        count: usize,
    },
    /// Balance the training set with one method.
    Balance {
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Fit a final classifier on a training set and report its metrics.
    Evaluate {
        /// `imbalanced` or a balancing method.
        #[arg(long, default_value = "imbalanced")]
        set: String,
    },
    /// Balance and evaluate with several methods plus the unbalanced control.
    Compare {
        #[arg(long, value_enum, value_delimiter = ',', default_value = "meda_lude,ros,smote,adasyn")]
        methods: Vec<Method>,
    },
    /// Write last-hidden-layer features of a final classifier.
    ExportFeatures {
        /// Training set of the classifier: `imbalanced` or a method.
        #[arg(long, default_value = "imbalanced")]
        classifier: String,
        #[arg(long, value_enum, default_value = "val")]
        set: SplitArg,
    },
}

fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(dir) = &cli.run_dir {
        cfg.run_dir = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Command::Prepare {
        emit_default_config: true,
    } = cli.command
    {
        print!("{}", RunConfig::default_document());
        return Ok(());
    }
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Prepare { .. } => {
            let m = cmd_prepare(&cfg)?;
            println!("train counts {:?}", m.train_counts);
            println!("val counts {:?}", m.val_counts);
        }
        Command::Train => {
            let out = cmd_train(&cfg)?;
            println!("phases {:?}, {} loss steps", out.phases, out.loss_trace.len());
        }
        Command::Generate { class, count } => {
            let set = cmd_generate(&cfg, class, count)?;
            println!("generated {} images of class {class}", set.len());
        }
        Command::Balance { method } => {
            let set = cmd_balance(&cfg, method)?;
            println!("{} counts {:?}", method.name(), set.counts_per_class());
        }
        Command::Evaluate { set } => {
            let set = TrainingSet::parse(&set)?;
            for row in cmd_evaluate(&cfg, set)? {
                println!("{}", row.csv());
            }
        }
        Command::Compare { methods } => print!("{}", cmd_compare(&cfg, &methods)?),
        Command::ExportFeatures { classifier, set } => {
            let split = match set {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let path = cmd_export_features(&cfg, TrainingSet::parse(&classifier)?, split)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
