use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use baved_ser::backbones::BackboneName;
use baved_ser::dataset::synthetic::{write_corpus, SynthSpec};
use baved_ser::experiment::{
    self, comparison_markdown, format_report, EvalSubset, ExperimentError, RunConfig, RunOptions, CONFUSION_CSV,
};

#[derive(Parser)]
#[command(name = "baved-ser", version, about = "Emotion-level recognition on BAVED with frozen speech backbones")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for both the split and training (overrides split.seed and train.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the deterministic stub backbone instead of real checkpoints.
    #[arg(long, global = true)]
    stub_backbone: bool,
    /// Feature cache root (overrides cache.root).
    #[arg(long, global = true)]
    cache_root: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    Train,
    Val,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Index the corpus and print a summary; writes manifest.csv when --out is given.
    Scan,
    /// Compute the train/validation split and write split.csv.
    Split,
    /// Fill the feature cache.
    Extract {
        /// Backbone to extract (default: backbone.name).
        #[arg(long)]
        backbone: Option<BackboneName>,
        /// Extract every backbone listed in compare.backbones.
        #[arg(long, conflicts_with = "backbone")]
        all: bool,
    },
    /// Run the full pipeline for the configured backbone and head.
    Train,
    /// Score a saved head artifact.
    Evaluate {
        #[arg(long)]
        head: PathBuf,
        /// Existing split.csv (default: recompute from the config).
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        subset: Subset,
    },
    /// Train every configured backbone and head on one shared split.
    Compare,
    /// Regenerate plots and summaries from an artifact directory.
    Report {
        /// Artifact directory (default: --out or output.dir).
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Write a small synthetic corpus with the expected layout.
    Synth {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 4)]
        speakers: u32,
        #[arg(long, default_value_t = 3)]
        words: u8,
        #[arg(long, default_value_t = 1)]
        takes: u32,
        #[arg(long, default_value_t = 0.5)]
        duration: f64,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, ExperimentError> {
    let path = cli.config.as_ref().ok_or_else(|| ExperimentError::Config("--config is required".into()))?;
    let mut config = RunConfig::load(path)?;
    if let Some(out) = &cli.out {
        config.output.dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
        config.split.seed = seed;
    }
    if let Some(root) = &cli.cache_root {
        config.cache.root = Some(root.clone());
    }
    config.validate()?;
    Ok(config)
}

fn options(cli: &Cli) -> RunOptions {
    if cli.stub_backbone {
        RunOptions::stub()
    } else {
        RunOptions::checkpoints()
    }
}

fn execute(cli: &Cli) -> Result<(), ExperimentError> {
    match &cli.command {
        Command::Synth { root, speakers, words, takes, duration } => {
            let spec = SynthSpec {
                speakers: *speakers,
                words: *words,
                takes: *takes,
                duration_s: *duration,
                ..Default::default()
            };
            let n = write_corpus(root, &spec)?;
            println!("wrote {n} recordings to {}", root.display());
        }
        Command::Scan => {
            let config = load_config(cli)?;
            let dataset = experiment::load_dataset(&config)?;
            print!("{}", dataset.summary());
            if let Some(out) = &cli.out {
                let (_, fp) = experiment::write_corpus_manifest(&dataset, out)?;
                println!("total duration: {:.2} min", fp.total_duration_s / 60.0);
                println!("manifest: {}", out.join(experiment::MANIFEST_CSV).display());
            }
        }
        Command::Split => {
            let config = load_config(cli)?;
            let dataset = experiment::load_dataset(&config)?;
            let split = experiment::make_split(&config, &dataset)?;
            experiment::write_split(&split, &config.output.dir)?;
            println!("train {}  val {}", split.train_ids.len(), split.val_ids.len());
            println!("split: {}", config.output.dir.join(experiment::SPLIT_CSV).display());
        }
        Command::Extract { backbone, all } => {
            let config = load_config(cli)?;
            if !config.cache.enabled {
                log::warn!("cache.enabled is false; features will be computed and discarded");
            }
            let dataset = experiment::load_dataset(&config)?;
            let names =
                if *all { config.compare.backbones.clone() } else { vec![backbone.unwrap_or(config.backbone.name)] };
            let opts = options(cli);
            for name in names {
                let (table, stats) = experiment::extract_features(&config, &opts, &dataset, name)?;
                println!("{name}: {} records, {} cache hits, {} extracted", table.len(), stats.hits, stats.misses);
            }
        }
        Command::Train => {
            let config = load_config(cli)?;
            let outcome = experiment::run(&config, &options(cli))?;
            let label = format!("{}/{}", config.backbone.name, config.head.kind.as_str());
            print!("{}", format_report(&label, &outcome.run.history, &outcome.run.evaluation.report));
            println!("artifacts: {}", outcome.out_dir.display());
        }
        Command::Evaluate { head, split, subset } => {
            let config = load_config(cli)?;
            let subset = match subset {
                Subset::Train => EvalSubset::Train,
                Subset::Val => EvalSubset::Val,
                Subset::All => EvalSubset::All,
            };
            let eval = experiment::evaluate_artifact(&config, &options(cli), head, split.as_deref(), subset)?;
            let out = &config.output.dir;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("evaluation.json"), eval.report.to_json() + "\n")?;
            let mut buf = Vec::new();
            eval.report.confusion.write_csv(&mut buf)?;
            std::fs::write(out.join(CONFUSION_CSV), buf)?;
            println!("records {}  loss {:.4}", eval.report.total, eval.mean_loss);
            println!("accuracy {:.4}  macro-F1 {:.4}", eval.report.accuracy, eval.report.macro_f1);
        }
        Command::Compare => {
            let config = load_config(cli)?;
            let outcome = experiment::compare(&config, &options(cli))?;
            print!("{}", comparison_markdown(&outcome.rows));
            println!("artifacts: {}", outcome.out_dir.display());
        }
        Command::Report { run } => {
            let dir = match (run, &cli.out) {
                (Some(d), _) | (None, Some(d)) => d.clone(),
                (None, None) => load_config(cli)?.output.dir,
            };
            print!("{}", experiment::report(Path::new(&dir))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
