//! `stepsrl` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use stepsrl::config::RunConfig;
use stepsrl::pipeline::{self, Split};
use stepsrl::synth::{synth_corpus, SynthConfig};
use stepsrl::Error;

#[derive(Parser, Debug)]
#[command(
    name = "stepsrl",
    version,
    about = "Speech-text entangled spoken-word representations"
)]
struct Cli {
    /// Data-parallel gradient workers; overrides `train.workers`.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with the 20-word lexicon.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        utterances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to max(2, utterances / 5).
        #[arg(long)]
        speakers: Option<usize>,
        /// Size of the generated text vectors; must match `d_w`.
        #[arg(long, default_value_t = 50)]
        embedding_dim: usize,
        /// Give female speakers the same labels as male speakers.
        #[arg(long)]
        no_gender_variants: bool,
    },
    /// Validate a corpus and report its statistics.
    Prepare(ConfigArgs),
    /// Train a model and write checkpoint, history and resolved config.
    Train(ConfigArgs),
    /// Phonetic accuracy and word-similarity evaluation.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Directory of similarity benchmark `.tsv` files.
        #[arg(long)]
        benchmarks: Option<PathBuf>,
        /// Report directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Config to check the checkpoint against; its corpus paths are used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export averaged word vectors in the `.vec` text format.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "all")]
        split: Split,
    },
    /// PCA of word-pair difference vectors.
    Analyze {
        /// Pair list, two words per line.
        #[arg(long)]
        pairs: PathBuf,
        /// Word vectors from `embed`.
        #[arg(
            long,
            conflicts_with = "checkpoint",
            required_unless_present = "checkpoint"
        )]
        vectors: Option<PathBuf>,
        /// Compute representations directly from a checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "all")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// Also write `pca_plot.svg`.
        #[arg(long)]
        svg: bool,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long, required_unless_present = "print_config")]
    config: Option<PathBuf>,
    /// Print the configuration with every default filled in, then exit.
    #[arg(long)]
    print_config: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STEPSRL_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for bad configuration or input, 3 for undefined analyses, 1 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Analysis(_)) => 3,
        Some(
            Error::Config(_)
            | Error::Parse { .. }
            | Error::MissingFile(_)
            | Error::Corpus(_)
            | Error::Audio { .. }
            | Error::Checkpoint(_)
            | Error::Json(_),
        ) => 2,
        _ => 1,
    }
}

fn load_config(args: &ConfigArgs, workers: Option<usize>) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(w) = workers {
        cfg.train.workers = w;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!(
        "{}",
        serde_json::to_string_pretty(value).context("serializing report")?
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthCorpus {
            out,
            utterances,
            seed,
            speakers,
            embedding_dim,
            no_gender_variants,
        } => {
            let cfg = SynthConfig {
                utterances,
                seed,
                speakers,
                embedding_dim,
                gender_variants: !no_gender_variants,
                ..SynthConfig::default()
            };
            let s = synth_corpus(&out, &cfg)?;
            println!(
                "wrote {} utterances from {} speakers ({} train / {} test), {} word tokens to {}",
                s.utterances,
                s.speakers,
                s.train_speakers,
                s.test_speakers,
                s.word_tokens,
                out.display()
            );
        }
        Command::Prepare(args) => {
            let cfg = load_config(&args, cli.workers)?;
            if args.print_config {
                println!("{}", cfg.resolved().to_json());
                return Ok(());
            }
            print_json(&pipeline::run_prepare(&cfg)?)?;
        }
        Command::Train(args) => {
            let cfg = load_config(&args, cli.workers)?;
            if args.print_config {
                println!("{}", cfg.resolved().to_json());
                return Ok(());
            }
            let report = pipeline::run_train(&cfg)?;
            let o = &report.outcome;
            let best = o.history.iter().find(|r| r.epoch == o.best_epoch);
            match best.and_then(|r| r.dev.as_ref()) {
                Some(dev) => println!(
                    "best epoch {} of {}: dev token accuracy {:.4}, sequence accuracy {:.4}",
                    o.best_epoch,
                    o.history.len(),
                    dev.token_acc,
                    dev.seq_acc
                ),
                None => println!("trained {} epochs", o.history.len()),
            }
            for p in [&report.checkpoint, &report.history, &report.resolved_config] {
                println!("wrote {}", p.display());
            }
        }
        Command::Eval {
            checkpoint,
            split,
            benchmarks,
            out,
            config,
        } => {
            let config = config.as_deref().map(RunConfig::load).transpose()?;
            let out = out.unwrap_or_else(|| parent_dir(&checkpoint));
            let report = pipeline::run_eval(
                &checkpoint,
                split,
                benchmarks.as_deref(),
                &out,
                config.as_ref(),
            )?;
            print_json(&report.accuracy)?;
            for (name, r) in &report.similarity {
                println!(
                    "{name}: rho {:.4} over {} pairs ({} skipped)",
                    r.rho, r.used_pairs, r.skipped_pairs
                );
            }
        }
        Command::Embed {
            checkpoint,
            out,
            split,
        } => {
            let reps = pipeline::run_embed(&checkpoint, split, &out)?;
            println!("wrote {} word vectors to {}", reps.len(), out.display());
        }
        Command::Analyze {
            pairs,
            vectors,
            checkpoint,
            split,
            out,
            svg,
        } => {
            let reps = match (vectors, checkpoint) {
                (Some(v), _) => pipeline::representations_from_vec(&v)?,
                (None, Some(c)) => pipeline::representations(&c, split)?,
                (None, None) => unreachable!("clap requires one source"),
            };
            let pairs = pipeline::load_pairs(&pairs)?;
            let result = pipeline::run_analyze(&reps, &pairs, &out, svg)?;
            println!(
                "{} pairs projected ({} skipped); explained variance {:.4}, {:.4} of {:.4}",
                result.points.len(),
                result.skipped.len(),
                result.explained_variance[0],
                result.explained_variance[1],
                result.total_variance
            );
        }
    }
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}
