use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use compground::config::RunConfig;
use compground::datagen::ShuffleMode;
use compground::diagnostics::gradient_table_text;
use compground::model::Model;
use compground::pipeline;
use compground::splitter::Split;
use compground::train::Checkpoint;
use compground::{Error, Result};

#[derive(Parser)]
#[command(name = "compground", version, about = "Compositional temporal grounding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and corpus into the data directory.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-split a tagged query corpus into compositional splits.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        novel_composition: f64,
        #[arg(long, default_value_t = 0.05)]
        novel_word: f64,
    },
    /// Train on the training split.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score the evaluation splits and the constant baseline.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Word-order sensitivity under shuffled queries.
    Sensitivity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "novel-composition")]
        split: String,
        #[arg(long, value_enum, default_value_t = Mode::Word)]
        mode: Mode,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Print the inference correspondence of one query as a labeled matrix.
    DumpCorrespondence {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        query: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Word,
    Structure,
}

fn load_model(run: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    let path = checkpoint.map_or_else(|| pipeline::checkpoint_path(run), Path::to_path_buf);
    Ok(Checkpoint::load(&path)?.model)
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config } => {
            let run = RunConfig::load(&config)?;
            let data = pipeline::gen_data(&run)?;
            for (split, d) in &data.splits {
                println!("{:<18} videos={:<5} queries={}", split.as_str(), d.videos.len(), d.queries.len());
            }
        }
        Command::Split {
            corpus,
            out,
            seed,
            novel_composition,
            novel_word,
        } => {
            let (outcome, stats) = pipeline::split_corpus(&corpus, &out, seed, novel_composition, novel_word)?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", stats.to_text());
        }
        Command::Train { config, resume } => {
            let run = RunConfig::load(&config)?;
            let trainer = pipeline::train(&run, resume.as_deref())?;
            if let Some(last) = trainer.history.last() {
                println!("epoch {} total loss {:.6}", last.epoch, last.loss.total);
            }
            println!("checkpoint {}", pipeline::checkpoint_path(&run).display());
        }
        Command::Eval { config, checkpoint } => {
            let run = RunConfig::load(&config)?;
            let model = load_model(&run, checkpoint.as_deref())?;
            let report = pipeline::evaluate(&model, &run)?;
            print!("{}", report.to_text());
        }
        Command::Sensitivity {
            config,
            checkpoint,
            split,
            mode,
            seeds,
        } => {
            let run = RunConfig::load(&config)?;
            let split = Split::parse(&split).ok_or_else(|| Error::Config(format!("unknown split `{split}`")))?;
            let mode = match mode {
                Mode::Word => ShuffleMode::Word,
                Mode::Structure => ShuffleMode::Structure,
            };
            let model = load_model(&run, checkpoint.as_deref())?;
            let report = pipeline::sensitivity(&model, &run, split, mode, &seeds)?;
            write_json(&run.paths.out_dir, "sensitivity.json", &report)?;
            println!(
                "{} original={:.2} shuffled={:?} sensitivity={:.4}",
                report.split, report.original, report.shuffled, report.sensitivity
            );
        }
        Command::GradCheck { seeds } => {
            let seeds: Vec<u64> = (0..seeds).collect();
            let rows = pipeline::grad_check(&seeds)?;
            print!("{}", gradient_table_text(&rows));
            if let Some(bad) = rows.iter().find(|r| r.max_rel_err > 1e-3) {
                return Err(Error::Tensor(compground::tensor::TensorError::InvalidArgument {
                    op: "grad-check",
                    msg: format!("{} relative error {:.3e} above 1e-3", bad.name, bad.max_rel_err),
                }));
            }
        }
        Command::DumpCorrespondence {
            config,
            checkpoint,
            query,
        } => {
            let run = RunConfig::load(&config)?;
            let model = load_model(&run, checkpoint.as_deref())?;
            let m = pipeline::dump_correspondence(&model, &run, &query)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("RUST_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} msg={msg:?}", e.kind());
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
