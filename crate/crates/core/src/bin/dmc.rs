use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use dmc_core::harness::analyze::analyze;
use dmc_core::harness::bench::{bench_decode, generate};
use dmc_core::harness::checkpoint::Checkpoint;
use dmc_core::harness::config::ExperimentConfig;
use dmc_core::harness::corpus::{detokenize_lossy, ingest_corpus, read_prompt, tokenize, Corpus};
use dmc_core::harness::eval::{eval_perplexity, EvalMode};
use dmc_core::harness::metrics::MetricsLog;
use dmc_core::harness::train::{pretrain, retrofit};
use dmc_core::harness::{io_err, HarnessError};

#[derive(Parser)]
#[command(name = "dmc", version, about = "Train, retrofit and evaluate transformers with compressed KV caches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set dmc.schedule.target_cr=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the uncompressed model from scratch.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for the checkpoint, metrics and resolved config.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Retrofit a pre-trained checkpoint for cache compression, or train a
    /// baseline selected by `baseline.kind`.
    Retrofit {
        #[command(flatten)]
        config: ConfigArgs,
        /// Pre-trained checkpoint.
        #[arg(long)]
        base: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Greedy continuation of a prompt.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prompt text.
        #[arg(long, conflicts_with = "prompt_file")]
        prompt: Option<String>,
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        /// Tokens to generate.
        #[arg(long, default_value_t = 32)]
        tokens: usize,
    },
    /// Validation perplexity of a checkpoint.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "vanilla")]
        mode: ModeArg,
        /// Write the result as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compression report: ratio matrix, curves, segmentations and traces.
    Analyze {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Sequences whose segmentation is dumped.
        #[arg(long, default_value_t = 2)]
        segments: usize,
    },
    /// Decode benchmark comparing cache strategies.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Print a checkpoint's manifest.
    InspectCheckpoint { path: PathBuf },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Vanilla,
    DmcTrainPath,
    DmcInferPath,
    H2o,
    Tova,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Vanilla => EvalMode::Vanilla,
            ModeArg::DmcTrainPath => EvalMode::DmcTrainPath,
            ModeArg::DmcInferPath => EvalMode::DmcInferPath,
            ModeArg::H2o => EvalMode::H2o,
            ModeArg::Tova => EvalMode::Tova,
        }
    }
}

fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus, HarnessError> {
    cfg.check_paths()?;
    ingest_corpus(&cfg.data.paths, cfg.data.val_fraction)
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// Validation windows no longer than the checkpoint allows.
fn eval_sequences(cfg: &ExperimentConfig, corpus: &Corpus, ck: &Checkpoint) -> Result<Vec<Vec<usize>>, HarnessError> {
    let seq_len = cfg.data.seq_len.min(ck.model.config.max_seq);
    corpus.val_sequences(cfg.data.eval_sequences, seq_len)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Pretrain { config, out } => {
            let cfg = config.load()?;
            let corpus = load_corpus(&cfg)?;
            create_dir(&out)?;
            write(&out.join("config.toml"), &cfg.to_toml())?;
            let mut metrics = MetricsLog::to_file(&out.join("metrics.jsonl"))?;
            let result = pretrain(&cfg, &corpus, Some(&out), &mut metrics)?;
            println!(
                "validation loss {:.6} (perplexity {:.4}); wrote {}",
                result.val_loss,
                result.val_loss.exp(),
                out.join("pretrain.ckpt").display()
            );
        }
        Command::Retrofit { config, base, out } => {
            let cfg = config.load()?;
            let corpus = load_corpus(&cfg)?;
            let base = Checkpoint::load(&base)?;
            create_dir(&out)?;
            write(&out.join("config.toml"), &cfg.to_toml())?;
            let mut metrics = MetricsLog::to_file(&out.join("metrics.jsonl"))?;
            let result = retrofit(&base, &cfg, &corpus, Some(&out), &mut metrics)?;
            for c in &result.checkpoints {
                let t = &c.checkpoint.manifest.training;
                println!(
                    "{}: target cr {:.3}, achieved cr {:.3}, validation loss {:.6}",
                    c.path.as_deref().unwrap_or(Path::new(&c.label)).display(),
                    t.target_cr.unwrap_or(1.0),
                    t.achieved_cr.unwrap_or(1.0),
                    t.val_loss.unwrap_or(f64::NAN)
                );
            }
            if result.spike_warnings > 0 {
                println!("perplexity guard exceeded on {} steps", result.spike_warnings);
            }
        }
        Command::Generate {
            checkpoint,
            prompt,
            prompt_file,
            tokens,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let prompt = match (prompt, prompt_file) {
                (Some(p), _) => tokenize(&p),
                (None, Some(path)) => read_prompt(&path)?,
                (None, None) => return Err(HarnessError::Config("give --prompt or --prompt-file".into())),
            };
            let out = generate(&ck, &prompt, tokens)?;
            println!("{}{}", detokenize_lossy(&prompt), detokenize_lossy(&out));
        }
        Command::Eval {
            config,
            checkpoint,
            mode,
            out,
        } => {
            let cfg = config.load()?;
            let corpus = load_corpus(&cfg)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let seqs = eval_sequences(&cfg, &corpus, &ck)?;
            let result = eval_perplexity(&ck, &seqs, mode.into(), cfg.baseline.eviction_cr)?;
            let json = serde_json::to_string_pretty(&result).expect("result serializes");
            if let Some(path) = out {
                write(&path, &(json.clone() + "\n"))?;
            }
            println!("{json}");
        }
        Command::Analyze {
            config,
            checkpoint,
            out,
            segments,
        } => {
            let cfg = config.load()?;
            let corpus = load_corpus(&cfg)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let seqs: Vec<Vec<usize>> = eval_sequences(&cfg, &corpus, &ck)?
                .into_iter()
                .map(|mut s| {
                    s.pop();
                    s
                })
                .collect();
            let report = analyze(&ck, &seqs, segments)?;
            for p in report.write(&out)? {
                info!("wrote {}", p.display());
            }
            println!(
                "global cr {:.6} (matrix {:.6}, trace {:.6}); report in {}",
                report.compression.global,
                report.matrix_cr,
                report.trace_cr,
                out.display()
            );
        }
        Command::Bench {
            config,
            checkpoint,
            out,
        } => {
            let cfg = config.load()?;
            let corpus = load_corpus(&cfg)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let b = cfg.bench;
            let prompts: Vec<Vec<usize>> = corpus
                .val_sequences(b.batch, b.prompt_len)?
                .into_iter()
                .map(|mut s| {
                    s.truncate(b.prompt_len);
                    s
                })
                .collect();
            if prompts.len() < b.batch {
                return Err(HarnessError::Data(format!(
                    "validation split holds only {} prompts of {} tokens",
                    prompts.len(),
                    b.prompt_len
                )));
            }
            let (report, timing) = bench_decode(&ck, &b, &prompts, cfg.baseline.eviction_cr)?;
            report.write(&out)?;
            let mut csv = String::from("system,tokens_per_second\n");
            for t in &timing {
                csv.push_str(&format!("{},{:.3}\n", t.system, t.tokens_per_second));
            }
            write(&out.join("timing.csv"), &csv)?;
            print!("{}", report.to_text());
            for t in &timing {
                println!("{}: {:.1} tokens/s", t.system, t.tokens_per_second);
            }
        }
        Command::InspectCheckpoint { path } => {
            let ck = Checkpoint::load(&path)?;
            print!("{}", ck.describe());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
