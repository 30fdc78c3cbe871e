use std::fs::File;
use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rolecraft::chat::ChatParams;
use rolecraft::pipeline::{self, ChatOptions, PipelineConfig, RunPaths};

#[derive(Args)]
struct Common {
    /// TOML configuration; the desk defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Global seed. Stage seeds that follow the global seed move with it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `stage=on` or `stage=off`; repeatable.
    #[arg(long = "stage-toggle", global = true, value_name = "STAGE=on|off")]
    stage_toggle: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Persona cards, rewriter, corpora and the merged dialogue set.
    Datagen,
    /// Instruction pre-training on the narrative corpus.
    Ipt,
    /// Response-masked fine-tuning of the IPT checkpoint.
    Sft {
        /// Start from this checkpoint instead of the IPT one.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Iterative self-play fine-tuning.
    Selfplay {
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Preference training against resampled negatives.
    Dpo,
    /// Proxy metrics for a checkpoint.
    Eval {
        /// Defaults to the last checkpoint of the enabled stages.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Talk to a checkpoint. Reads stdin unless --input is given.
    Chat(ChatArgs),
    /// All enabled stages in order, then the manifest.
    Pipeline,
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Args)]
struct ChatArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Persona card id from the card file.
    #[arg(long)]
    persona: Option<String>,
    /// Card file; defaults to the run's data/cards.jsonl when it exists.
    #[arg(long)]
    cards: Option<PathBuf>,
    #[arg(long)]
    chat_seed: Option<u64>,
    #[arg(long, default_value_t = ChatParams::default().temperature)]
    temperature: f64,
    #[arg(long, default_value_t = ChatParams::default().top_k)]
    top_k: usize,
    #[arg(long, default_value_t = ChatParams::default().max_new)]
    max_new: usize,
    /// Scripted input, one line per user turn.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Where to save the transcript; defaults to <run_dir>/chat/transcript.jsonl.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Parser)]
#[command(name = "rolecraft", version, about = "Persona-agent training on a micro language model")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

const USAGE: u8 = 1;
const STAGE: u8 = 2;

fn fail(code: u8, e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(code)
}

fn resolve(common: &Common) -> rolecraft::Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::desk("runs/desk"),
    };
    if let Some(d) = &common.run_dir {
        cfg.run_dir = d.clone();
    }
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    for t in &common.stage_toggle {
        cfg.stages.apply(t)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn chat(cfg: &PipelineConfig, a: &ChatArgs) -> rolecraft::Result<()> {
    let paths = RunPaths::new(&cfg.run_dir);
    let checkpoint = a.checkpoint.clone().unwrap_or_else(|| pipeline::final_checkpoint(cfg));
    let default_cards = paths.data("cards.jsonl");
    let cards = a.cards.clone().or_else(|| default_cards.exists().then_some(default_cards));
    let transcript = a.transcript.clone().unwrap_or_else(|| paths.stage("chat").join("transcript.jsonl"));
    if let Some(dir) = transcript.parent() {
        std::fs::create_dir_all(dir).map_err(|e| rolecraft::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let opts = ChatOptions {
        checkpoint: &checkpoint,
        cards: cards.as_deref(),
        persona: a.persona.as_deref(),
        seed: a.chat_seed.unwrap_or(cfg.seed),
        params: ChatParams {
            temperature: a.temperature,
            top_k: a.top_k,
            max_new: a.max_new,
        },
        transcript: Some(&transcript),
    };
    let out = io::stdout().lock();
    match &a.input {
        Some(p) => {
            let f = File::open(p).map_err(|e| rolecraft::Error::Io {
                path: p.clone(),
                source: e,
            })?;
            pipeline::cmd_chat(&opts, BufReader::new(f), out)?;
        }
        None => {
            pipeline::cmd_chat(&opts, io::stdin().lock(), out)?;
        }
    }
    eprintln!("transcript: {}", transcript.display());
    Ok(())
}

fn run(cfg: &PipelineConfig, command: &Command) -> rolecraft::Result<()> {
    match command {
        Command::Datagen => {
            for h in pipeline::cmd_datagen(cfg)? {
                println!("{:?}\t{}\t{}\t{}", h.kind, h.count, &h.content_digest[..12], h.path.display());
            }
        }
        Command::Ipt => {
            let m = pipeline::cmd_ipt(cfg)?;
            println!("ipt {}", m.fingerprint());
        }
        Command::Sft { base } => {
            let m = pipeline::cmd_sft(cfg, base.as_deref())?;
            println!("sft {}", m.fingerprint());
        }
        Command::Selfplay { base } => {
            for r in pipeline::cmd_selfplay(cfg, base.as_deref())? {
                println!(
                    "iteration {} kept {}/{} dataset {} model {}",
                    r.iteration, r.kept, r.generated, r.dataset_size_after, r.model_fingerprint
                );
            }
        }
        Command::Dpo => {
            let r = pipeline::cmd_dpo(cfg)?;
            println!("dpo pairs {} heldout margin {:.4}", r.train_pairs, r.heldout_margin);
        }
        Command::Eval { checkpoint } => {
            let r = pipeline::cmd_eval(cfg, checkpoint.as_deref())?;
            println!("{}", r.to_json()?);
        }
        Command::Chat(a) => chat(cfg, a)?,
        Command::Pipeline => {
            let r = pipeline::cmd_pipeline(cfg)?;
            println!("stages {}", r.completed.join(","));
            println!("manifest {}", r.manifest_digest);
        }
        Command::Config => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match resolve(&cli.common) {
        Ok(c) => c,
        Err(e) => return fail(USAGE, e),
    };
    log::debug!("run dir {}", cfg.run_dir.display());
    match run(&cfg, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ rolecraft::Error::Config(_)) => fail(USAGE, e),
        Err(e) => fail(STAGE, e),
    }
}
