//! Iterative fine-tuning by self-play between a response agent and an ask
//! agent.
//!
//! Every response model is trained from the base checkpoint on the
//! accumulated dataset; the ask agent is trained once, before the loop.

mod filter;
mod generate;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use filter::{char_ngrams, filter_samples, jaccard, FilterConfig, FilterStats};
pub use generate::{generate_interactions, GenerationEvent, Interactions, Role};

use crate::corpus::{render_chat_dataset, save_dataset, ChatSample, PersonaCard};
use crate::digest::keyed_seed;
use crate::error::{Error, Result};
use crate::microlm::{train, Checkpoint, LossKind, TrainConfig, TrainReport, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfPlayConfig {
    pub iterations: usize,
    pub gen_budget: usize,
    pub max_turns: usize,
    pub max_turn_tokens: usize,
    #[serde(default)]
    pub filter: FilterConfig,
    pub train: TrainConfig,
    /// Retrain the ask agent at every iteration instead of once.
    #[serde(default)]
    pub refresh_ask: bool,
    /// Condition each generated dialogue on a card drawn from the card set.
    #[serde(default = "yes")]
    pub persona_conditioning: bool,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    pub seed: u64,
}

fn yes() -> bool {
    true
}

fn default_temperature() -> f64 {
    0.8
}

fn default_top_k() -> usize {
    40
}

impl SelfPlayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.gen_budget == 0 || self.max_turns == 0 || self.max_turn_tokens == 0 {
            return Err(Error::Config(
                "iterations, gen_budget, max_turns and max_turn_tokens must be positive".into(),
            ));
        }
        if self.top_k == 0 || !(self.temperature > 0.0) {
            return Err(Error::Config("top_k and temperature must be positive".into()));
        }
        self.filter.validate()?;
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub generated: usize,
    pub kept: usize,
    pub dataset_size_after: usize,
    pub model_fingerprint: String,
    pub init_fingerprint: String,
    /// Generation ran but the filter kept nothing; the model was retrained on
    /// the unchanged dataset.
    pub filtered_to_empty: bool,
    pub filter: FilterStats,
    pub train: TrainReport,
}

/// Outcome of [`run_iterative_sft`].
#[derive(Debug, Clone)]
pub struct SelfPlayRun {
    pub model: Checkpoint,
    pub ask: Checkpoint,
    pub reports: Vec<IterationReport>,
    /// Every training run, in order, including the ask agent's.
    pub training_events: Vec<TrainReport>,
    pub dataset: Vec<ChatSample>,
}

/// The ask agent: the base model trained on query tokens only.
pub fn train_ask_agent(
    m0: &Checkpoint,
    d: &[ChatSample],
    cards: &[PersonaCard],
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    if d.is_empty() {
        return Err(Error::Training("ask agent needs a nonempty dataset".into()));
    }
    train(m0, &render_chat_dataset(d, cards, &Tokenizer)?, LossKind::Ask, config, "M_ask")
}

fn train_responder(
    m0: &Checkpoint,
    d: &[ChatSample],
    cards: &[PersonaCard],
    config: &TrainConfig,
    i: usize,
) -> Result<(Checkpoint, TrainReport)> {
    let cfg = TrainConfig {
        seed: keyed_seed(config.seed, "responder", i as u64),
        ..config.clone()
    };
    train(m0, &render_chat_dataset(d, cards, &Tokenizer)?, LossKind::Response, &cfg, &format!("M_{i}"))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Runs the iterative loop for `config.iterations` response models. When
/// `run_dir` is given, writes `m_<i>.ckpt`, `report_<i>.json`, `d_iter_<i>.jsonl`
/// (the kept generations of iteration `i`), `m_ask.ckpt`, `dataset.jsonl` and
/// `training_events.json` into it.
pub fn run_iterative_sft(
    m0: &Checkpoint,
    d0: &[ChatSample],
    cards: &[PersonaCard],
    config: &SelfPlayConfig,
    run_dir: Option<&Path>,
) -> Result<SelfPlayRun> {
    config.validate()?;
    if d0.is_empty() {
        return Err(Error::Training("self-play needs a nonempty seed dataset".into()));
    }
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut d: Vec<ChatSample> = d0.to_vec();
    let mut events = Vec::new();
    let mut reports = Vec::new();

    let (mut model, rep) = train_responder(m0, &d, cards, &config.train, 1)?;
    events.push(rep.clone());
    let ask_cfg = TrainConfig {
        seed: keyed_seed(config.train.seed, "ask", 0),
        ..config.train.clone()
    };
    let (mut ask, ask_rep) = train_ask_agent(m0, &d, cards, &ask_cfg)?;
    events.push(ask_rep);
    reports.push(IterationReport {
        iteration: 1,
        generated: 0,
        kept: 0,
        dataset_size_after: d.len(),
        model_fingerprint: model.fingerprint().to_string(),
        init_fingerprint: rep.init_fingerprint.clone(),
        filtered_to_empty: false,
        filter: FilterStats::default(),
        train: rep,
    });
    if let Some(dir) = run_dir {
        model.save(dir.join("m_1.ckpt"))?;
        write_json(&reports[0], &dir.join("report_1.json"))?;
    }

    for i in 2..=config.iterations {
        if config.refresh_ask && i > 2 {
            let cfg = TrainConfig {
                seed: keyed_seed(config.train.seed, "ask", i as u64),
                ..config.train.clone()
            };
            let (a, r) = train_ask_agent(m0, &d, cards, &cfg)?;
            ask = a;
            events.push(r);
        }
        let inter = generate_interactions(
            &model,
            &ask,
            cards,
            config,
            keyed_seed(config.seed, "iteration", i as u64),
        )?;
        let (kept, stats) = filter_samples(&inter.samples, &d, &config.filter);
        let filtered_to_empty = kept.is_empty();
        if filtered_to_empty {
            log::warn!("iteration {i}: filter kept none of {} dialogues", inter.samples.len());
        }
        if let Some(dir) = run_dir {
            save_dataset(&kept, dir.join(format!("d_iter_{i}.jsonl")))?;
        }
        let (generated, n_kept) = (inter.samples.len(), kept.len());
        d.extend(kept);
        let (m, rep) = train_responder(m0, &d, cards, &config.train, i)?;
        model = m;
        events.push(rep.clone());
        let report = IterationReport {
            iteration: i,
            generated,
            kept: n_kept,
            dataset_size_after: d.len(),
            model_fingerprint: model.fingerprint().to_string(),
            init_fingerprint: rep.init_fingerprint.clone(),
            filtered_to_empty,
            filter: stats,
            train: rep,
        };
        log::info!(
            "iteration {i}: generated {generated}, kept {n_kept}, dataset {}",
            d.len()
        );
        if let Some(dir) = run_dir {
            model.save(dir.join(format!("m_{i}.ckpt")))?;
            write_json(&report, &dir.join(format!("report_{i}.json")))?;
        }
        reports.push(report);
    }
    if let Some(dir) = run_dir {
        ask.save(dir.join("m_ask.ckpt"))?;
        save_dataset(&d, dir.join("dataset.jsonl"))?;
        write_json(&events, &dir.join("training_events.json"))?;
    }
    Ok(SelfPlayRun {
        model,
        ask,
        reports,
        training_events: events,
        dataset: d,
    })
}
