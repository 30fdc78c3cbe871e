//! Stage commands over a run directory, and the full pipeline.
//!
//! Layout: `run_dir/{data, ipt, sft, selfplay, dpo, eval}` plus the
//! `manifest` file. Each stage writes only its own directory and finds its
//! inputs at fixed paths in the others.

mod config;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use config::{DatagenSection, DpoSection, EvalSection, PipelineConfig, StageToggles, TrainSection};
pub use manifest::{read_manifest, write_manifest, ManifestEntry, RunLock, MANIFEST_FILE};

use crate::chat::{ChatParams, ChatSession};
use crate::corpus::{
    check_text, load_dataset, render_chat_dataset, render_narrative, render_prompt, save_dataset, split_dataset,
    ChatSample, DatasetHandle, DatasetRecord, NarrativeDialogue, PersonaCard, PromptOpen, QaItem, TextLine,
};
use crate::datagen::{
    apply_overlay, build_contrastive_dataset, build_personality_dataset, build_psr_pairs, casual_corpus,
    factual_pairs, factual_pool, merge_final_dataset, narrative_corpus, psr_sequences, reserved_ids,
    synth_persona_cards, train_psr, Assets, Formalizer,
};
use crate::digest::keyed_seed;
use crate::dpo::{construct_negatives, mean_margin, train_dpo, DpoReport, NegativeSources, Negatives};
use crate::error::{Error, Result};
use crate::eval::{evaluate, psr_recovery, EvalConfig, EvalReport, PsrRecovery};
use crate::microlm::{sample, train, Checkpoint, LossKind, SampleParams, TrainReport, Tokenizer};
use crate::selfplay::{run_iterative_sft, IterationReport};

/// Fixed artifact locations inside a run directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn stage(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    pub fn data(&self, file: &str) -> PathBuf {
        self.root.join("data").join(file)
    }

    pub fn ipt_checkpoint(&self) -> PathBuf {
        self.root.join("ipt/m_ipt.ckpt")
    }

    pub fn sft_checkpoint(&self) -> PathBuf {
        self.root.join("sft/m_1.ckpt")
    }

    pub fn selfplay_checkpoint(&self, t: usize) -> PathBuf {
        self.root.join(format!("selfplay/m_{t}.ckpt"))
    }

    pub fn dpo_checkpoint(&self) -> PathBuf {
        self.root.join("dpo/m_dpo.ckpt")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.root.join("eval/report.json")
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

fn load_required<T: DatasetRecord>(path: PathBuf) -> Result<Vec<T>> {
    load_dataset(require(path)?)
}

fn checkpoint_required(path: PathBuf) -> Result<Checkpoint> {
    Checkpoint::load(require(path)?)
}

/// Empties a stage directory so reruns leave no stale files.
fn fresh_stage_dir(paths: &RunPaths, stage: &str) -> Result<PathBuf> {
    let dir = paths.stage(stage);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn assets_for(config: &PipelineConfig) -> Result<Assets> {
    match &config.datagen.assets_dir {
        Some(dir) => Assets::load_dir(dir),
        None => Ok(Assets::builtin()),
    }
}

/// Record counts of the data stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct DataCounts {
    pub cards: usize,
    pub casual: usize,
    pub casual_heldout: usize,
    pub psr_pairs: usize,
    pub psr_dropped: usize,
    pub narrative: usize,
    pub narrative_val: usize,
    pub d_p: usize,
    pub d_c: usize,
    pub d_c_sources: usize,
    pub d_merged: usize,
    pub d_train: usize,
    pub d_val: usize,
    pub qa: usize,
}

#[derive(Serialize)]
struct PsrStageReport<'a> {
    warmup: &'a TrainReport,
    train: &'a TrainReport,
    heldout_recovery: &'a PsrRecovery,
}

fn texts(lines: &[String]) -> Vec<TextLine> {
    lines.iter().map(|t| TextLine { text: t.clone() }).collect()
}

fn run_datagen(config: &PipelineConfig, paths: &RunPaths) -> Result<Vec<DatasetHandle>> {
    let d = &config.datagen;
    let assets = assets_for(config)?;
    let formalizer = Formalizer::new(&assets);
    let dir = fresh_stage_dir(paths, "data")?;
    let mut handles = Vec::new();

    let cards = synth_persona_cards(&assets, d.cards, d.seed)?;
    handles.push(save_dataset(&cards, dir.join("cards.jsonl"))?);

    let casual = casual_corpus(&assets, d.casual_lines, keyed_seed(d.seed, "casual", 0))?;
    let (heldout, train_lines) = casual.split_at(d.psr_holdout);
    handles.push(save_dataset(&texts(train_lines), dir.join("casual.jsonl"))?);
    handles.push(save_dataset(&texts(heldout), dir.join("casual_heldout.jsonl"))?);
    let psr_pairs = build_psr_pairs(&formalizer, train_lines)?;
    handles.push(save_dataset(&psr_pairs.pairs, dir.join("psr_pairs.jsonl"))?);

    let psr_init = Checkpoint::init(
        crate::microlm::ModelConfig {
            init_seed: keyed_seed(d.seed, "psr_init", 0),
            ..config.model.clone()
        },
        "PSR_init",
    )?;
    let (psr_base, warm) = train(&psr_init, &psr_sequences(&psr_pairs.pairs)?, LossKind::Full, &d.psr_warmup, "PSR_base")?;
    let (psr, psr_rep) = train_psr(&psr_pairs.pairs, &psr_base, &d.psr_train, "PSR")?;
    psr.save(dir.join("psr.ckpt"))?;
    let recovery = psr_recovery(&psr, &formalizer, heldout)?;
    log::info!("rewriter recovers {}/{} held-out lines", recovery.improved, recovery.total);
    write_json(
        &PsrStageReport {
            warmup: &warm,
            train: &psr_rep,
            heldout_recovery: &recovery,
        },
        &dir.join("psr_report.json"),
    )?;

    let narrative = narrative_corpus(&assets, &cards, d.narrative_records, keyed_seed(d.seed, "narrative", 0))?;
    let (narr_train, narr_val) = split_dataset(&narrative, d.val_fraction, keyed_seed(d.seed, "narrative_split", 0))?;
    handles.push(save_dataset(&narr_train, dir.join("narrative.jsonl"))?);
    handles.push(save_dataset(&narr_val, dir.join("narrative_val.jsonl"))?);

    let d_p = build_personality_dataset(&assets, &cards, &assets.questions, Some(&psr), d.seed, d.shape)?;
    handles.push(save_dataset(&d_p, dir.join("d_p.jsonl"))?);
    let sources = factual_pairs(&assets, d.factual_pairs, keyed_seed(d.seed, "facts", 0))?;
    let d_c = build_contrastive_dataset(&assets, &sources, &cards, d.seed, d.personas_per_pair)?;
    handles.push(save_dataset(&d_c, dir.join("d_c.jsonl"))?);
    let mut d_merged = merge_final_dataset(&d_p, &d_c);
    if let Some(p) = &d.overlay {
        let overlay: Vec<ChatSample> = load_dataset(p)?;
        d_merged = apply_overlay(d_merged, &overlay);
    }
    handles.push(save_dataset(&d_merged, dir.join("d_merged.jsonl"))?);
    let (d_train, d_val) = split_dataset(&d_merged, d.val_fraction, keyed_seed(d.seed, "sft_split", 0))?;
    handles.push(save_dataset(&d_train, dir.join("d_train.jsonl"))?);
    handles.push(save_dataset(&d_val, dir.join("d_val.jsonl"))?);

    let qa: Vec<QaItem> = factual_pool(&assets)
        .into_iter()
        .map(|f| QaItem {
            query: f.query,
            gold: f.answer,
        })
        .collect();
    handles.push(save_dataset(&qa, dir.join("qa.jsonl"))?);

    let counts = DataCounts {
        cards: cards.len(),
        casual: train_lines.len(),
        casual_heldout: heldout.len(),
        psr_pairs: psr_pairs.pairs.len(),
        psr_dropped: psr_pairs.dropped,
        narrative: narr_train.len(),
        narrative_val: narr_val.len(),
        d_p: d_p.len(),
        d_c: d_c.len(),
        d_c_sources: sources.len(),
        d_merged: d_merged.len(),
        d_train: d_train.len(),
        d_val: d_val.len(),
        qa: qa.len(),
    };
    write_json(&counts, &dir.join("counts.json"))?;
    Ok(handles)
}

fn run_ipt(config: &PipelineConfig, paths: &RunPaths) -> Result<Checkpoint> {
    let narrative: Vec<NarrativeDialogue> = load_required(paths.data("narrative.jsonl"))?;
    let dir = fresh_stage_dir(paths, "ipt")?;
    let seqs = narrative
        .iter()
        .map(|n| render_narrative(n, &Tokenizer))
        .collect::<Result<Vec<_>>>()?;
    let init = Checkpoint::init(config.model.clone(), "M_init")?;
    let (m, report) = train(&init, &seqs, LossKind::Ipt, &config.ipt.train, "M_ipt")?;
    m.save(paths.ipt_checkpoint())?;
    write_json(&report, &dir.join("report.json"))?;
    Ok(m)
}

fn sft_inputs(paths: &RunPaths, base: Option<&Path>) -> Result<(Checkpoint, Vec<ChatSample>, Vec<PersonaCard>)> {
    let m0 = match base {
        Some(p) => checkpoint_required(p.to_path_buf())?,
        None => checkpoint_required(paths.ipt_checkpoint())?,
    };
    Ok((m0, load_required(paths.data("d_train.jsonl"))?, load_required(paths.data("cards.jsonl"))?))
}

fn run_sft(config: &PipelineConfig, paths: &RunPaths, base: Option<&Path>) -> Result<Checkpoint> {
    let (m0, d, cards) = sft_inputs(paths, base)?;
    let dir = fresh_stage_dir(paths, "sft")?;
    let seqs = render_chat_dataset(&d, &cards, &Tokenizer)?;
    let (m, report) = train(&m0, &seqs, LossKind::Response, &config.sft.train, "M_1")?;
    m.save(paths.sft_checkpoint())?;
    write_json(&report, &dir.join("report.json"))?;
    Ok(m)
}

fn run_selfplay(config: &PipelineConfig, paths: &RunPaths, base: Option<&Path>) -> Result<Vec<IterationReport>> {
    let (m0, d, cards) = sft_inputs(paths, base)?;
    let dir = fresh_stage_dir(paths, "selfplay")?;
    Ok(run_iterative_sft(&m0, &d, &cards, &config.selfplay, Some(&dir))?.reports)
}

/// The fine-tuned checkpoint later stages build on: the last self-play
/// model when that stage is enabled, otherwise the plain SFT model.
pub fn sft_final_checkpoint(config: &PipelineConfig) -> PathBuf {
    let paths = RunPaths::new(&config.run_dir);
    if config.stages.selfplay {
        paths.selfplay_checkpoint(config.selfplay.iterations)
    } else {
        paths.sft_checkpoint()
    }
}

/// The checkpoint evaluated and chatted with by default.
pub fn final_checkpoint(config: &PipelineConfig) -> PathBuf {
    if config.stages.dpo {
        RunPaths::new(&config.run_dir).dpo_checkpoint()
    } else {
        sft_final_checkpoint(config)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DpoStageReport {
    pub generations: usize,
    pub negatives_dropped: usize,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub heldout_margin: f64,
    pub criteria_drawn: std::collections::BTreeMap<crate::corpus::Criterion, usize>,
    pub criteria_used: std::collections::BTreeMap<crate::corpus::Criterion, usize>,
    pub train: DpoReport,
}

/// Final responses resampled from `model` for dataset samples.
fn sample_generations(model: &Checkpoint, d: &[ChatSample], cards: &[PersonaCard], s: &DpoSection, seed: u64) -> Result<Vec<ChatSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(keyed_seed(seed, "dpo_pick", 0));
    let n = s.generations.min(d.len());
    let mut idx = rand::seq::index::sample(&mut rng, d.len(), n).into_vec();
    idx.sort_unstable();
    let ctx = model.config().context_len;
    let mut out = Vec::new();
    for i in idx {
        let sample_i = &d[i];
        let card = sample_i.persona_id.as_ref().and_then(|id| cards.iter().find(|c| &c.id == id));
        let (last, context) = sample_i.turns.split_last().expect("validated nonempty");
        let prompt = render_prompt(card, context, PromptOpen::Response(&last.query), &Tokenizer);
        if prompt.len() + 1 >= ctx {
            continue;
        }
        let params = SampleParams {
            temperature: s.temperature,
            top_k: s.top_k,
            max_new: s.max_new_tokens,
            seed: keyed_seed(seed, "dpo_gen", i as u64),
        };
        let g = sample(model.model(), &prompt, &params, &reserved_ids())?;
        let text = Tokenizer.detokenize(g.new_tokens()).trim().to_string();
        if check_text("response", &text, false).is_err() {
            continue;
        }
        let mut turns = context.to_vec();
        turns.push(crate::corpus::ChatTurn::new(last.query.clone(), text));
        out.push(ChatSample {
            persona_id: sample_i.persona_id.clone(),
            turns,
        });
    }
    Ok(out)
}

fn run_dpo(config: &PipelineConfig, paths: &RunPaths) -> Result<DpoStageReport> {
    let policy = checkpoint_required(sft_final_checkpoint(config))?;
    let d: Vec<ChatSample> = load_required(paths.data("d_train.jsonl"))?;
    let cards: Vec<PersonaCard> = load_required(paths.data("cards.jsonl"))?;
    let dir = fresh_stage_dir(paths, "dpo")?;
    let assets = assets_for(config)?;
    let formalizer = Formalizer::new(&assets);
    let s = &config.dpo;
    let seed = s.train.seed;
    let gens = sample_generations(&policy, &d, &cards, s, seed)?;
    save_dataset(&gens, dir.join("generations.jsonl"))?;
    let src = NegativeSources {
        assets: &assets,
        formalizer: &formalizer,
        cards: &cards,
    };
    let Negatives {
        pairs,
        dropped,
        drawn,
        used,
    } = construct_negatives(&gens, &src, &s.train.negative_mix, seed)?;
    save_dataset(&pairs, dir.join("preferences.jsonl"))?;
    let (train_pairs, heldout) = split_dataset(&pairs, s.heldout_fraction, keyed_seed(seed, "dpo_split", 0))?;
    let (m, report) = train_dpo(&policy, &train_pairs, &cards, &s.train)?;
    m.save(paths.dpo_checkpoint())?;
    let heldout_margin = mean_margin(&m, &policy, &heldout, &cards, s.train.beta)?;
    let out = DpoStageReport {
        generations: gens.len(),
        negatives_dropped: dropped,
        train_pairs: train_pairs.len(),
        heldout_pairs: heldout.len(),
        heldout_margin,
        criteria_drawn: drawn,
        criteria_used: used,
        train: report,
    };
    write_json(&out, &dir.join("report.json"))?;
    Ok(out)
}

fn run_eval(config: &PipelineConfig, paths: &RunPaths, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let ckpt = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => final_checkpoint(config),
    };
    let model = checkpoint_required(ckpt)?;
    let e = &config.eval;
    let eval_cfg = EvalConfig {
        cards: Some(paths.data("cards.jsonl")),
        qa_persona: None,
        probe_cards: e.probe_cards,
        probe_questions: e.probe_questions,
        max_new_tokens: e.max_new_tokens,
        assets_dir: config.datagen.assets_dir.clone(),
        ..EvalConfig::new(
            paths.data("narrative_val.jsonl"),
            paths.data("d_val.jsonl"),
            paths.data("qa.jsonl"),
        )
    };
    let report = evaluate(&model, &eval_cfg)?;
    fresh_stage_dir(paths, "eval")?;
    report.write(paths.eval_report())?;
    Ok(report)
}

fn locked<T>(config: &PipelineConfig, f: impl FnOnce(&RunPaths) -> Result<T>) -> Result<T> {
    config.validate()?;
    fs::create_dir_all(&config.run_dir).map_err(|e| Error::io(&config.run_dir, e))?;
    let _lock = RunLock::acquire(&config.run_dir)?;
    f(&RunPaths::new(&config.run_dir))
}

/// Cards, rewriter pairs and checkpoint, corpora, `D_p`, `D_c` and their
/// union, under `run_dir/data`.
pub fn cmd_datagen(config: &PipelineConfig) -> Result<Vec<DatasetHandle>> {
    locked(config, |p| run_datagen(config, p))
}

pub fn cmd_ipt(config: &PipelineConfig) -> Result<Checkpoint> {
    locked(config, |p| run_ipt(config, p))
}

/// Fine-tunes `base`, or the IPT checkpoint when `base` is `None`.
pub fn cmd_sft(config: &PipelineConfig, base: Option<&Path>) -> Result<Checkpoint> {
    locked(config, |p| run_sft(config, p, base))
}

pub fn cmd_selfplay(config: &PipelineConfig, base: Option<&Path>) -> Result<Vec<IterationReport>> {
    locked(config, |p| run_selfplay(config, p, base))
}

pub fn cmd_dpo(config: &PipelineConfig) -> Result<DpoStageReport> {
    locked(config, |p| run_dpo(config, p))
}

/// Evaluates `checkpoint`, or [`final_checkpoint`] when `None`.
pub fn cmd_eval(config: &PipelineConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    locked(config, |p| run_eval(config, p, checkpoint))
}

/// Outcome of [`cmd_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub completed: Vec<&'static str>,
    pub manifest: Vec<ManifestEntry>,
    pub manifest_digest: String,
}

/// Runs the enabled stages in order and writes the manifest. On a stage
/// failure the manifest still lists the stages that completed.
pub fn cmd_pipeline(config: &PipelineConfig) -> Result<PipelineRun> {
    locked(config, |paths| {
        let mut completed = Vec::new();
        for stage in StageToggles::NAMES {
            if config.stages.get(stage) != Some(true) {
                continue;
            }
            log::info!("stage {stage}");
            let r = match stage {
                "datagen" => run_datagen(config, paths).map(drop),
                "ipt" => run_ipt(config, paths).map(drop),
                "sft" => run_sft(config, paths, None).map(drop),
                "selfplay" => run_selfplay(config, paths, None).map(drop),
                "dpo" => run_dpo(config, paths).map(drop),
                _ => run_eval(config, paths, None).map(drop),
            };
            if let Err(e) = r {
                write_manifest(&paths.root, &completed)?;
                return Err(e);
            }
            completed.push(stage);
        }
        let (manifest, manifest_digest) = write_manifest(&paths.root, &completed)?;
        Ok(PipelineRun {
            completed,
            manifest,
            manifest_digest,
        })
    })
}

/// Options of [`cmd_chat`].
pub struct ChatOptions<'a> {
    pub checkpoint: &'a Path,
    pub cards: Option<&'a Path>,
    pub persona: Option<&'a str>,
    pub seed: u64,
    pub params: ChatParams,
    pub transcript: Option<&'a Path>,
}

/// Runs a chat session over `input`, saving the transcript as a one-record
/// chat dataset (empty when no turn completed).
pub fn cmd_chat(opts: &ChatOptions<'_>, input: impl std::io::BufRead, output: impl std::io::Write) -> Result<ChatSample> {
    let model = checkpoint_required(opts.checkpoint.to_path_buf())?;
    let cards: Vec<PersonaCard> = match opts.cards {
        Some(p) => load_required(p.to_path_buf())?,
        None => Vec::new(),
    };
    let persona = match opts.persona {
        Some(id) => Some(
            cards
                .iter()
                .find(|c| c.id == id)
                .ok_or_else(|| Error::Config(format!("persona `{id}` not found in the card file")))?,
        ),
        None => None,
    };
    let mut session = ChatSession::new(&model, persona, opts.params, opts.seed);
    let transcript = session.run(input, output)?;
    if let Some(p) = opts.transcript {
        let records: Vec<ChatSample> = if transcript.turns.is_empty() {
            Vec::new()
        } else {
            vec![transcript.clone()]
        };
        save_dataset(&records, p)?;
    }
    Ok(transcript)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_prerequisites_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::desk(dir.path());
        match cmd_ipt(&cfg) {
            Err(Error::MissingArtifact(p)) => assert!(p.ends_with("data/narrative.jsonl")),
            other => panic!("{other:?}"),
        }
        match cmd_eval(&cfg, None) {
            Err(Error::MissingArtifact(p)) => assert!(p.ends_with("dpo/m_dpo.ckpt")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn final_checkpoint_follows_toggles() {
        let mut cfg = PipelineConfig::desk("r");
        assert!(final_checkpoint(&cfg).ends_with("dpo/m_dpo.ckpt"));
        cfg.stages.dpo = false;
        assert!(final_checkpoint(&cfg).ends_with("selfplay/m_2.ckpt"));
        cfg.stages.selfplay = false;
        assert!(final_checkpoint(&cfg).ends_with("sft/m_1.ckpt"));
    }
}
