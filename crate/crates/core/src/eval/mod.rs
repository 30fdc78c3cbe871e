//! Cheap deterministic proxy metrics and the evaluation report.
//!
//! | metric | stands in for |
//! |---|---|
//! | masked perplexity | conversational ability |
//! | style score | personification, attractiveness |
//! | leak rate | persona consistency |
//! | QA accuracy | knowledge and reasoning suites |
//!
//! The mapping is a proxy, not an equivalence.

mod metrics;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use metrics::{
    greedy_response, is_correct, leak_probe, masked_perplexity, psr_recovery, qa_accuracy, style_score,
    CasualLexicon, PsrRecovery,
};

use crate::corpus::{
    decode_dataset, render_chat_dataset, render_narrative, ChatSample, DatasetRecord, MaskKind, NarrativeDialogue,
    PersonaCard, QaItem,
};
use crate::datagen::{Assets, Formalizer};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::microlm::{Checkpoint, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Narrative records scored with the dialogue mask.
    pub dialogue_suite: PathBuf,
    /// Chat records scored with the response mask.
    pub response_suite: PathBuf,
    pub qa_suite: PathBuf,
    /// Cards referenced by the chat suite and used for probing.
    #[serde(default)]
    pub cards: Option<PathBuf>,
    /// Card for persona-conditioned QA; defaults to the first card.
    #[serde(default)]
    pub qa_persona: Option<String>,
    /// Cards and seed questions crossed to produce the style and leak probe
    /// texts.
    #[serde(default = "default_probe_cards")]
    pub probe_cards: usize,
    #[serde(default = "default_probe_questions")]
    pub probe_questions: usize,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    /// Asset directory override for the lexicon, leak phrases and questions.
    #[serde(default)]
    pub assets_dir: Option<PathBuf>,
}

fn default_probe_cards() -> usize {
    4
}

fn default_probe_questions() -> usize {
    6
}

fn default_max_new() -> usize {
    48
}

impl EvalConfig {
    pub fn new(dialogue_suite: PathBuf, response_suite: PathBuf, qa_suite: PathBuf) -> Self {
        EvalConfig {
            dialogue_suite,
            response_suite,
            qa_suite,
            cards: None,
            qa_persona: None,
            probe_cards: default_probe_cards(),
            probe_questions: default_probe_questions(),
            max_new_tokens: default_max_new(),
            assets_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 || self.probe_questions == 0 {
            return Err(Error::Config("max_new_tokens and probe_questions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteCounts {
    pub dialogue_sequences: usize,
    pub response_sequences: usize,
    pub qa_items: usize,
    pub probe_texts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    /// What each metric stands in for.
    pub proxies: BTreeMap<String, String>,
    pub model_fingerprint: String,
    /// Digest of the settings and the content of every suite file.
    pub config_digest: String,
    pub masked_ppl_dialogue: f64,
    pub masked_ppl_response: f64,
    pub style_score: f64,
    pub qa_accuracy: f64,
    /// Same questions with the persona preamble.
    pub qa_accuracy_persona: Option<f64>,
    pub leak_rate: f64,
    pub counts: SuiteCounts,
}

impl EvalReport {
    /// Top-level fields of the serialized report.
    pub const FIELDS: [&'static str; 11] = [
        "proxies",
        "model_fingerprint",
        "config_digest",
        "masked_ppl_dialogue",
        "masked_ppl_response",
        "style_score",
        "qa_accuracy",
        "qa_accuracy_persona",
        "leak_rate",
        "counts",
        "counts.probe_texts",
    ];

    pub fn validate(&self) -> Result<()> {
        let rates = [Some(self.style_score), Some(self.qa_accuracy), self.qa_accuracy_persona, Some(self.leak_rate)];
        if rates.iter().flatten().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidRecord("eval rates must lie in [0, 1]".into()));
        }
        if !(self.masked_ppl_dialogue >= 1.0 && self.masked_ppl_response >= 1.0) {
            return Err(Error::InvalidRecord("perplexities must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

fn proxies() -> BTreeMap<String, String> {
    [
        ("masked_ppl_dialogue", "conversational ability on narrative dialogue"),
        ("masked_ppl_response", "conversational ability on chat responses"),
        ("style_score", "personification and attractiveness"),
        ("leak_rate", "persona consistency (lower is better)"),
        ("qa_accuracy", "knowledge and reasoning suites"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

fn read_suite<T: DatasetRecord>(path: &Path) -> Result<(Vec<T>, String)> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingArtifact(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let records = decode_dataset(&String::from_utf8_lossy(&bytes), path)?;
    Ok((records, sha256_hex(&bytes)))
}

/// Runs every suite of `config` against `model`.
pub fn evaluate(model: &Checkpoint, config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    let (dialogues, d1) = read_suite::<NarrativeDialogue>(&config.dialogue_suite)?;
    let (chats, d2) = read_suite::<ChatSample>(&config.response_suite)?;
    let (qa, d3) = read_suite::<QaItem>(&config.qa_suite)?;
    let (cards, d4) = match &config.cards {
        Some(p) => read_suite::<PersonaCard>(p)?,
        None => (Vec::new(), String::new()),
    };
    let assets = match &config.assets_dir {
        Some(dir) => Assets::load_dir(dir)?,
        None => Assets::builtin(),
    };
    // Paths are left out so a relocated run directory digests the same.
    let settings = serde_json::json!({
        "qa_persona": config.qa_persona,
        "probe_cards": config.probe_cards,
        "probe_questions": config.probe_questions,
        "max_new_tokens": config.max_new_tokens,
        "assets": assets.digest(),
        "suites": [d1, d2, d3, d4],
    });
    let config_digest = sha256_hex(settings.to_string().as_bytes());

    let tok = Tokenizer;
    let narrative = dialogues
        .iter()
        .map(|d| render_narrative(d, &tok))
        .collect::<Result<Vec<_>>>()?;
    let chat = render_chat_dataset(&chats, &cards, &tok)?;
    let lm = model.model();
    let masked_ppl_dialogue = masked_perplexity(lm, &narrative, MaskKind::Dialogue)?;
    let masked_ppl_response = masked_perplexity(lm, &chat, MaskKind::Response)?;

    let qa_accuracy = qa_accuracy(model, &qa, None, config.max_new_tokens)?;
    let qa_card = match &config.qa_persona {
        Some(id) => Some(
            cards
                .iter()
                .find(|c| &c.id == id)
                .ok_or_else(|| Error::Config(format!("qa_persona `{id}` is not among the cards")))?,
        ),
        None => cards.first(),
    };
    let qa_accuracy_persona = match qa_card {
        Some(c) => Some(metrics::qa_accuracy(model, &qa, Some(c), config.max_new_tokens)?),
        None => None,
    };

    let questions: Vec<&String> = assets.questions.iter().take(config.probe_questions).collect();
    let personas: Vec<Option<&PersonaCard>> = if cards.is_empty() || config.probe_cards == 0 {
        vec![None]
    } else {
        cards.iter().take(config.probe_cards).map(Some).collect()
    };
    let mut probes = Vec::new();
    for p in &personas {
        for q in &questions {
            probes.push(greedy_response(model, *p, q, config.max_new_tokens)?);
        }
    }
    let lexicon = CasualLexicon::from_formalizer(&Formalizer::new(&assets));
    let report = EvalReport {
        proxies: proxies(),
        model_fingerprint: model.fingerprint().to_string(),
        config_digest,
        masked_ppl_dialogue,
        masked_ppl_response,
        style_score: style_score(&probes, &lexicon)?,
        qa_accuracy,
        qa_accuracy_persona,
        leak_rate: leak_probe(&probes, &assets.leak_phrases)?,
        counts: SuiteCounts {
            dialogue_sequences: narrative.len(),
            response_sequences: chat.len(),
            qa_items: qa.len(),
            probe_texts: probes.len(),
        },
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{save_dataset, DialogueTurn};
    use crate::microlm::ModelConfig;

    fn fixture(dir: &Path) -> EvalConfig {
        let n = vec![NarrativeDialogue {
            narration: "A quiet shop. ".into(),
            turns: vec![DialogueTurn {
                character: "Ana".into(),
                utterance: "Welcome in.".into(),
            }],
        }];
        save_dataset(&n, dir.join("n.jsonl")).unwrap();
        save_dataset(&[ChatSample::single(None, "hi", "hello")], dir.join("c.jsonl")).unwrap();
        save_dataset(
            &[QaItem {
                query: "What is 2+2?".into(),
                gold: "4".into(),
            }],
            dir.join("qa.jsonl"),
        )
        .unwrap();
        EvalConfig {
            probe_questions: 2,
            max_new_tokens: 4,
            ..EvalConfig::new(dir.join("n.jsonl"), dir.join("c.jsonl"), dir.join("qa.jsonl"))
        }
    }

    fn model() -> Checkpoint {
        Checkpoint::init(
            ModelConfig {
                embed_dim: 16,
                num_heads: 2,
                num_layers: 1,
                context_len: 128,
                init_seed: 2,
                ..Default::default()
            },
            "m",
        )
        .unwrap()
    }

    #[test]
    fn report_is_deterministic_and_complete() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path());
        let m = model();
        let a = evaluate(&m, &cfg).unwrap();
        let b = evaluate(&m, &cfg).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.model_fingerprint, m.fingerprint());
        assert_eq!(a.counts.probe_texts, 2);
        assert!(a.qa_accuracy_persona.is_none());
        let v: serde_json::Value = serde_json::from_str(&a.to_json().unwrap()).unwrap();
        for f in EvalReport::FIELDS {
            let mut cur = &v;
            for part in f.split('.') {
                cur = cur.get(part).unwrap_or_else(|| panic!("missing {f}"));
            }
        }
        assert_eq!(v.as_object().unwrap().len(), 10);
    }

    #[test]
    fn missing_suite_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EvalConfig {
            qa_suite: dir.path().join("nope.jsonl"),
            ..fixture(dir.path())
        };
        match evaluate(&model(), &cfg) {
            Err(Error::MissingArtifact(p)) => assert!(p.ends_with("nope.jsonl")),
            other => panic!("{other:?}"),
        }
    }
}
