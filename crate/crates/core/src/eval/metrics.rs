use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{render_prompt, MaskKind, PersonaCard, PromptOpen, QaItem, SegmentedTokenSequence};
use crate::datagen::{apply_psr, is_emoji, normalize_word, reserved_ids, word_spans, Formalizer};
use crate::error::{Error, Result};
use crate::losses::{masked_nll, MaskedLossResult};
use crate::microlm::{prepare, sample, Checkpoint, MicroLm, SampleParams, Tokenizer};

/// `exp(total masked NLL / masked tokens)` pooled over `seqs`. Sequences
/// longer than the context window are cut to it.
pub fn masked_perplexity(model: &MicroLm, seqs: &[SegmentedTokenSequence], mask: MaskKind) -> Result<f64> {
    let ctx = model.config().context_len;
    let mut pooled = MaskedLossResult::EMPTY;
    for s in seqs {
        if !mask.compatible(s.source_kind()) {
            return Err(Error::InvalidRecord(format!(
                "{mask:?} mask does not apply to a {:?} sequence",
                s.source_kind()
            )));
        }
        let (a, _) = prepare(s, mask, ctx);
        if a.masked_count() == 0 {
            continue;
        }
        let logits = model.forward(&a.inputs)?;
        pooled = pooled.pooled(masked_nll(&logits, &a.targets, &a.mask)?);
    }
    if pooled.masked_count == 0 {
        return Err(Error::InvalidRecord(format!("no {mask:?} tokens to score")));
    }
    Ok(pooled.mean.exp())
}

/// Marker words and symbols that make a text read as casual.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CasualLexicon {
    words: HashSet<String>,
    emoticons: HashSet<String>,
}

impl CasualLexicon {
    /// Contractions and interjections match whole words, emoticons whole
    /// whitespace-separated tokens; all case-insensitively. Emoji always
    /// count.
    pub fn new<'a>(
        contractions: impl IntoIterator<Item = &'a str>,
        interjections: impl IntoIterator<Item = &'a str>,
        emoticons: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let lex = CasualLexicon {
            words: contractions.into_iter().chain(interjections).map(normalize_word).collect(),
            emoticons: emoticons.into_iter().map(str::to_lowercase).collect(),
        };
        if lex.words.is_empty() && lex.emoticons.is_empty() {
            return Err(Error::Config("casual lexicon is empty".into()));
        }
        Ok(lex)
    }

    /// The markers the formalizer removes with its contraction, emoticon and
    /// interjection rules.
    pub fn from_formalizer(f: &Formalizer) -> Self {
        Self::new(f.contractions(), f.interjections(), f.emoticons()).expect("rule table has markers")
    }

    pub fn marks(&self, text: &str) -> bool {
        text.chars().any(is_emoji)
            || text
                .split_whitespace()
                .any(|t| self.emoticons.contains(&t.to_lowercase()))
            || word_spans(text)
                .into_iter()
                .any(|(s, e)| self.words.contains(&normalize_word(&text[s..e])))
    }
}

fn check_nonempty<T>(texts: &[T], what: &str) -> Result<()> {
    if texts.is_empty() {
        return Err(Error::InvalidRecord(format!("{what} needs at least one text")));
    }
    Ok(())
}

/// Fraction of `texts` carrying at least one casual marker.
pub fn style_score<S: AsRef<str>>(texts: &[S], lexicon: &CasualLexicon) -> Result<f64> {
    check_nonempty(texts, "style_score")?;
    let hits = texts.iter().filter(|t| lexicon.marks(t.as_ref())).count();
    Ok(hits as f64 / texts.len() as f64)
}

/// Fraction of `texts` containing any of `phrases`, case-insensitively.
pub fn leak_probe<S: AsRef<str>>(texts: &[S], phrases: &[String]) -> Result<f64> {
    check_nonempty(texts, "leak_probe")?;
    let phrases: Vec<String> = phrases.iter().map(|p| p.to_lowercase()).collect();
    let hits = texts
        .iter()
        .filter(|t| {
            let t = t.as_ref().to_lowercase();
            phrases.iter().any(|p| t.contains(p.as_str()))
        })
        .count();
    Ok(hits as f64 / texts.len() as f64)
}

/// Greedy single-turn response to `query`, optionally under a persona.
pub fn greedy_response(
    model: &Checkpoint,
    persona: Option<&PersonaCard>,
    query: &str,
    max_new: usize,
) -> Result<String> {
    let prompt = render_prompt(persona, &[], PromptOpen::Response(query), &Tokenizer);
    let ctx = model.config().context_len;
    if prompt.len() >= ctx {
        return Err(Error::ContextOverflow {
            len: prompt.len(),
            context_len: ctx,
        });
    }
    let g = sample(model.model(), &prompt, &SampleParams::greedy(max_new), &reserved_ids())?;
    Ok(Tokenizer.detokenize(g.new_tokens()).trim().to_string())
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// A response is correct when it contains the gold literal, compared after
/// collapsing whitespace and lowercasing.
pub fn is_correct(response: &str, gold: &str) -> bool {
    normalize(response).contains(&normalize(gold))
}

/// Mean greedy-decoding accuracy over `qa`.
pub fn qa_accuracy(
    model: &Checkpoint,
    qa: &[QaItem],
    persona: Option<&PersonaCard>,
    max_new: usize,
) -> Result<f64> {
    check_nonempty(qa, "qa_accuracy")?;
    let mut correct = 0;
    for item in qa {
        correct += is_correct(&greedy_response(model, persona, &item.query, max_new)?, &item.gold) as usize;
    }
    Ok(correct as f64 / qa.len() as f64)
}

/// How often the rewriter moves a formalized sentence back towards its
/// casual source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsrRecovery {
    pub total: usize,
    /// Sentences where `lev(psr(formal), casual) < lev(formal, casual)`.
    pub improved: usize,
    pub rate: f64,
}

pub fn psr_recovery<S: AsRef<str>>(psr: &Checkpoint, formalizer: &Formalizer, casual: &[S]) -> Result<PsrRecovery> {
    check_nonempty(casual, "psr_recovery")?;
    let mut improved = 0;
    for (i, c) in casual.iter().enumerate() {
        let c = c.as_ref();
        let formal = formalizer.formalize(c).text;
        let out = apply_psr(psr, &formal, i as u64)?;
        if strsim::levenshtein(&out.text, c) < strsim::levenshtein(&formal, c) {
            improved += 1;
        }
    }
    Ok(PsrRecovery {
        total: casual.len(),
        improved,
        rate: improved as f64 / casual.len() as f64,
    })
}
