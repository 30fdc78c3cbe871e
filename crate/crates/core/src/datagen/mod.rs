//! Synthetic persona data: cards, the casual-to-formal rewriter, the style
//! rewriter, and the persona and contrastive datasets.
//!
//! Every random draw is keyed by `(seed, label, index)`, so a record does not
//! depend on how many records were generated before it.

mod assets;
mod cards;
mod corpora;
mod datasets;
mod formalize;
mod psr;
mod responder;
mod types;

pub use assets::{Assets, FactEntry, RuleEntry, ASSET_FILES, BUILTIN_VERSION};
pub use cards::{card_capacity, synth_persona_cards};
pub use corpora::{casual_corpus, factual_pairs, factual_pool, narrative_corpus};
pub use datasets::{
    apply_overlay, build_contrastive_dataset, build_personality_dataset, merge_final_dataset,
    tailored_answer, PersonaDatasets, PersonalityShape,
};
pub use formalize::{formalize, is_emoji, Formalized, Formalizer, RuleId};
pub use psr::{
    apply_psr, build_psr_pairs, psr_budget, psr_sample, psr_sequences, train_psr, PsrOutput,
    PsrPairs, MIN_PSR_PAIRS, PSR_PREFIX,
};
pub(crate) use formalize::{normalize_word, word_spans};
pub(crate) use psr::reserved_ids;
pub use responder::{infuse_markers, persona_draft, persona_responder};
pub use types::{RewritePair, SftPair};

/// Substitutes `{key}` placeholders.
pub(crate) fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}
