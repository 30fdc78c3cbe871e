//! Persona-agent training on a micro decoder-only language model.

pub mod chat;
pub mod corpus;
pub mod datagen;
pub mod digest;
pub mod dpo;
pub mod eval;
pub mod error;
pub mod losses;
pub mod microlm;
pub mod pipeline;
pub mod selfplay;

pub use error::{Error, Result};

// The guide's code blocks run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tokens-and-masks.md")]
    mod tokens_and_masks {}
    #[doc = include_str!("../../../book/src/micro-model.md")]
    mod micro_model {}
    #[doc = include_str!("../../../book/src/persona-data.md")]
    mod persona_data {}
    #[doc = include_str!("../../../book/src/self-play.md")]
    mod self_play {}
    #[doc = include_str!("../../../book/src/preferences.md")]
    mod preferences {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
