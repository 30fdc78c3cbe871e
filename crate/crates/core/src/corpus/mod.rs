//! Record types, rendering into labelled token sequences, and dataset files.

mod io;
mod records;
mod render;
mod split;

pub use io::{decode_dataset, encode_dataset, load_dataset, save_dataset, DatasetHandle};
pub use records::{
    validate_card_set, CardSource, ChatSample, ChatTurn, Criterion, DatasetKind, DatasetRecord,
    DialogueTurn, Invalid, NarrativeDialogue, PersonaCard, PreferenceSample, QaItem, TextLine,
};
pub(crate) use records::check_text;
pub use render::{
    render_and_segment, render_chat, render_chat_dataset, render_narrative, render_prompt, AlignedSequence, Label,
    MaskKind, PromptOpen, RecordRef, SegmentedTokenSequence, SequenceKind,
};
pub use split::split_dataset;
