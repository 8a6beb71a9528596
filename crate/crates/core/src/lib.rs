//! Toolkit for privacy-preserving clinical text: PHI annotation with rules
//! or a chat-completion model, synthetic note generation, label-substitution
//! de-identification, and quality evaluation.

pub mod annotate;
pub mod cost;
pub mod deid;
pub mod eval;
pub mod exec;
pub mod model;
pub mod offline;
pub mod prompts;
pub mod quality;
pub mod rules;
mod stats;
pub mod synth;
pub mod transport;

pub use exec::Execution;
pub use model::{
    normalize_mention, parse_phi_dictionary, parse_phi_dictionary_audited, serialize_phi_dictionary, EntityType,
    NormalizationPolicy, NoteRecord, ParseMode, PhiDictionary, Source,
};
