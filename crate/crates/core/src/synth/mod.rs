//! Synthetic ECG question-answering corpus.

pub mod attributes;
pub mod classes;
pub mod corpus;
pub mod episode;
pub mod io;
pub mod signal;

pub use attributes::{AttributeRegistry, AttributeSpec, Family, Motif};
pub use classes::{ClassRegistry, PromptVariant, QuestionType, TaskClass, PARAPHRASES, SEEN_PARAPHRASES};
pub use corpus::{
    generate_corpus, make_domain_shift_corpus, Corpus, GeneratorConfig, QaTriplet, ShiftParams, Split,
    SplitManifest,
};
pub use episode::{sample_episode, Episode, EpisodeSampler, EpisodeSpec, ParaphrasePool};
pub use io::{load_corpus, save_corpus};
pub use signal::{
    apply_lead_mask, inject_motif, random_lead_mask, EcgSignal, Finding, Findings, Recipe, SynthEcg,
    LEAD_NAMES,
};
