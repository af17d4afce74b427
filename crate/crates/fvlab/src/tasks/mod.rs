//! Synthetic in-context task universe.
//!
//! A task maps the key token of a short input to one or more output tokens
//! (generation) or to one of four label tokens (classification). Prompts read
//! `instruction (x -> y EOS)* x ->`.

mod corpus;
mod curriculum;
mod prompt;
mod spec;
mod suite;

pub use corpus::{read_corpus, write_corpus, CorpusRecord};
pub use curriculum::{lm_sequence, Curriculum, LmSequence, StreamItem};
pub use prompt::{build_icl_prompt, bundles_for, derangement, render, PromptBundle};
pub use spec::{make_task, Example, TaskDef, TaskKind, TaskSpec, Vocab};
pub use suite::{SequenceSpec, Suite, SuiteConfig};
