//! Re-annotation of a sarcasm corpus's negative samples.
//!
//! Workers pass a gold onboarding test, then label one sample at a time as
//! `Sarcasm`, `NotSarcasm` or `Undecided`. Undecided samples go to three
//! experts and take their majority. A random subset is re-labeled by a fresh
//! annotator to measure agreement with Cohen's κ, and the final labels are
//! written back into the corpus.

mod error;
pub mod http;
pub mod protocol;
pub mod service;
pub mod state;

pub use error::{Error, Result};
pub use protocol::{
    cohen_kappa, export_corrected, grade_onboarding, resolve_majority, sample_double_check,
    select_candidates, AnnLabel, KappaReport, OnboardingGrade,
};
pub use service::{
    kappa_of, load_gold, read_log, OnboardingItem, Service, ServiceConfig, TaskView,
};
pub use state::{
    AnnotationEvent, AnnotationTask, AnnotatorProfile, Record, Role, Snapshot, State, TaskKind,
    TaskState,
};
