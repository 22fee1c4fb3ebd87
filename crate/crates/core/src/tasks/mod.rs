//! Synthetic annotated-speech analogs: corpus generation, rendering, a
//! rule-based annotation detector, F1 scoring and dataset files.

mod corpus;
mod detect;
mod io;
mod metrics;
mod spec;
mod toy;

pub use corpus::{
    generate_corpus, generate_utterance, parse_z_f, render_features, serialize_z_f, symbol_word, word_vocab,
    Annotation, Corpus, Utterance,
};
pub use detect::{detect_annotations, frame_energy, Detector};
pub use io::{
    read_dataset, read_features, write_dataset, write_features, ManifestRecord, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use metrics::{f1_micro, F1Report, Label, PrecisionRecall};
pub use spec::{BasePatterns, TaskKind, TaskSpec};
pub use toy::TwoModeTask;
