//! Windowed multi-modal instances, stream segmentation, synthetic corpora, and file formats.

mod corpus;
mod instance;
mod segment;
pub mod synthetic;

pub use corpus::{
    label_counts, load_corpus, read_lines, write_jsonl, write_synthetic, Corpus, CorpusManifest, CorpusParts,
    WindowStats, CHAT_TAGS_FILE, CHAT_VOCAB_FILE, MANIFEST_FILE, TEST_FILE, TRAIN_FILE, TRANSCRIPT_TAGS_FILE,
    TRANSCRIPT_VOCAB_FILE,
};
pub use instance::{EventLabel, Instance, OUTSIDE_TAG, PAD};
pub use segment::{segment, AudioStream, ChatMessage, EventLog, LoggedEvent, TranscriptWindow};
pub use synthetic::{generate, source_label_probs, Difficulty, SyntheticConfig, SyntheticCorpus};
