//! Tokenization, vocabulary, corpus ingestion, and the synthetic
//! cross-evidence task generator.

pub mod corpus;
pub mod synth;
pub mod tokenize;
pub mod vocab;

pub use corpus::{
    example_to_json, load_corpus, parse_line, save_corpus, Example, IngestReport,
    DEFAULT_MAX_PASSAGE_LEN,
};
pub use synth::{gen_synthetic, SynthConfig};
pub use tokenize::{detokenize, tokenize};
pub use vocab::{Vocab, PAD, UNK};
