//! Two-stage reading comprehension over multiple passages.
//!
//! The pipeline extracts answer-span candidates from every passage, fuses
//! evidence across candidates through a learned correlation matrix, selects
//! the final answer, and trains both stages jointly with a policy-gradient
//! objective. All model math runs on the in-crate reverse-mode tape, so
//! every gradient is checkable against finite differences.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod extraction;
pub mod rl;
pub mod selection;

pub use autodiff::{BiLstm, GradCheckReport, Param, RmsProp, Tape, Tensor, Var};
pub use checkpoint::{derive_rng, stable_hash, TrainState, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use data::{
    gen_synthetic, load_corpus, save_corpus, tokenize, Example, IngestReport, SynthConfig, Vocab,
    DEFAULT_MAX_PASSAGE_LEN,
};
pub use error::{Error, Result};
pub use eval::{
    attention_csv, evaluate, evaluate_extraction_only, predict, report_csv, report_json,
    run_ablation, run_k_sweep, variant_table_csv, EvalReport, Prediction, VariantRow,
};
pub use extraction::{CandidateDumpEntry, CandidateSet, ExtractionParams, Span};
pub use rl::{
    joint_train, pretrain_extract, pretrain_select, records_jsonl, reward, token_f1,
    train_full_pipeline, StepRecord, TrainConfig, TrainOutcome,
};
pub use selection::{FeatureFlags, SelectionParams};
