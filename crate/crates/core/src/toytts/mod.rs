//! Synthetic tone-sequence task for end-to-end training of the aligner.
//!
//! Tokens are tones with fixed frequencies and durations. A generator made
//! of the aligner and a small decoder learns to render them from windows of
//! ground-truth audio.

pub mod checkpoint;
pub mod decoder;
pub mod eval;
pub mod generator;
pub mod task;
pub mod train;

pub use decoder::{DecoderConfig, ToyDecoder, MARGIN};
pub use generator::{Example, Generator, ModelConfig, Objective, Synthesis, TOY_SIGMA2};
pub use task::{
    id_symbol, preprocess_tokens, symbol_id, synthesize_ground_truth, GroundTruth, SubstitutionTable, ToyTask,
    SILENCE, SILENCE_SYMBOL,
};
pub use train::{cosine_learning_rate, sample_batch, sample_example, train, Adam, Ema, LossMode, TrainConfig, TrainOutcome};
pub use eval::{
    bench, distinct_step_counts, eval_durations, held_out_prediction_loss, histogram_csv, length_histogram, BenchReport,
    DurationReport, HeldOutLoss,
};
