//! Monotonic interpolation aligner.
//!
//! Tokens are embedded and passed through a stack of masked dilated
//! convolutions whose normalisation layers are modulated by the speaker
//! embedding and latent. A small head predicts a non-negative length per
//! token; cumulative sums give token centres, and a Gaussian-kernel softmax
//! over the distance between each output step and every centre interpolates
//! the token features onto the output grid.

mod interp;
mod model;
mod tokens;

pub use interp::{
    interpolate, interpolate_backward, positions_backward, positions_from_lengths, Interpolation,
    Positions, MASKED_LOGIT,
};
pub use model::{
    Aligner, AlignerConfig, AlignerCotangent, AlignerOutput, AlignerTrace, EncodedTokens,
    OutputWindow, COND_DIM, DILATIONS,
};
pub use tokens::{Conditioning, TokenSequence, LATENT_DIM, SPEAKER_DIM};

#[cfg(test)]
mod tests;
