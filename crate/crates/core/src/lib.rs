//! # eoslab
//!
//! A small sequence-to-sequence laboratory for measuring why
//! likelihood-trained translation models put so much probability on the
//! empty output.
//!
//! The crate covers the whole loop at desk scale:
//!
//! ```text
//! corpus     synthetic parallel data with tunable target-length noise,
//!            the length model Q(l|m), its perplexity, percentile filtering
//! encoding   single-EoS and per-length ([EOS-l]) vocabularies, batches
//! model      tiny pre-norm encoder-decoder transformer with tied output
//!            embeddings, label-smoothed loss, hand-written backprop, Adam
//! decode     sequence scoring, greedy / beam / exhaustive decoding,
//!            the empty-preference test
//! metrics    length ratio, empty ratio, first-position statistics, ...
//! harness    config-driven gen / train / eval / filter / report pipeline
//! ```
//!
//! Runnable walkthroughs for each piece live in `examples/`.

pub mod corpus;
pub mod decode;
pub mod encoding;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rng;

pub use error::{Error, Result};

/// Token id shared by corpora, vocabularies and the model.
pub type TokenId = u32;
