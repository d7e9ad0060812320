//! Desk-scale hybrid HMM-DNN speech-to-text toolkit.
//!
//! The pipeline mirrors a classical hybrid recognizer: a synthetic corpus with a
//! grapheme lexicon, MFCC-style features with speaker vectors, an HMM-GMM
//! baseline providing frame-to-state alignments, a deep CNN-TDNN-LSTM acoustic
//! model trained with cross-entropy and lattice-free MMI, Kneser-Ney and RNN-ME
//! language models, WFST decoding-graph construction, beam-search decoding with
//! lattice generation, N-best rescoring, and ROVER system combination.

pub mod corpus;
pub mod decoder;
pub mod eval;
pub mod features;
pub mod hmm;
pub mod lm;
pub mod nnet;
pub mod objectives;
pub mod pipeline;
pub mod wfst;
