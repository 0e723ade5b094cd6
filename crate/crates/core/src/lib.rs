//! Shortlist LSTM language modelling with post-hoc vocabulary expansion.
//!
//! A word-level LSTM is trained over the most frequent words only. Out-of-shortlist
//! words found in recognizer N-best lists are later given output and input columns
//! synthesized from their skip-gram nearest neighbours inside the shortlist, with
//! no retraining. Kneser-Ney n-grams serve as the baseline, and N-best rescoring
//! measures the effect on word error rate.

pub mod expansion;
pub mod linalg;
pub mod ngram;
pub mod rescore;
pub mod rnnlm;
pub mod skipgram;
pub mod synth;
pub mod vocab;
