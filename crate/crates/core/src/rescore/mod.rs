//! N-best rescoring, WER scoring, grid tuning and the end-to-end pipeline.

mod nbest;
pub mod pipeline;
mod wer;

use std::collections::HashSet;
use std::io;

use indexmap::IndexMap;
use log::warn;
use serde::Serialize;
use thiserror::Error;

pub use nbest::{load_references, parse_references, write_references, Hypothesis, NBestList};
pub use wer::{align, corpus_edits, EditCounts};

use crate::expansion::FullVocabLm;
use crate::ngram::NgramModel;

#[derive(Debug, Error)]
pub enum RescoreError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("utterance {utt}: duplicate rank {rank}")]
    DuplicateHypothesis { utt: String, rank: usize },
    #[error("utterance {0} appears twice")]
    DuplicateUtterance(String),
    #[error("utterance {0} has no hypotheses")]
    EmptyUtterance(String),
    #[error("utterance {0} has a non-finite score")]
    NonFiniteScore(String),
    #[error("no hypothesis for reference utterance {0}")]
    MissingHypothesis(String),
    #[error("tuning grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type ScoreError = Box<dyn std::error::Error + Send + Sync>;

/// Anything that assigns a natural-log probability to a whole sentence
/// (end-of-sentence included).
pub trait SentenceScorer {
    fn score_sentence(&self, words: &[String]) -> Result<f64, ScoreError>;
}

impl SentenceScorer for NgramModel {
    fn score_sentence(&self, words: &[String]) -> Result<f64, ScoreError> {
        Ok(self.sentence_log_prob(words))
    }
}

impl SentenceScorer for FullVocabLm<'_> {
    fn score_sentence(&self, words: &[String]) -> Result<f64, ScoreError> {
        Ok(self.sentence_log_prob(words)?)
    }
}

impl<F> SentenceScorer for F
where
    F: Fn(&[String]) -> Result<f64, ScoreError>,
{
    fn score_sentence(&self, words: &[String]) -> Result<f64, ScoreError> {
        self(words)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RescoreConfig {
    pub lm_scale: f64,
    pub word_insertion_penalty: f64,
}

impl Default for RescoreConfig {
    fn default() -> Self {
        RescoreConfig {
            lm_scale: 1.0,
            word_insertion_penalty: 0.0,
        }
    }
}

impl RescoreConfig {
    pub fn combined(&self, h: &Hypothesis) -> f64 {
        h.acoustic_score + self.lm_scale * h.lm_score + self.word_insertion_penalty * h.words.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtteranceFailure {
    pub utterance: String,
    pub error: String,
}

/// A list whose LM scores come from the rescoring LM, except for utterances
/// that failed, which are left exactly as they were.
#[derive(Debug, Clone, PartialEq)]
pub struct RescoreOutcome {
    pub list: NBestList,
    pub failures: Vec<UtteranceFailure>,
}

/// Replaces every hypothesis's LM score with the log-probability under `lm`.
/// Order is unchanged.
pub fn score_nbest(list: &NBestList, lm: &dyn SentenceScorer) -> RescoreOutcome {
    let mut out = list.clone();
    let mut failures = Vec::new();
    for (utt, hyps) in out.utterances_mut() {
        let scores: Result<Vec<f64>, ScoreError> = hyps.iter().map(|h| lm.score_sentence(&h.words)).collect();
        match scores {
            Ok(scores) => {
                for (h, s) in hyps.iter_mut().zip(scores) {
                    h.lm_score = s;
                }
            }
            Err(e) => {
                warn!("utterance {utt}: rescoring failed, keeping original order: {e}");
                failures.push(UtteranceFailure {
                    utterance: utt.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    RescoreOutcome { list: out, failures }
}

/// Sorts each successfully scored utterance by combined score, descending and
/// stable.
pub fn rerank(scored: &RescoreOutcome, cfg: &RescoreConfig) -> RescoreOutcome {
    let failed: HashSet<&str> = scored.failures.iter().map(|f| f.utterance.as_str()).collect();
    let mut out = scored.clone();
    for (utt, hyps) in out.list.utterances_mut() {
        if failed.contains(utt.as_str()) {
            continue;
        }
        let mut keyed: Vec<(f64, Hypothesis)> = hyps.drain(..).map(|h| (cfg.combined(&h), h)).collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
        hyps.extend(keyed.into_iter().map(|(_, h)| h));
    }
    out
}

pub fn rescore(list: &NBestList, lm: &dyn SentenceScorer, cfg: &RescoreConfig) -> RescoreOutcome {
    rerank(&score_nbest(list, lm), cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneGrid {
    pub lm_scales: Vec<f64>,
    pub penalties: Vec<f64>,
}

impl Default for TuneGrid {
    fn default() -> Self {
        TuneGrid {
            lm_scales: (1..=10).map(|i| 2.0 * i as f64).collect(),
            penalties: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneResult {
    pub config: RescoreConfig,
    pub edits: EditCounts,
    pub wer: f64,
}

/// Grid search over (scale, penalty) minimizing corpus WER on a list whose LM
/// scores are already filled in. Ties go to the earliest grid point.
pub fn tune(
    scored: &RescoreOutcome,
    references: &IndexMap<String, Vec<String>>,
    grid: &TuneGrid,
) -> Result<TuneResult, RescoreError> {
    let mut best: Option<TuneResult> = None;
    for &lm_scale in &grid.lm_scales {
        for &word_insertion_penalty in &grid.penalties {
            let config = RescoreConfig {
                lm_scale,
                word_insertion_penalty,
            };
            let ranked = rerank(scored, &config);
            let edits = corpus_edits(references, &ranked.list.best())?;
            let wer = edits.wer_percent();
            if best.as_ref().is_none_or(|b| edits.errors() < b.edits.errors()) {
                best = Some(TuneResult { config, edits, wer });
            }
        }
    }
    best.ok_or(RescoreError::EmptyGrid)
}
