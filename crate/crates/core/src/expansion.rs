//! Post-hoc vocabulary expansion of a trained shortlist LM.
//!
//! New words get input and output embedding columns (and an output-bias
//! entry) synthesized as the mean of the columns of similar in-shortlist
//! candidates. The LSTM layers and every existing column stay untouched, so
//! the logits of pre-existing words are bitwise unchanged and each new
//! word's logit is the (weighted) mean of its candidates' logits.
//!
//! [`FullVocabLm`] turns the shortlist softmax into a distribution over the
//! full vocabulary by sharing the `<unk>` mass among words that have no
//! explicit column, either uniformly or in proportion to an n-gram model.

use std::collections::{BTreeSet, HashSet};

use serde::Serialize;
use thiserror::Error;

use crate::linalg::Matrix;
use crate::ngram::{NgramError, NgramModel};
use crate::rescore::NBestList;
use crate::rnnlm::{softmax, RnnError, RnnLm};
use crate::skipgram::WordEmbeddings;
use crate::vocab::{Lookup, VocabError, WordId, BOS, BOS_ID, EOS_ID, UNK, UNK_ID};

#[derive(Debug, Error)]
pub enum ExpansionError {
    #[error("word {0:?} is already modeled explicitly or planned twice")]
    DuplicateWord(String),
    #[error("candidate id {id} for {word:?} is outside the {columns} existing columns")]
    CandidateOutOfRange { word: String, id: WordId, columns: usize },
    #[error("no candidates for {0:?}")]
    NoCandidates(String),
    #[error("candidate weights must be finite, non-negative and not all zero")]
    BadWeights,
    #[error("vectors to combine have different lengths")]
    DimensionMismatch,
    #[error("the ngram policy needs an n-gram model")]
    MissingNgram,
    #[error("word {0:?} is outside the full vocabulary")]
    OutsideVocabulary(String),
    #[error(transparent)]
    Rnn(#[from] RnnError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Ngram(#[from] NgramError),
}

/// Unique words from the top-`n` hypotheses of every utterance that are not
/// in the shortlist, sorted lexicographically.
pub fn extract_oos_words(nbest: &NBestList, shortlist: &crate::vocab::Vocabulary, n: usize) -> Vec<String> {
    let mut out = BTreeSet::new();
    for hyps in nbest.utterances().values() {
        for h in hyps.iter().take(n.max(1)) {
            for w in &h.words {
                if !shortlist.in_shortlist(w) {
                    out.insert(w.clone());
                }
            }
        }
    }
    out.into_iter().collect()
}

/// Weighted mean Σ m·v / Σ m. With unit weights this is the plain mean.
pub fn synthesize_vector(vectors: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>, ExpansionError> {
    let first = vectors.first().ok_or(ExpansionError::DimensionMismatch)?;
    if weights.len() != vectors.len() {
        return Err(ExpansionError::DimensionMismatch);
    }
    if vectors.iter().any(|v| v.len() != first.len()) {
        return Err(ExpansionError::DimensionMismatch);
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(ExpansionError::BadWeights);
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(ExpansionError::BadWeights);
    }
    let mut out = vec![0.0; first.len()];
    for (v, &m) in vectors.iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += m * x;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Every candidate weighs 1 (plain mean).
    Uniform,
    /// Candidates weigh by cosine similarity, clamped at zero.
    Similarity,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlannedWord {
    pub word: String,
    /// (in-shortlist id, weight m_s)
    pub candidates: Vec<(WordId, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CandidatePlan {
    pub words: Vec<PlannedWord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    NotInEmbeddings,
    AlreadyInShortlist,
    NoCandidates,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedWord {
    pub word: String,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateEntry {
    pub word: String,
    pub id: WordId,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpandedWord {
    pub word: String,
    pub id: WordId,
    pub candidates: Vec<CandidateEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpansionReport {
    pub expanded: Vec<ExpandedWord>,
    pub skipped: Vec<SkippedWord>,
    pub shortlist_before: usize,
    pub shortlist_after: usize,
    pub full_vocab_size: usize,
    pub d_s: usize,
    pub d_h: usize,
    pub layers: usize,
}

/// Picks the top-`k` in-shortlist neighbours of each requested word.
/// Words that cannot be planned are returned as skips.
pub fn plan_candidates(
    embeddings: &WordEmbeddings,
    model: &RnnLm,
    words: &[String],
    k: usize,
    weighting: Weighting,
) -> (CandidatePlan, Vec<SkippedWord>) {
    let vocab = model.vocab();
    let mut plan = CandidatePlan::default();
    let mut skipped = Vec::new();
    let mut seen = HashSet::new();
    for word in words {
        let skip = |reason| SkippedWord {
            word: word.clone(),
            reason,
        };
        if vocab.in_shortlist(word) || !seen.insert(word.as_str()) {
            skipped.push(skip(SkipReason::AlreadyInShortlist));
            continue;
        }
        let neighbors = match embeddings.nearest_in_shortlist(word, vocab, k) {
            Ok(n) => n,
            Err(_) => {
                skipped.push(skip(SkipReason::NotInEmbeddings));
                continue;
            }
        };
        let candidates: Vec<(WordId, f64)> = neighbors
            .iter()
            .map(|n| match weighting {
                Weighting::Uniform => (n.id, 1.0),
                Weighting::Similarity => (n.id, n.similarity.max(0.0)),
            })
            .collect();
        if candidates.is_empty() || candidates.iter().all(|(_, w)| *w == 0.0) {
            skipped.push(skip(SkipReason::NoCandidates));
            continue;
        }
        plan.words.push(PlannedWord {
            word: word.clone(),
            candidates,
        });
    }
    (plan, skipped)
}

/// Appends one synthesized column to S and U (and one bias entry) per planned
/// word. Returns a new model; the input is never modified.
pub fn expand_model(model: &RnnLm, plan: &CandidatePlan) -> Result<(RnnLm, ExpansionReport), ExpansionError> {
    let vocab = model.vocab();
    let columns = model.columns();
    let mut seen = HashSet::new();
    for p in &plan.words {
        if vocab.in_shortlist(&p.word) || !seen.insert(p.word.as_str()) {
            return Err(ExpansionError::DuplicateWord(p.word.clone()));
        }
        if p.candidates.is_empty() {
            return Err(ExpansionError::NoCandidates(p.word.clone()));
        }
        if let Some(&(id, _)) = p.candidates.iter().find(|(id, _)| *id as usize >= columns) {
            return Err(ExpansionError::CandidateOutOfRange {
                word: p.word.clone(),
                id,
                columns,
            });
        }
    }

    let mut input_emb: Matrix = model.input_embeddings().clone();
    let mut output_emb: Matrix = model.output_embeddings().clone();
    let mut bias = model.output_bias().to_vec();
    for p in &plan.words {
        let ids: Vec<usize> = p.candidates.iter().map(|(id, _)| *id as usize).collect();
        let weights: Vec<f64> = p.candidates.iter().map(|(_, w)| *w).collect();
        let s_cols: Vec<&[f64]> = ids.iter().map(|&c| model.input_embeddings().col(c)).collect();
        let u_cols: Vec<&[f64]> = ids.iter().map(|&c| model.output_embeddings().col(c)).collect();
        let b_vals: Vec<[f64; 1]> = ids.iter().map(|&c| [model.output_bias()[c]]).collect();
        let b_refs: Vec<&[f64]> = b_vals.iter().map(|b| b.as_slice()).collect();
        input_emb.push_col(&synthesize_vector(&s_cols, &weights)?);
        output_emb.push_col(&synthesize_vector(&u_cols, &weights)?);
        bias.push(synthesize_vector(&b_refs, &weights)?[0]);
    }

    let new_words: Vec<String> = plan.words.iter().map(|p| p.word.clone()).collect();
    let new_vocab = vocab.with_shortlist_extended(&new_words)?;
    let expanded = RnnLm::from_parts(
        new_vocab,
        input_emb,
        model.layers().to_vec(),
        output_emb,
        bias,
    )?;

    let dims = model.dims();
    let report = ExpansionReport {
        expanded: plan
            .words
            .iter()
            .enumerate()
            .map(|(i, p)| ExpandedWord {
                word: p.word.clone(),
                id: (columns + i) as WordId,
                candidates: p
                    .candidates
                    .iter()
                    .map(|&(id, weight)| CandidateEntry {
                        word: vocab.words()[id as usize].clone(),
                        id,
                        weight,
                    })
                    .collect(),
            })
            .collect(),
        skipped: Vec::new(),
        shortlist_before: columns,
        shortlist_after: expanded.columns(),
        full_vocab_size: expanded.vocab().len(),
        d_s: dims.d_s,
        d_h: dims.d_h,
        layers: dims.layers,
    };
    Ok((expanded, report))
}

/// Candidate selection followed by [`expand_model`]; skipped words are
/// recorded in the report.
pub fn expand_with_embeddings(
    model: &RnnLm,
    embeddings: &WordEmbeddings,
    words: &[String],
    k: usize,
    weighting: Weighting,
) -> Result<(RnnLm, ExpansionReport), ExpansionError> {
    let (plan, skipped) = plan_candidates(embeddings, model, words, k, weighting);
    let (expanded, mut report) = expand_model(model, &plan)?;
    report.skipped = skipped;
    Ok((expanded, report))
}

/// How probability is assigned to words without an explicit output column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UnkPolicy {
    /// Every non-explicit word gets the full `<unk>` probability.
    ShortlistOnly,
    /// `<unk>` mass shared uniformly: P(<unk>) / (|V \ V_explicit| + 1).
    Uniform,
    /// `<unk>` mass shared in proportion to n-gram probabilities.
    Ngram,
}

impl std::str::FromStr for UnkPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shortlist" | "shortlist-only" => Ok(UnkPolicy::ShortlistOnly),
            "uniform" => Ok(UnkPolicy::Uniform),
            "ngram" => Ok(UnkPolicy::Ngram),
            other => Err(format!("unknown policy {other:?} (shortlist|uniform|ngram)")),
        }
    }
}

/// Full-vocabulary view of a shortlist LM. The full vocabulary V is the
/// model's own vocabulary; the explicit set is its shortlist (which grows on
/// expansion).
#[derive(Debug, Clone)]
pub struct FullVocabLm<'a> {
    model: &'a RnnLm,
    policy: UnkPolicy,
    ngram: Option<&'a NgramModel>,
    /// n-gram ids of predictable words with no explicit RNN column.
    ngram_oos: Vec<WordId>,
}

impl<'a> FullVocabLm<'a> {
    pub fn new(model: &'a RnnLm, policy: UnkPolicy, ngram: Option<&'a NgramModel>) -> Result<Self, ExpansionError> {
        if policy == UnkPolicy::Ngram && ngram.is_none() {
            return Err(ExpansionError::MissingNgram);
        }
        let ngram_oos = ngram
            .map(|ng| {
                ng.vocab()
                    .words()
                    .iter()
                    .enumerate()
                    .filter(|(id, w)| *id as WordId != BOS_ID && !model.vocab().in_shortlist(w))
                    .map(|(id, _)| id as WordId)
                    .collect()
            })
            .unwrap_or_default();
        Ok(FullVocabLm {
            model,
            policy,
            ngram,
            ngram_oos,
        })
    }

    pub fn model(&self) -> &RnnLm {
        self.model
    }

    pub fn policy(&self) -> UnkPolicy {
        self.policy
    }

    /// |V \ V_explicit| + 1
    pub fn uniform_divisor(&self) -> f64 {
        (self.model.vocab().len() - self.model.columns() + 1) as f64
    }

    fn ngram_ids(ng: &NgramModel, context: &[&str]) -> Vec<WordId> {
        context.iter().map(|w| ng.vocab().encode(w, Lookup::Full)).collect()
    }

    /// β(w | context) = P_N(w|ctx) / Σ_{w' ∉ V_explicit} P_N(w'|ctx)
    pub fn ngram_share(&self, word: &str, context: &[&str]) -> Result<f64, ExpansionError> {
        let ng = self.ngram.ok_or(ExpansionError::MissingNgram)?;
        let ctx = Self::ngram_ids(ng, context);
        let id = match ng.vocab().id(word) {
            Some(id) => id,
            None if word == UNK => UNK_ID,
            None => return Err(ExpansionError::OutsideVocabulary(word.to_string())),
        };
        let num = ng.prob(id, &ctx)?;
        let mut denom = 0.0;
        for &w in &self.ngram_oos {
            denom += ng.prob(w, &ctx)?;
        }
        Ok(num / denom)
    }

    /// P̃(word | h) given the shortlist softmax `probs` at history h.
    /// `context` is the word history starting with `<s>` (used by the ngram
    /// policy only).
    pub fn full_vocab_prob(&self, probs: &[f64], word: &str, context: &[&str]) -> Result<f64, ExpansionError> {
        let vocab = self.model.vocab();
        let id = vocab
            .id(word)
            .ok_or_else(|| ExpansionError::OutsideVocabulary(word.to_string()))?;
        if vocab.is_shortlist_id(id) {
            return Ok(probs[id as usize]);
        }
        let unk = probs[UNK_ID as usize];
        Ok(match self.policy {
            UnkPolicy::ShortlistOnly => unk,
            UnkPolicy::Uniform => unk / self.uniform_divisor(),
            UnkPolicy::Ngram => self.ngram_share(word, context)? * unk,
        })
    }

    /// Probability for a token outside V: the reserved residual share of the
    /// `<unk>` mass (the "+1" slot for uniform; P_N(<unk>)-proportional for ngram).
    pub fn residual_unknown_prob(&self, probs: &[f64], context: &[&str]) -> Result<f64, ExpansionError> {
        let unk = probs[UNK_ID as usize];
        Ok(match self.policy {
            UnkPolicy::ShortlistOnly => unk,
            UnkPolicy::Uniform => unk / self.uniform_divisor(),
            UnkPolicy::Ngram => self.ngram_share(UNK, context)? * unk,
        })
    }

    /// Natural-log probability of each word and the closing `</s>`. Words
    /// without an explicit column are fed to the network as `<unk>`.
    pub fn score_words<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<f64>, ExpansionError> {
        let vocab = self.model.vocab();
        let mut state = self.model.initial_state();
        let mut input = BOS_ID;
        let mut history: Vec<&str> = vec![BOS];
        let mut out = Vec::with_capacity(words.len() + 1);
        for i in 0..=words.len() {
            let step = self.model.forward_step(input, &state, None)?;
            let probs = softmax(&step.logits);
            state = step.state;
            if i == words.len() {
                out.push(probs[EOS_ID as usize].ln());
                break;
            }
            let w = words[i].as_ref();
            let p = if vocab.contains(w) {
                self.full_vocab_prob(&probs, w, &history)?
            } else {
                self.residual_unknown_prob(&probs, &history)?
            };
            out.push(p.ln());
            input = vocab.encode(w, Lookup::ShortlistOnly);
            history.push(w);
        }
        Ok(out)
    }

    pub fn sentence_log_prob<S: AsRef<str>>(&self, words: &[S]) -> Result<f64, ExpansionError> {
        Ok(self.score_words(words)?.iter().sum())
    }
}
