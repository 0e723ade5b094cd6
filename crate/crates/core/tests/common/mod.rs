#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use velm::expansion::{expand_model, CandidatePlan, FullVocabLm, PlannedWord, UnkPolicy};
use velm::ngram::NgramModel;
use velm::rnnlm::{
    batch_loss_and_gradient, softmax, DropoutMasks, ModelDims, RnnLm, RnnState, StreamStep,
};
use velm::vocab::{Corpus, Vocabulary, WordId, BOS, EOS, UNK};

/// Interpolated modified Kneser-Ney bigram model written directly from the
/// textbook formulas over strings, sharing nothing with the library.
pub struct KnBigramOracle {
    bigram: HashMap<(String, String), f64>,
    context_total: HashMap<String, f64>,
    context_types: HashMap<String, [f64; 3]>,
    continuation: HashMap<String, f64>,
    continuation_total: f64,
    d_bigram: [f64; 3],
    d_unigram: [f64; 3],
    predictable: f64,
}

fn chen_goodman(counts: impl Iterator<Item = f64>) -> [f64; 3] {
    let mut n = [0.0f64; 4];
    for c in counts {
        if (1.0..=4.0).contains(&c) {
            n[c as usize - 1] += 1.0;
        }
    }
    if n.contains(&0.0) {
        return [0.5; 3];
    }
    let y = n[0] / (n[0] + 2.0 * n[1]);
    let d = [
        1.0 - 2.0 * y * n[1] / n[0],
        2.0 - 3.0 * y * n[2] / n[1],
        3.0 - 4.0 * y * n[3] / n[2],
    ];
    if d[0] > 0.0 && d[0] < 1.0 && d[1] > 0.0 && d[1] < 2.0 && d[2] > 0.0 && d[2] < 3.0 {
        d
    } else {
        [0.5; 3]
    }
}

fn discount(d: &[f64; 3], c: f64) -> f64 {
    if c >= 3.0 {
        d[2]
    } else if c >= 2.0 {
        d[1]
    } else if c >= 1.0 {
        d[0]
    } else {
        0.0
    }
}

impl KnBigramOracle {
    /// `vocab` lists the full vocabulary, reserved tokens included.
    pub fn new(sentences: &[Vec<String>], vocab: &[String]) -> Self {
        let known: HashSet<&String> = vocab.iter().collect();
        let mut bigram: HashMap<(String, String), f64> = HashMap::new();
        for s in sentences {
            let mut prev = BOS.to_string();
            for w in s.iter().map(|w| if known.contains(w) { w.clone() } else { UNK.to_string() }).chain([EOS.to_string()]) {
                *bigram.entry((prev.clone(), w.clone())).or_default() += 1.0;
                prev = w;
            }
        }
        let mut context_total: HashMap<String, f64> = HashMap::new();
        let mut context_types: HashMap<String, [f64; 3]> = HashMap::new();
        let mut continuation: HashMap<String, f64> = HashMap::new();
        let d_bigram = chen_goodman(bigram.values().copied());
        for ((u, w), &c) in &bigram {
            *context_total.entry(u.clone()).or_default() += c;
            let t = context_types.entry(u.clone()).or_default();
            t[(c.min(3.0) as usize) - 1] += 1.0;
            *continuation.entry(w.clone()).or_default() += 1.0;
        }
        let d_unigram = chen_goodman(continuation.values().copied());
        let continuation_total = continuation.values().sum();
        KnBigramOracle {
            bigram,
            context_total,
            context_types,
            continuation,
            continuation_total,
            d_bigram,
            d_unigram,
            predictable: (vocab.len() - 1) as f64,
        }
    }

    pub fn unigram(&self, w: &str) -> f64 {
        let leftover: f64 = self.continuation.values().map(|&c| discount(&self.d_unigram, c)).sum();
        let c = self.continuation.get(w).copied().unwrap_or(0.0);
        (c - discount(&self.d_unigram, c)).max(0.0) / self.continuation_total
            + leftover / self.continuation_total / self.predictable
    }

    pub fn prob(&self, w: &str, u: &str) -> f64 {
        let Some(&total) = self.context_total.get(u) else {
            return self.unigram(w);
        };
        let c = self.bigram.get(&(u.to_string(), w.to_string())).copied().unwrap_or(0.0);
        let types = self.context_types[u];
        let gamma = (self.d_bigram[0] * types[0] + self.d_bigram[1] * types[1] + self.d_bigram[2] * types[2]) / total;
        (c - discount(&self.d_bigram, c)).max(0.0) / total + gamma * self.unigram(w)
    }
}

/// Largest |P_lib − P_oracle| over every (context, word) pair of the vocabulary.
pub fn kn_oracle_max_error(corpus: &Corpus, vocab: &Vocabulary) -> f64 {
    let model = NgramModel::train(corpus, vocab, 2).expect("train");
    let oracle = KnBigramOracle::new(corpus.sentences(), vocab.words());
    let mut worst = 0.0f64;
    for (u_id, u) in vocab.words().iter().enumerate() {
        if u == EOS {
            continue;
        }
        for (w_id, w) in vocab.words().iter().enumerate() {
            if w == BOS {
                continue;
            }
            let lib = model.prob(w_id as WordId, &[u_id as WordId]).unwrap();
            worst = worst.max((lib - oracle.prob(w, u)).abs());
        }
    }
    worst
}

/// |a − n| / max(|a|, |n|, 1e-6)
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares BPTT gradients with central differences for every parameter.
/// Returns the largest relative error.
pub fn gradient_check(
    model: &RnnLm,
    streams: &[(Vec<StreamStep>, RnnState)],
    masks: Option<&[Vec<DropoutMasks>]>,
    step: f64,
) -> f64 {
    let (_, grads, _) = batch_loss_and_gradient(model, streams, masks).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (t, grad) in analytic.iter().enumerate() {
        for (i, &g) in grad.iter().enumerate() {
            let orig = probe.parameters()[t][i];
            probe.parameters_mut()[t][i] = orig + step;
            let plus = batch_loss_and_gradient(&probe, streams, masks).unwrap().0;
            probe.parameters_mut()[t][i] = orig - step;
            let minus = batch_loss_and_gradient(&probe, streams, masks).unwrap().0;
            probe.parameters_mut()[t][i] = orig;
            worst = worst.max(relative_error(g, (plus - minus) / (2.0 * step)));
        }
    }
    worst
}

pub fn random_state(dims: &ModelDims, rng: &mut impl Rng) -> RnnState {
    let mut s = RnnState::zeros(dims.layers, dims.d_h);
    for l in 0..dims.layers {
        s.h[l].iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        s.c[l].iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
    }
    s
}

/// Words `w00`, `w01`, … with strictly decreasing frequency.
pub fn ranked_corpus(n: usize) -> Corpus {
    let mut sentences = Vec::new();
    for i in 0..n {
        for _ in 0..(n - i) {
            sentences.push(vec![format!("w{i:02}")]);
        }
    }
    Corpus::new(sentences)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceOutcome {
    pub original_logits_bitwise_equal: bool,
    pub states_bitwise_equal: bool,
    pub max_new_logit_error: f64,
    pub max_ratio_error: f64,
}

/// Random model and plan; checks logit preservation, new-word linearity and
/// softmax-ratio preservation over `states` random states.
pub fn invariance_suite(
    dims: ModelDims,
    shortlist: usize,
    new_words: usize,
    max_candidates: usize,
    states: usize,
    seed: u64,
) -> InvarianceOutcome {
    let content = shortlist - 3 + new_words;
    let vocab = Vocabulary::build(&ranked_corpus(content), shortlist, content + 3).unwrap();
    let model = RnnLm::random(vocab.clone(), dims, 0.5, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let plan = CandidatePlan {
        words: (0..new_words)
            .map(|i| PlannedWord {
                word: vocab.words()[shortlist + i].clone(),
                candidates: (0..rng.gen_range(1..=max_candidates))
                    .map(|_| (rng.gen_range(3..shortlist) as WordId, rng.gen_range(0.1..2.0)))
                    .collect(),
            })
            .collect(),
    };
    let (expanded, _) = expand_model(&model, &plan).unwrap();

    let mut out = InvarianceOutcome {
        original_logits_bitwise_equal: true,
        states_bitwise_equal: true,
        max_new_logit_error: 0.0,
        max_ratio_error: 0.0,
    };
    for _ in 0..states {
        let state = random_state(&dims, &mut rng);
        let input = rng.gen_range(0..shortlist) as WordId;
        let before = model.forward_step(input, &state, None).unwrap();
        let after = expanded.forward_step(input, &state, None).unwrap();
        out.states_bitwise_equal &= before.state == after.state;
        out.original_logits_bitwise_equal &= before
            .logits
            .iter()
            .zip(&after.logits)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        for (i, p) in plan.words.iter().enumerate() {
            let total: f64 = p.candidates.iter().map(|(_, m)| m).sum();
            let mean: f64 = p
                .candidates
                .iter()
                .map(|&(c, m)| m * before.logits[c as usize])
                .sum::<f64>()
                / total;
            let err = (after.logits[shortlist + i] - mean).abs();
            out.max_new_logit_error = out.max_new_logit_error.max(err);
        }
        let (pb, pa) = (softmax(&before.logits), softmax(&after.logits));
        for _ in 0..20 {
            let (a, b) = (rng.gen_range(1..shortlist), rng.gen_range(1..shortlist));
            let rb = pb[a] / pb[b];
            let ra = pa[a] / pa[b];
            out.max_ratio_error = out.max_ratio_error.max((ra / rb - 1.0).abs());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationOutcome {
    /// |Σ_{V\{<unk>}} P̃ + residual − 1| under the uniform policy, worst case.
    pub uniform_error: f64,
    /// |Σ_{V\{<unk>}} P̃ − 1| under the ngram policy, worst case.
    pub ngram_error: f64,
    /// Same two checks on the expanded model.
    pub expanded_uniform_error: f64,
    pub expanded_ngram_error: f64,
    /// |Σ_w P_N(w|h) − 1| for the toy bigram, worst case.
    pub bigram_error: f64,
    pub contexts: usize,
}

fn accounting_errors(lm_model: &RnnLm, ngram: &NgramModel, histories: &[Vec<String>]) -> (f64, f64) {
    let uniform = FullVocabLm::new(lm_model, UnkPolicy::Uniform, None).unwrap();
    let with_ngram = FullVocabLm::new(lm_model, UnkPolicy::Ngram, Some(ngram)).unwrap();
    let vocab = lm_model.vocab();
    let (mut worst_u, mut worst_n) = (0.0f64, 0.0f64);
    for history in histories {
        let mut state = lm_model.initial_state();
        for w in history {
            let id = vocab.encode(w, velm::vocab::Lookup::ShortlistOnly);
            state = lm_model.forward_step(id, &state, None).unwrap().state;
        }
        let probs = softmax(&lm_model.logits_for_hidden(state.top()));
        let ctx: Vec<&str> = history.iter().map(String::as_str).collect();
        let (mut su, mut sn) = (0.0, 0.0);
        for w in vocab.words() {
            if w == BOS || w == UNK {
                continue;
            }
            su += uniform.full_vocab_prob(&probs, w, &ctx).unwrap();
            sn += with_ngram.full_vocab_prob(&probs, w, &ctx).unwrap();
        }
        su += uniform.residual_unknown_prob(&probs, &ctx).unwrap();
        worst_u = worst_u.max((su - 1.0).abs());
        worst_n = worst_n.max((sn - 1.0).abs());
    }
    (worst_u, worst_n)
}

/// Exhaustive full-vocabulary sums on a 10-word vocabulary (3 reserved, 7
/// content words, shortlist of 6) with a trained toy bigram model, before
/// and after expanding two tail words.
pub fn normalization_suite(seed: u64) -> NormalizationOutcome {
    let corpus = Corpus::from_text(
        "a b c a d\nb a e f\nc c a b g\na d e\nf g a b\nb c d e f g\na a b",
    );
    let vocab = Vocabulary::build(&corpus, 6, 10).unwrap();
    assert_eq!(vocab.len(), 10);
    let ngram = NgramModel::train(&corpus, &vocab, 2).unwrap();
    let dims = ModelDims { layers: 2, d_s: 4, d_h: 5 };
    let model = RnnLm::random(vocab.clone(), dims, 0.8, seed);

    // Every one- and two-word history over V (bigram contexts exhaustively).
    let mut histories = vec![vec![BOS.to_string()]];
    for a in vocab.words() {
        if a == BOS || a == EOS {
            continue;
        }
        histories.push(vec![BOS.to_string(), a.clone()]);
        for b in vocab.words() {
            if b != BOS && b != EOS {
                histories.push(vec![BOS.to_string(), a.clone(), b.clone()]);
            }
        }
    }

    let mut bigram_error = 0.0f64;
    for u in 0..vocab.len() as WordId {
        let s: f64 = (0..vocab.len() as WordId)
            .filter(|&w| w != velm::vocab::BOS_ID)
            .map(|w| ngram.prob(w, &[u]).unwrap())
            .sum();
        bigram_error = bigram_error.max((s - 1.0).abs());
    }

    let (uniform_error, ngram_error) = accounting_errors(&model, &ngram, &histories);
    let tail: Vec<String> = vocab.words()[6..8].to_vec();
    let plan = CandidatePlan {
        words: vec![
            PlannedWord {
                word: tail[0].clone(),
                candidates: vec![(3, 1.0), (4, 1.0)],
            },
            PlannedWord {
                word: tail[1].clone(),
                candidates: vec![(5, 0.3)],
            },
        ],
    };
    let (expanded, _) = expand_model(&model, &plan).unwrap();
    let (expanded_uniform_error, expanded_ngram_error) = accounting_errors(&expanded, &ngram, &histories);
    NormalizationOutcome {
        uniform_error,
        ngram_error,
        expanded_uniform_error,
        expanded_ngram_error,
        bigram_error,
        contexts: histories.len(),
    }
}

/// A 12-token stream over a 6-word vocabulary crossing one sentence boundary.
pub fn gradient_fixture(seed: u64) -> (RnnLm, Vec<StreamStep>) {
    let corpus = Corpus::from_text("x y z x\ny z");
    let vocab = Vocabulary::build(&corpus, 6, 6).unwrap();
    let model = RnnLm::random(vocab.clone(), ModelDims { layers: 2, d_s: 3, d_h: 4 }, 0.5, seed);
    let ids = |s: &str| -> Vec<WordId> { s.split(' ').map(|w| vocab.id(w).unwrap()).collect() };
    let mut steps = Vec::new();
    for sentence in [ids("x y z x z y x"), ids("z y x")] {
        let mut prev = velm::vocab::BOS_ID;
        for (i, &w) in sentence.iter().chain([velm::vocab::EOS_ID].iter()).enumerate() {
            steps.push(StreamStep {
                input: prev,
                target: w,
                reset: i == 0,
            });
            prev = w;
        }
    }
    assert_eq!(steps.len(), 12);
    (model, steps)
}
