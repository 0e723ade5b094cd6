//! Synthetic template-grammar corpus with matching N-best lists.
//!
//! Content words fall into classes that fill fixed template slots, so words in
//! one class share their contexts exactly. Each class has a few common members
//! and a tail of rare ones; with a shortlist somewhat smaller than the
//! vocabulary, the rare members fall outside it while their common classmates
//! remain inside as expansion candidates.
//!
//! N-best lists are made by corrupting reference sentences with substitutions
//! (drawn from fixed per-word confusion sets), deletions, insertions and word
//! fragments. The acoustic score falls with the number of edits plus bounded
//! uniform noise. Hypotheses containing a fragment always rank below
//! fragment-free ones.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use indexmap::IndexMap;
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::rescore::{write_references, Hypothesis, NBestList};
use crate::vocab::Corpus;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq)]
pub struct GrammarConfig {
    pub function_words: usize,
    pub classes: usize,
    pub class_size: usize,
    /// Members per class drawn with weight 1; the rest use `rare_weight`.
    pub common_per_class: usize,
    pub rare_weight: f64,
    pub templates: usize,
    pub seed: u64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            function_words: 20,
            classes: 24,
            class_size: 20,
            common_per_class: 11,
            rare_weight: 0.35,
            templates: 16,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Function(usize),
    Class(usize),
}

#[derive(Debug, Clone)]
pub struct Grammar {
    function_words: Vec<String>,
    classes: Vec<Vec<String>>,
    member_weights: Vec<f64>,
    templates: Vec<Vec<Slot>>,
}

fn syllable(rng: &mut impl Rng) -> String {
    let c = CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char;
    let v = VOWELS[rng.gen_range(0..VOWELS.len())] as char;
    format!("{c}{v}")
}

impl Grammar {
    pub fn generate(cfg: &GrammarConfig) -> Self {
        assert!(cfg.function_words >= cfg.templates, "each template needs its own opening word");
        assert!(cfg.common_per_class <= cfg.class_size);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut used = HashSet::new();

        let mut function_words = Vec::new();
        while function_words.len() < cfg.function_words {
            let w = syllable(&mut rng);
            if used.insert(w.clone()) {
                function_words.push(w);
            }
        }
        let mut classes = Vec::new();
        for _ in 0..cfg.classes {
            let mut members = Vec::new();
            while members.len() < cfg.class_size {
                let n = rng.gen_range(2..=3);
                let w: String = (0..n).map(|_| syllable(&mut rng)).collect();
                if used.insert(w.clone()) {
                    members.push(w);
                }
            }
            classes.push(members);
        }
        let member_weights = (0..cfg.class_size)
            .map(|j| if j < cfg.common_per_class { 1.0 } else { cfg.rare_weight })
            .collect();

        // Every class appears in some template; the rest of the slots are random.
        let mut order: Vec<usize> = (0..cfg.classes).collect();
        order.shuffle(&mut rng);
        let mut pending = order.into_iter();
        let mut templates = Vec::new();
        for t in 0..cfg.templates {
            let mut slots = vec![Slot::Function(t)];
            let body = rng.gen_range(2..=4);
            for s in 0..body {
                if s > 0 && rng.gen_bool(0.4) {
                    let f = if cfg.function_words > cfg.templates {
                        rng.gen_range(cfg.templates..cfg.function_words)
                    } else {
                        rng.gen_range(0..cfg.function_words)
                    };
                    slots.push(Slot::Function(f));
                }
                let class = pending.next().unwrap_or_else(|| rng.gen_range(0..cfg.classes));
                slots.push(Slot::Class(class));
            }
            templates.push(slots);
        }
        for class in pending {
            let t = rng.gen_range(0..templates.len());
            templates[t].push(Slot::Class(class));
        }
        Grammar {
            function_words,
            classes,
            member_weights,
            templates,
        }
    }

    pub fn function_words(&self) -> &[String] {
        &self.function_words
    }

    pub fn classes(&self) -> &[Vec<String>] {
        &self.classes
    }

    /// Every word the grammar can produce, function words first.
    pub fn words(&self) -> Vec<String> {
        self.function_words
            .iter()
            .chain(self.classes.iter().flatten())
            .cloned()
            .collect()
    }

    pub fn sample_sentence(&self, rng: &mut impl Rng) -> Vec<String> {
        let members = WeightedIndex::new(&self.member_weights).expect("positive weights");
        let template = &self.templates[rng.gen_range(0..self.templates.len())];
        template
            .iter()
            .map(|slot| match *slot {
                Slot::Function(f) => self.function_words[f].clone(),
                Slot::Class(c) => self.classes[c][members.sample(rng)].clone(),
            })
            .collect()
    }

    pub fn sample_corpus(&self, tokens: usize, rng: &mut impl Rng) -> Corpus {
        let mut sentences = Vec::new();
        let mut n = 0;
        while n < tokens {
            let s = self.sample_sentence(rng);
            n += s.len();
            sentences.push(s);
        }
        Corpus::new(sentences)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub hypotheses: usize,
    /// Acoustic penalty per edit.
    pub edit_cost: f64,
    /// Half-width of the uniform acoustic noise.
    pub noise: f64,
    pub confusions_per_word: usize,
    pub substitution_prob: f64,
    pub deletion_prob: f64,
    /// Chance that a corrupted hypothesis also contains a word fragment.
    pub fragment_prob: f64,
    pub max_edits: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            hypotheses: 50,
            edit_cost: 1.0,
            noise: 3.0,
            confusions_per_word: 3,
            substitution_prob: 0.7,
            deletion_prob: 0.15,
            fragment_prob: 0.15,
            max_edits: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub grammar: GrammarConfig,
    pub noise: NoiseConfig,
    pub train_tokens: usize,
    pub valid_sentences: usize,
    pub dev_sentences: usize,
    pub test_sentences: usize,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            grammar: GrammarConfig::default(),
            noise: NoiseConfig::default(),
            train_tokens: 200_000,
            valid_sentences: 1000,
            dev_sentences: 100,
            test_sentences: 200,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub grammar: Grammar,
    pub train: Corpus,
    pub valid: Corpus,
    pub dev_references: IndexMap<String, Vec<String>>,
    pub dev_nbest: NBestList,
    pub test_references: IndexMap<String, Vec<String>>,
    pub test_nbest: NBestList,
}

/// Unigram add-one scorer standing in for the decoder's LM.
struct DecoderLm {
    log_probs: HashMap<String, f64>,
    unseen: f64,
}

impl DecoderLm {
    fn new(corpus: &Corpus) -> Self {
        let counts = corpus.counts();
        let denom = (corpus.token_count() + counts.len() + 1) as f64;
        DecoderLm {
            log_probs: counts
                .iter()
                .map(|(w, &c)| (w.to_string(), ((c + 1) as f64 / denom).ln()))
                .collect(),
            unseen: (1.0 / denom).ln(),
        }
    }

    fn score(&self, words: &[String]) -> f64 {
        words
            .iter()
            .map(|w| self.log_probs.get(w).copied().unwrap_or(self.unseen))
            .sum()
    }
}

struct Corrupter<'a> {
    cfg: &'a NoiseConfig,
    words: Vec<String>,
    confusions: HashMap<String, Vec<String>>,
}

impl Corrupter<'_> {
    fn corrupt(&self, reference: &[String], rng: &mut impl Rng) -> (Vec<String>, usize, bool) {
        let mut hyp = reference.to_vec();
        let mut edits = 1;
        while edits < self.cfg.max_edits && rng.gen_bool(0.5) {
            edits += 1;
        }
        for _ in 0..edits {
            let r: f64 = rng.gen();
            if !hyp.is_empty() && r < self.cfg.substitution_prob {
                let i = rng.gen_range(0..hyp.len());
                let choices = &self.confusions[&hyp[i]];
                hyp[i] = choices[rng.gen_range(0..choices.len())].clone();
            } else if !hyp.is_empty() && r < self.cfg.substitution_prob + self.cfg.deletion_prob {
                hyp.remove(rng.gen_range(0..hyp.len()));
            } else {
                let w = self.words[rng.gen_range(0..self.words.len())].clone();
                hyp.insert(rng.gen_range(0..=hyp.len()), w);
            }
        }
        let mut fragment = false;
        if !hyp.is_empty() && rng.gen_bool(self.cfg.fragment_prob) {
            let i = rng.gen_range(0..hyp.len());
            let head: String = hyp[i].chars().take(2).collect();
            hyp[i] = format!("{head}-");
            fragment = true;
            edits += 1;
        }
        (hyp, edits, fragment)
    }
}

fn make_nbest(
    references: &IndexMap<String, Vec<String>>,
    corrupter: &Corrupter,
    decoder: &DecoderLm,
    rng: &mut impl Rng,
) -> NBestList {
    let cfg = corrupter.cfg;
    let mut list = NBestList::new();
    for (utt, reference) in references {
        let mut seen = BTreeSet::new();
        seen.insert(reference.clone());
        let mut hyps = vec![(reference.clone(), 0usize, false)];
        let mut attempts = 0;
        while hyps.len() < cfg.hypotheses && attempts < 50 * cfg.hypotheses {
            attempts += 1;
            let h = corrupter.corrupt(reference, rng);
            if seen.insert(h.0.clone()) {
                hyps.push(h);
            }
        }
        let mut scored: Vec<(bool, f64, Hypothesis)> = hyps
            .into_iter()
            .map(|(words, edits, fragment)| {
                let am = -cfg.edit_cost * edits as f64 + rng.gen_range(-cfg.noise..=cfg.noise);
                let lm = decoder.score(&words);
                (
                    fragment,
                    am + lm,
                    Hypothesis {
                        words,
                        acoustic_score: am,
                        lm_score: lm,
                        rank: 0,
                    },
                )
            })
            .collect();
        scored.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)));
        let hyps = scored
            .into_iter()
            .enumerate()
            .map(|(i, (_, _, mut h))| {
                h.rank = i + 1;
                h
            })
            .collect();
        list.insert(utt.clone(), hyps).expect("generated list is well formed");
    }
    list
}

impl Fixture {
    pub fn generate(cfg: &FixtureConfig) -> Self {
        let grammar = Grammar::generate(&cfg.grammar);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let train = grammar.sample_corpus(cfg.train_tokens, &mut rng);
        let valid = Corpus::new((0..cfg.valid_sentences).map(|_| grammar.sample_sentence(&mut rng)).collect());
        let refs = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| -> IndexMap<String, Vec<String>> {
            (0..n)
                .map(|i| (format!("{prefix}{i:04}"), grammar.sample_sentence(rng)))
                .collect()
        };
        let dev_references = refs("dev", cfg.dev_sentences, &mut rng);
        let test_references = refs("test", cfg.test_sentences, &mut rng);

        let words = grammar.words();
        let confusions = words
            .iter()
            .map(|w| {
                let others: Vec<String> = words
                    .choose_multiple(&mut rng, cfg.noise.confusions_per_word + 1)
                    .filter(|o| *o != w)
                    .take(cfg.noise.confusions_per_word)
                    .cloned()
                    .collect();
                (w.clone(), others)
            })
            .collect();
        let corrupter = Corrupter {
            cfg: &cfg.noise,
            words,
            confusions,
        };
        let decoder = DecoderLm::new(&train);
        let dev_nbest = make_nbest(&dev_references, &corrupter, &decoder, &mut rng);
        let test_nbest = make_nbest(&test_references, &corrupter, &decoder, &mut rng);
        Fixture {
            grammar,
            train,
            valid,
            dev_references,
            dev_nbest,
            test_references,
            test_nbest,
        }
    }

    /// Writes train.txt, valid.txt, dev.nbest, dev.ref, test.nbest and test.ref.
    pub fn write(&self, dir: impl AsRef<Path>) -> io::Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.train.save(dir.join("train.txt"))?;
        self.valid.save(dir.join("valid.txt"))?;
        self.dev_nbest.save(dir.join("dev.nbest"))?;
        write_references(&self.dev_references, fs::File::create(dir.join("dev.ref"))?)?;
        self.test_nbest.save(dir.join("test.nbest"))?;
        write_references(&self.test_references, fs::File::create(dir.join("test.ref"))?)?;
        Ok(())
    }
}
