mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{kn_oracle_max_error, KnBigramOracle};
use velm::ngram::NgramModel;
use velm::vocab::{Corpus, Vocabulary, WordId, BOS_ID};

fn corpus_strategy(max_tokens: usize) -> impl Strategy<Value = Vec<Vec<String>>> {
    let word = prop::sample::select(vec!["a", "b", "c", "d", "e", "f", "g"]).prop_map(str::to_owned);
    prop::collection::vec(prop::collection::vec(word, 1..7), 1..10).prop_filter("token budget", move |s| {
        s.iter().map(Vec::len).sum::<usize>() <= max_tokens
    })
}

#[test]
fn two_sentence_toy_matches_oracle() {
    let corpus = Corpus::from_text("a b a b\nb a b");
    let vocab = Vocabulary::build(&corpus, 5, 5).unwrap();
    let model = NgramModel::train(&corpus, &vocab, 2).unwrap();
    let oracle = KnBigramOracle::new(corpus.sentences(), vocab.words());
    let (a, b) = (vocab.id("a").unwrap(), vocab.id("b").unwrap());
    assert!((model.prob(b, &[a]).unwrap() - oracle.prob("b", "a")).abs() < 1e-9);
    assert!(kn_oracle_max_error(&corpus, &vocab) < 1e-9);
}

#[test]
fn singletons_give_near_uniform_unigrams() {
    let corpus = Corpus::from_text("p q r s t");
    let vocab = Vocabulary::build(&corpus, 8, 8).unwrap();
    let model = NgramModel::train(&corpus, &vocab, 1).unwrap();
    let probs: Vec<f64> = ["p", "q", "r", "s", "t"]
        .iter()
        .map(|w| model.prob(vocab.id(w).unwrap(), &[]).unwrap())
        .collect();
    assert!(probs.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-15));
}

#[test]
fn sampled_training_contexts_normalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let words: Vec<String> = (0..40).map(|i| format!("t{i}")).collect();
    let sentences: Vec<Vec<String>> = (0..400)
        .map(|_| {
            let n = rng.gen_range(2..12);
            (0..n)
                .map(|_| {
                    let top = rng.gen_range(1..words.len());
                    words[rng.gen_range(0..top)].clone()
                })
                .collect()
        })
        .collect();
    let corpus = Corpus::new(sentences);
    let vocab = Vocabulary::build(&corpus, 20, 30).unwrap();
    let model = NgramModel::train(&corpus, &vocab, 5).unwrap();
    let encoded: Vec<Vec<WordId>> = corpus
        .sentences()
        .iter()
        .map(|s| {
            let mut ids = vec![BOS_ID];
            ids.extend(vocab.encode_sentence(s, velm::vocab::Lookup::Full));
            ids
        })
        .collect();
    for _ in 0..100 {
        let s = &encoded[rng.gen_range(0..encoded.len())];
        let end = rng.gen_range(1..=s.len());
        let ctx = &s[end.saturating_sub(4)..end];
        let total: f64 = (0..vocab.len() as WordId)
            .filter(|&w| w != BOS_ID)
            .map(|w| model.prob(w, ctx).unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-6, "context {ctx:?} sums to {total}");
    }
}

#[test]
fn arpa_round_trip_and_hand_written_file() {
    let corpus = Corpus::from_text("a b a b\nb a c\na b c c a\nc a b");
    let vocab = Vocabulary::build(&corpus, 6, 6).unwrap();
    let model = NgramModel::train(&corpus, &vocab, 3).unwrap();
    let mut buf = Vec::new();
    model.write_arpa(&mut buf).unwrap();
    let back = NgramModel::parse_arpa(std::str::from_utf8(&buf).unwrap()).unwrap();
    assert_eq!(back.vocab().words(), vocab.words());
    let n = vocab.len() as WordId;
    let mut worst = 0.0f64;
    for w in (0..n).filter(|&w| w != BOS_ID) {
        for u in 0..n {
            for t in 0..n {
                let a = model.log_prob(w, &[t, u]).unwrap() / std::f64::consts::LN_10;
                let b = back.log_prob(w, &[t, u]).unwrap() / std::f64::consts::LN_10;
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst <= 1e-6, "max |Δ log10 P| = {worst}");

    let text = "\\data\\\nngram 1=2\n\n\\1-grams:\n-0.2500000\tyes\n-0.7500000\t</s>\n\n\\end\\\n";
    let m = NgramModel::parse_arpa(text).unwrap();
    let yes = m.vocab().id("yes").unwrap();
    assert!((m.log_prob(yes, &[]).unwrap() / std::f64::consts::LN_10 + 0.25).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, max_global_rejects: 100_000, ..ProptestConfig::default() })]

    #[test]
    fn bigram_matches_brute_force(sentences in corpus_strategy(50), full in 4usize..11) {
        let corpus = Corpus::new(sentences);
        let distinct = corpus.counts().len();
        let full = full.min(distinct + 3).max(3);
        let vocab = Vocabulary::build(&corpus, full, full).unwrap();
        let err = kn_oracle_max_error(&corpus, &vocab);
        prop_assert!(err < 1e-9, "max error {}", err);
    }

    #[test]
    fn every_context_normalizes(sentences in corpus_strategy(60), order in 1usize..5) {
        let corpus = Corpus::new(sentences);
        let vocab = Vocabulary::build(&corpus, 4, 10).unwrap();
        let m = NgramModel::train(&corpus, &vocab, order).unwrap();
        let n = vocab.len() as WordId;
        for a in 0..n {
            for b in 0..n {
                let s: f64 = (0..n).filter(|&w| w != BOS_ID).map(|w| m.prob(w, &[a, b]).unwrap()).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    /// Appending the one-word sentence "u" adds copies of the observed
    /// bigram (u, </s>) and of (<s>, u) and nothing else. When (<s>, u) was
    /// already observed and the discounts do not move, P(</s> | u) must not
    /// fall.
    #[test]
    fn more_data_never_lowers_an_observed_bigram(
        sentences in corpus_strategy(40),
        pick in any::<prop::sample::Index>(),
        copies in 1usize..4,
    ) {
        let corpus = Corpus::new(sentences.clone());
        let vocab = Vocabulary::build(&corpus, 10, 10).unwrap();
        let starts: std::collections::HashSet<&String> = sentences.iter().map(|s| &s[0]).collect();
        let candidates: Vec<String> = sentences
            .iter()
            .map(|s| s[s.len() - 1].clone())
            .filter(|u| starts.contains(u))
            .collect();
        prop_assume!(!candidates.is_empty());
        let u = pick.get(&candidates).clone();
        let mut more = sentences;
        for _ in 0..copies {
            more.push(vec![u.clone()]);
        }
        let before = NgramModel::train(&corpus, &vocab, 2).unwrap();
        let after = NgramModel::train(&Corpus::new(more), &vocab, 2).unwrap();
        prop_assume!(before.discounts() == after.discounts());
        let ui = vocab.id(&u).unwrap();
        let eos = velm::vocab::EOS_ID;
        let (p0, p1) = (before.prob(eos, &[ui]).unwrap(), after.prob(eos, &[ui]).unwrap());
        prop_assert!(p1 >= p0 - 1e-12, "P(</s>|{}) fell from {} to {}", u, p0, p1);
    }
}
