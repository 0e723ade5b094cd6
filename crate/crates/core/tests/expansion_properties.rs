mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use common::{invariance_suite, normalization_suite};
use velm::expansion::{expand_with_embeddings, extract_oos_words, plan_candidates, SkipReason, Weighting};
use velm::rescore::{Hypothesis, NBestList};
use velm::rnnlm::{ModelDims, RnnLm};
use velm::skipgram::{train_skipgram, SkipGramConfig, WordEmbeddings};
use velm::vocab::{Corpus, Vocabulary, WordId};

fn brute_force_neighbors(emb: &WordEmbeddings, target: &str, vocab: &Vocabulary, k: usize) -> Vec<String> {
    let t = emb.vector(target).unwrap();
    let cos = |v: &[f64]| {
        let d: f64 = t.iter().zip(v).map(|(a, b)| a * b).sum();
        let n = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        d / (n(t) * n(v))
    };
    let mut scored: Vec<(f64, usize, String)> = vocab.words()[..vocab.shortlist_size()]
        .iter()
        .enumerate()
        .filter(|(_, w)| !w.starts_with('<') && w.as_str() != target)
        .filter_map(|(i, w)| emb.vector(w).map(|v| (cos(v), i, w.clone())))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, _, w)| w).collect()
}

fn nbest_from(words: &[Vec<Vec<&str>>]) -> NBestList {
    let mut list = NBestList::new();
    for (u, hyps) in words.iter().enumerate() {
        list.insert(
            format!("u{u}"),
            hyps.iter()
                .enumerate()
                .map(|(r, h)| Hypothesis {
                    words: h.iter().map(|w| w.to_string()).collect(),
                    acoustic_score: -(r as f64),
                    lm_score: 0.0,
                    rank: r + 1,
                })
                .collect(),
        )
        .unwrap();
    }
    list
}

#[test]
fn normalization_holds_before_and_after_expansion() {
    let out = normalization_suite(3);
    assert!(out.contexts > 50);
    assert!(out.bigram_error < 1e-9, "{out:?}");
    assert!(out.uniform_error < 1e-9, "{out:?}");
    assert!(out.ngram_error < 1e-9, "{out:?}");
    assert!(out.expanded_uniform_error < 1e-9, "{out:?}");
    assert!(out.expanded_ngram_error < 1e-9, "{out:?}");
}

#[test]
fn neighbors_match_brute_force_cosine() {
    let corpus = Corpus::from_text(
        &"the cat sat on the mat\nthe dog sat on the rug\na cat ate the fish\na dog ate the bone\n".repeat(30),
    );
    let emb = train_skipgram(
        &corpus,
        &SkipGramConfig {
            dim: 12,
            epochs: 3,
            ..SkipGramConfig::default()
        },
    )
    .unwrap();
    let vocab = Vocabulary::build(&corpus, 9, 20).unwrap();
    for target in emb.words() {
        for k in [1, 3, 20] {
            let lib: Vec<String> = emb
                .nearest_in_shortlist(target, &vocab, k)
                .unwrap()
                .into_iter()
                .map(|n| n.word)
                .collect();
            assert_eq!(lib, brute_force_neighbors(&emb, target, &vocab, k), "target {target} k {k}");
        }
    }
}

#[test]
fn skipgram_is_deterministic_per_seed() {
    let corpus = Corpus::from_text(&"x y z w\ny z x\n".repeat(20));
    let cfg = SkipGramConfig {
        dim: 8,
        epochs: 2,
        ..SkipGramConfig::default()
    };
    let a = train_skipgram(&corpus, &cfg).unwrap();
    let b = train_skipgram(&corpus, &cfg).unwrap();
    assert_eq!(a, b);
    let c = train_skipgram(&corpus, &SkipGramConfig { seed: 2, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn oos_extraction_matches_set_oracle() {
    let corpus = Corpus::from_text("a a a b b c");
    let vocab = Vocabulary::build(&corpus, 5, 6).unwrap();
    let lists = vec![
        vec![vec!["a", "q"], vec!["z", "c"], vec!["m"]],
        vec![vec!["b"], vec!["a", "y", "q"]],
    ];
    let list = nbest_from(&lists);
    for n in 1..=4 {
        let mut oracle = BTreeSet::new();
        for hyps in &lists {
            for h in hyps.iter().take(n) {
                for w in h {
                    if !vocab.in_shortlist(w) {
                        oracle.insert(w.to_string());
                    }
                }
            }
        }
        let got = extract_oos_words(&list, &vocab, n);
        assert_eq!(got, oracle.into_iter().collect::<Vec<_>>(), "n = {n}");
    }
    assert_eq!(extract_oos_words(&list, &vocab, 1), vec!["q"]);
}

#[test]
fn planning_skips_unusable_words_and_weights_by_similarity() {
    let vocab = Vocabulary::from_words(
        ["<s>", "</s>", "<unk>", "p", "q", "r", "new", "far"].iter().map(|s| s.to_string()).collect(),
        6,
    )
    .unwrap();
    let emb = WordEmbeddings::new(
        ["p", "q", "r", "new"].iter().map(|s| s.to_string()).collect(),
        2,
        vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 1.0, 1.0],
    );
    let model = RnnLm::random(vocab, ModelDims { layers: 1, d_s: 2, d_h: 3 }, 0.5, 1);
    let words: Vec<String> = ["new", "far", "p", "new"].iter().map(|s| s.to_string()).collect();
    let (plan, skipped) = plan_candidates(&emb, &model, &words, 2, Weighting::Similarity);
    assert_eq!(plan.words.len(), 1);
    let ids: Vec<WordId> = plan.words[0].candidates.iter().map(|c| c.0).collect();
    assert_eq!(ids, vec![3, 4]);
    let half = 1.0 / 2f64.sqrt();
    assert!(plan.words[0].candidates.iter().all(|c| (c.1 - half).abs() < 1e-12));
    let reasons: Vec<SkipReason> = skipped.iter().map(|s| s.reason).collect();
    assert_eq!(
        reasons,
        vec![SkipReason::NotInEmbeddings, SkipReason::AlreadyInShortlist, SkipReason::AlreadyInShortlist]
    );

    // With k = 3 the opposite word r has similarity clamped to zero weight.
    let (plan, _) = plan_candidates(&emb, &model, &words[..1], 3, Weighting::Similarity);
    assert_eq!(plan.words[0].candidates[2], (5, 0.0));

    let (expanded, report) = expand_with_embeddings(&model, &emb, &words, 2, Weighting::Uniform).unwrap();
    assert_eq!(report.expanded.len(), 1);
    assert_eq!(report.skipped.len(), 3);
    assert_eq!(expanded.columns(), 7);
    assert!(expanded.vocab().in_shortlist("new"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn expansion_preserves_original_distribution(
        layers in 1usize..3,
        d_s in 2usize..8,
        d_h in 2usize..8,
        shortlist in 6usize..20,
        new_words in 1usize..6,
        max_candidates in 1usize..5,
        seed in any::<u64>(),
    ) {
        let out = invariance_suite(ModelDims { layers, d_s, d_h }, shortlist, new_words, max_candidates, 10, seed);
        prop_assert!(out.original_logits_bitwise_equal);
        prop_assert!(out.states_bitwise_equal);
        prop_assert!(out.max_new_logit_error < 1e-12, "{:?}", out);
        prop_assert!(out.max_ratio_error < 1e-12, "{:?}", out);
    }

    #[test]
    fn normalization_for_any_model_seed(seed in any::<u64>()) {
        let out = normalization_suite(seed);
        prop_assert!(out.uniform_error.max(out.ngram_error) < 1e-9, "{:?}", out);
        prop_assert!(out.expanded_uniform_error.max(out.expanded_ngram_error) < 1e-9, "{:?}", out);
    }
}
