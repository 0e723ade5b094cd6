use proptest::prelude::*;

use velm::rnnlm::{log_softmax, perplexity, softmax, train_bptt, ModelDims, RnnLm, TrainConfig};
use velm::vocab::{Corpus, Lookup, Vocabulary, WordId};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-1e4f64..1e4, 1..40)) {
        let p = softmax(&logits);
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let lp = log_softmax(&logits);
        let top = logits.iter().copied().fold(f64::MIN, f64::max);
        let i = logits.iter().position(|&v| v == top).unwrap();
        prop_assert!(lp[i] <= 0.0 && lp[i] > -(logits.len() as f64).ln() - 1e-9);
    }
}

#[test]
fn training_lowers_training_perplexity() {
    let corpus = Corpus::from_text(&"the cat sat\nthe dog ran\na cat ran\n".repeat(40));
    let vocab = Vocabulary::build(&corpus, 8, 9).unwrap();
    let model = RnnLm::random(vocab.clone(), ModelDims { layers: 1, d_s: 6, d_h: 8 }, 0.05, 3);
    let ppl = |m: &RnnLm| {
        let mut lps = Vec::new();
        for s in corpus.sentences() {
            let ids: Vec<WordId> = vocab.encode_sentence(s, Lookup::ShortlistOnly);
            lps.extend(m.score_sentence(&ids).unwrap());
        }
        perplexity(&lps)
    };
    let cfg = TrainConfig {
        epochs: 3,
        dropout: 0.0,
        batch: 4,
        ..TrainConfig::default()
    };
    let (trained, report) = train_bptt(&model, &corpus, None, &cfg).unwrap();
    assert_eq!(report.epochs.len(), 3);
    assert!(ppl(&trained) < ppl(&model), "{} vs {}", ppl(&trained), ppl(&model));
}

#[test]
fn forward_step_is_pure() {
    let corpus = Corpus::from_text("a b c d e");
    let vocab = Vocabulary::build(&corpus, 8, 8).unwrap();
    let model = RnnLm::random(vocab, ModelDims { layers: 2, d_s: 4, d_h: 5 }, 0.3, 2);
    let s0 = model.initial_state();
    let a = model.forward_step(4, &s0, None).unwrap();
    let b = model.forward_step(4, &s0, None).unwrap();
    assert_eq!(a, b);
    let batch = model.score_batch(&[vec![3, 4], vec![5, 6, 7]]).unwrap();
    assert_eq!(batch[1], model.score_sentence(&[5, 6, 7]).unwrap());
}
