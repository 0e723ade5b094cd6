//! Skip-gram with negative sampling, plus cosine nearest-neighbour queries
//! restricted to the LM shortlist.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{axpy, cosine, dot, sigmoid};
use crate::vocab::{Corpus, Vocabulary, WordId};

#[derive(Debug, Error)]
pub enum SkipGramError {
    #[error("unknown target word {0:?}: no embedding")]
    UnknownTarget(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("embedding file error at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub subsample: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 100,
            window: 5,
            negatives: 5,
            subsample: 1e-3,
            epochs: 5,
            lr: 0.025,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbeddings {
    words: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    /// Row-major: word i occupies `vectors[i * dim..(i + 1) * dim]`.
    vectors: Vec<f64>,
    config: Option<SkipGramConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: WordId,
    pub word: String,
    pub similarity: f64,
}

impl WordEmbeddings {
    pub fn new(words: Vec<String>, dim: usize, vectors: Vec<f64>) -> Self {
        assert_eq!(words.len() * dim, vectors.len(), "vector storage size mismatch");
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        WordEmbeddings {
            words,
            index,
            dim,
            vectors,
            config: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn config(&self) -> Option<&SkipGramConfig> {
        self.config.as_ref()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn vector(&self, word: &str) -> Option<&[f64]> {
        self.index
            .get(word)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn similarity(&self, a: &str, b: &str) -> Option<f64> {
        Some(cosine(self.vector(a)?, self.vector(b)?))
    }

    /// Top-`k` shortlist content words by cosine similarity to `target`
    /// (descending, ties by ascending id). Reserved tokens, the target itself
    /// and shortlist words without vectors are never returned.
    pub fn nearest_in_shortlist(
        &self,
        target: &str,
        shortlist: &Vocabulary,
        k: usize,
    ) -> Result<Vec<Neighbor>, SkipGramError> {
        let tv = self
            .vector(target)
            .ok_or_else(|| SkipGramError::UnknownTarget(target.to_string()))?;
        let mut ranked: Vec<Neighbor> = shortlist.words()[3..shortlist.shortlist_size()]
            .iter()
            .enumerate()
            .filter(|(_, w)| w.as_str() != target)
            .filter_map(|(i, w)| {
                self.vector(w).map(|v| Neighbor {
                    id: (i + 3) as WordId,
                    word: w.clone(),
                    similarity: cosine(tv, v),
                })
            })
            .collect();
        ranked.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then_with(|| a.id.cmp(&b.id))
        });
        ranked.truncate(k);
        Ok(ranked)
    }

    pub fn write_text<W: Write>(&self, out: W) -> io::Result<()> {
        let mut out = BufWriter::new(out);
        writeln!(out, "{} {}", self.words.len(), self.dim)?;
        for (i, w) in self.words.iter().enumerate() {
            write!(out, "{w}")?;
            for v in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        out.flush()
    }

    pub fn save_text(&self, path: impl AsRef<Path>) -> io::Result<()> {
        self.write_text(fs::File::create(path)?)
    }

    pub fn parse_text(text: &str) -> Result<Self, SkipGramError> {
        let err = |line: usize, msg: String| SkipGramError::Format { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let mut fields = header.split_whitespace();
        let (count, dim) = match (fields.next(), fields.next(), fields.next()) {
            (Some(c), Some(d), None) => (
                c.parse::<usize>().map_err(|_| err(1, format!("bad word count {c:?}")))?,
                d.parse::<usize>().map_err(|_| err(1, format!("bad dimension {d:?}")))?,
            ),
            _ => return Err(err(1, "header must be \"<count> <dim>\"".into())),
        };
        let mut words = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count * dim);
        let mut last = 1;
        for (no, line) in lines {
            last = no;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().expect("non-empty line");
            let before = vectors.len();
            for p in parts {
                vectors.push(p.parse::<f64>().map_err(|_| err(no, format!("bad value {p:?}")))?);
            }
            if vectors.len() - before != dim {
                return Err(err(no, format!("expected {dim} values, found {}", vectors.len() - before)));
            }
            words.push(word.to_string());
        }
        if words.len() != count {
            return Err(err(last, format!("header declares {count} words, body has {}", words.len())));
        }
        Ok(WordEmbeddings::new(words, dim, vectors))
    }

    pub fn load_text(path: impl AsRef<Path>) -> Result<Self, SkipGramError> {
        WordEmbeddings::parse_text(&fs::read_to_string(path)?)
    }
}

/// Trains skip-gram embeddings covering every unique corpus word. Single
/// threaded and deterministic for a given seed.
pub fn train_skipgram(corpus: &Corpus, cfg: &SkipGramConfig) -> Result<WordEmbeddings, SkipGramError> {
    if corpus.token_count() == 0 {
        return Err(SkipGramError::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, u64)> = corpus.counts().into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let index: HashMap<&str, usize> = ranked.iter().enumerate().map(|(i, (w, _))| (*w, i)).collect();
    let counts: Vec<f64> = ranked.iter().map(|(_, c)| *c as f64).collect();
    let total: f64 = counts.iter().sum();
    let n = ranked.len();
    let dim = cfg.dim;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut input: Vec<f64> = (0..n * dim)
        .map(|_| (rng.gen::<f64>() - 0.5) / dim as f64)
        .collect();
    let mut output = vec![0.0; n * dim];
    let noise = WeightedIndex::new(counts.iter().map(|c| c.powf(0.75))).expect("positive counts");

    let keep_prob: Vec<f64> = counts
        .iter()
        .map(|&c| {
            if cfg.subsample <= 0.0 {
                1.0
            } else {
                let t = cfg.subsample * total;
                ((c / t).sqrt() + 1.0) * t / c
            }
        })
        .collect();

    let encoded: Vec<Vec<usize>> = corpus
        .sentences()
        .iter()
        .map(|s| s.iter().map(|w| index[w.as_str()]).collect())
        .collect();
    let planned = (cfg.epochs as f64 * total).max(1.0);
    let mut processed = 0.0;
    let mut grad = vec![0.0; dim];

    for _ in 0..cfg.epochs {
        for sentence in &encoded {
            processed += sentence.len() as f64;
            let alpha = cfg.lr * (1.0 - processed / (planned + 1.0)).max(1e-4);
            let kept: Vec<usize> = sentence
                .iter()
                .copied()
                .filter(|&w| keep_prob[w] >= 1.0 || keep_prob[w] > rng.gen::<f64>())
                .collect();
            for (pos, &center) in kept.iter().enumerate() {
                let reach = if cfg.window == 0 { 0 } else { cfg.window - rng.gen_range(0..cfg.window) };
                let lo = pos.saturating_sub(reach);
                let hi = (pos + reach).min(kept.len() - 1);
                for (ctx_pos, &context) in kept.iter().enumerate().take(hi + 1).skip(lo) {
                    if ctx_pos == pos {
                        continue;
                    }
                    grad.fill(0.0);
                    let ctx_vec = context * dim..(context + 1) * dim;
                    for d in 0..=cfg.negatives {
                        let (target, label) = if d == 0 {
                            (center, 1.0)
                        } else {
                            let t = noise.sample(&mut rng);
                            if t == center {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let out_vec = target * dim..(target + 1) * dim;
                        let f = dot(&input[ctx_vec.clone()], &output[out_vec.clone()]);
                        let g = (label - sigmoid(f)) * alpha;
                        axpy(g, &output[out_vec.clone()], &mut grad);
                        axpy(g, &input[ctx_vec.clone()], &mut output[out_vec]);
                    }
                    axpy(1.0, &grad, &mut input[ctx_vec]);
                }
            }
        }
    }

    let words = ranked.iter().map(|(w, _)| w.to_string()).collect();
    let mut emb = WordEmbeddings::new(words, dim, input);
    emb.config = Some(cfg.clone());
    Ok(emb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shortlist(words: &[&str]) -> Vocabulary {
        let mut all: Vec<String> = ["<s>", "</s>", "<unk>"].iter().map(|s| s.to_string()).collect();
        all.extend(words.iter().map(|s| s.to_string()));
        let n = all.len();
        Vocabulary::from_words(all, n).unwrap()
    }

    #[test]
    fn identical_vectors_rank_first() {
        let emb = WordEmbeddings::new(
            vec!["q".into(), "a".into(), "b".into(), "c".into()],
            2,
            vec![1.0, 2.0, 1.0, 2.0, -1.0, 0.5, 0.3, 0.9],
        );
        let v = shortlist(&["c", "b", "a"]);
        let top = emb.nearest_in_shortlist("q", &v, 8).unwrap();
        assert_eq!(top[0].word, "a");
        assert!((top[0].similarity - 1.0).abs() < 1e-12);
        assert_eq!(top.len(), 3);
        assert!(matches!(
            emb.nearest_in_shortlist("zzz", &v, 2),
            Err(SkipGramError::UnknownTarget(_))
        ));
    }

    #[test]
    fn excludes_target_and_reserved() {
        let emb = WordEmbeddings::new(
            vec!["<unk>".into(), "a".into(), "b".into()],
            2,
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0],
        );
        let v = shortlist(&["a", "b"]);
        let top = emb.nearest_in_shortlist("a", &v, 8).unwrap();
        assert_eq!(top.iter().map(|n| n.word.as_str()).collect::<Vec<_>>(), vec!["b"]);
    }

    #[test]
    fn ties_break_by_id() {
        let emb = WordEmbeddings::new(
            vec!["t".into(), "x".into(), "y".into()],
            2,
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
        );
        let v = shortlist(&["y", "x"]);
        let top = emb.nearest_in_shortlist("t", &v, 2).unwrap();
        assert_eq!(top[0].word, "y");
        assert_eq!(top[1].word, "x");
    }

    #[test]
    fn text_format_parsing() {
        let emb = WordEmbeddings::parse_text("2 2\nfoo 1 0\nbar 1 1\n").unwrap();
        assert!((emb.similarity("foo", "bar").unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(
            WordEmbeddings::parse_text("5 2\na 1 2\nb 1 2\nc 1 2\nd 1 2\n"),
            Err(SkipGramError::Format { .. })
        ));
        assert!(matches!(
            WordEmbeddings::parse_text("1 3\na 1 2\n"),
            Err(SkipGramError::Format { line: 2, .. })
        ));
    }

    #[test]
    fn training_covers_every_word_and_is_deterministic() {
        let corpus = Corpus::from_text("a b c d\nb c d e\nc d e f g");
        let cfg = SkipGramConfig {
            dim: 8,
            epochs: 2,
            ..SkipGramConfig::default()
        };
        let a = train_skipgram(&corpus, &cfg).unwrap();
        let b = train_skipgram(&corpus, &cfg).unwrap();
        assert_eq!(a, b);
        for w in ["a", "b", "c", "d", "e", "f", "g"] {
            assert!(a.contains(w));
        }
        for w in a.words() {
            assert!((a.similarity(w, w).unwrap() - 1.0).abs() < 1e-9);
        }
    }
}
