//! Interpolated modified Kneser-Ney n-gram model stored in backoff form,
//! with ARPA import/export.
//!
//! Counting follows the usual toolkit conventions: the highest order uses raw
//! counts, lower orders use continuation counts N1+(• g) except for n-grams
//! that start with `<s>`, which keep their raw counts. Three discounts
//! D1, D2, D3+ are estimated per order from counts-of-counts. The lowest order
//! is interpolated with a uniform distribution over the predictable vocabulary
//! (everything except `<s>`), so every word gets non-zero probability.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use log::warn;
use thiserror::Error;

use crate::vocab::{Corpus, Lookup, Vocabulary, WordId, BOS, BOS_ID, EOS_ID};

const LN_10: f64 = std::f64::consts::LN_10;
/// ARPA convention for "probability zero" (used for `<s>`).
const ARPA_LOG10_ZERO: f64 = -99.0;
const FALLBACK_DISCOUNT: f64 = 0.5;

/// Ordered so that floating-point sums over counts are reproducible.
type Counts = BTreeMap<Vec<WordId>, u64>;

#[derive(Debug, Error)]
pub enum NgramError {
    #[error("n-gram order must be at least 1")]
    ZeroOrder,
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("word id {0} is not in the n-gram vocabulary")]
    UnknownWord(WordId),
    #[error("ARPA parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NgramEntry {
    /// Natural-log conditional probability.
    pub log_prob: f64,
    /// Natural-log backoff weight (0 when the n-gram is never a context).
    pub log_backoff: f64,
}

/// Per-order discounts indexed by adjusted count 1, 2, 3+.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discounts(pub [f64; 3]);

impl Discounts {
    pub fn for_count(&self, count: u64) -> f64 {
        match count {
            0 => 0.0,
            1 => self.0[0],
            2 => self.0[1],
            _ => self.0[2],
        }
    }

    /// Chen-Goodman estimate from counts-of-counts n1..n4. Returns `None` when
    /// the counts are degenerate or an estimate falls outside (0, c).
    pub fn estimate(counts_of_counts: [u64; 4]) -> Option<Self> {
        let [n1, n2, n3, n4] = counts_of_counts.map(|n| n as f64);
        if counts_of_counts.contains(&0) {
            return None;
        }
        let y = n1 / (n1 + 2.0 * n2);
        let d = [
            1.0 - 2.0 * y * n2 / n1,
            2.0 - 3.0 * y * n3 / n2,
            3.0 - 4.0 * y * n4 / n3,
        ];
        if d.iter().enumerate().all(|(i, &di)| di > 0.0 && di < (i + 1) as f64) {
            Some(Discounts(d))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
pub struct NgramModel {
    order: usize,
    vocab: Vocabulary,
    /// `tables[k - 1]` holds the k-grams.
    tables: Vec<HashMap<Vec<WordId>, NgramEntry>>,
    discounts: Vec<Discounts>,
}

impl NgramModel {
    /// Trains an interpolated modified-KN model of the given order. Tail words
    /// keep their own ids; tokens outside `vocab` count as `<unk>`.
    pub fn train(corpus: &Corpus, vocab: &Vocabulary, order: usize) -> Result<Self, NgramError> {
        if order == 0 {
            return Err(NgramError::ZeroOrder);
        }
        if corpus.token_count() == 0 {
            return Err(NgramError::EmptyCorpus);
        }

        let mut raw: Vec<Counts> = vec![Counts::new(); order];
        for sentence in corpus.sentences() {
            let mut padded = Vec::with_capacity(sentence.len() + 2);
            padded.push(BOS_ID);
            padded.extend(vocab.encode_sentence(sentence, Lookup::Full));
            padded.push(EOS_ID);
            for i in 1..padded.len() {
                for k in 1..=order.min(i + 1) {
                    *raw[k - 1].entry(padded[i + 1 - k..=i].to_vec()).or_insert(0) += 1;
                }
            }
        }

        let adjusted = adjusted_counts(&raw);
        let discounts: Vec<Discounts> = adjusted
            .iter()
            .enumerate()
            .map(|(k, counts)| {
                let mut coc = [0u64; 4];
                for &c in counts.values() {
                    if (1..=4).contains(&c) {
                        coc[c as usize - 1] += 1;
                    }
                }
                Discounts::estimate(coc).unwrap_or_else(|| {
                    warn!(
                        "order {}: degenerate counts-of-counts {:?}, using absolute discount {}",
                        k + 1,
                        coc,
                        FALLBACK_DISCOUNT
                    );
                    Discounts([FALLBACK_DISCOUNT; 3])
                })
            })
            .collect();

        let mut model = NgramModel {
            order,
            vocab: vocab.clone(),
            tables: vec![HashMap::new(); order],
            discounts,
        };
        model.build_unigrams(&adjusted[0]);
        for k in 2..=order {
            model.build_order(k, &adjusted[k - 1]);
        }
        Ok(model)
    }

    fn build_unigrams(&mut self, counts: &Counts) {
        let d = self.discounts[0];
        let total: u64 = counts.values().sum();
        let total = total as f64;
        let (mass, _) = leftover_mass(counts.values().copied(), &d);
        let gamma = mass / total;
        let predictable = (self.vocab.len() - 1) as f64;
        let table = &mut self.tables[0];
        for id in 0..self.vocab.len() as WordId {
            let log_prob = if id == BOS_ID {
                ARPA_LOG10_ZERO * LN_10
            } else {
                let c = counts.get(&vec![id]).copied().unwrap_or(0);
                let p = (c as f64 - d.for_count(c)).max(0.0) / total + gamma / predictable;
                p.ln()
            };
            table.insert(
                vec![id],
                NgramEntry {
                    log_prob,
                    log_backoff: 0.0,
                },
            );
        }
    }

    fn build_order(&mut self, k: usize, counts: &Counts) {
        let d = self.discounts[k - 1];
        let mut by_context: BTreeMap<&[WordId], Vec<(WordId, u64)>> = BTreeMap::new();
        for (gram, &c) in counts {
            by_context
                .entry(&gram[..k - 1])
                .or_default()
                .push((gram[k - 1], c));
        }
        let mut entries = Vec::with_capacity(counts.len());
        let mut backoffs = Vec::with_capacity(by_context.len());
        for (context, followers) in &by_context {
            let total: u64 = followers.iter().map(|(_, c)| c).sum();
            let total = total as f64;
            let (mass, _) = leftover_mass(followers.iter().map(|(_, c)| *c), &d);
            let gamma = mass / total;
            for &(w, c) in followers {
                let lower = self.log_prob_ids(w, &context[1..]).exp();
                let p = (c as f64 - d.for_count(c)) / total + gamma * lower;
                let mut key = context.to_vec();
                key.push(w);
                entries.push((key, p.ln()));
            }
            backoffs.push((context.to_vec(), gamma.ln()));
        }
        for (key, log_prob) in entries {
            self.tables[k - 1].insert(
                key,
                NgramEntry {
                    log_prob,
                    log_backoff: 0.0,
                },
            );
        }
        for (context, log_bow) in backoffs {
            match self.tables[k - 2].get_mut(&context) {
                Some(e) => e.log_backoff = log_bow,
                None => warn!("context {context:?} missing from order {}", k - 1),
            }
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn discounts(&self) -> &[Discounts] {
        &self.discounts
    }

    pub fn entry(&self, gram: &[WordId]) -> Option<&NgramEntry> {
        self.tables.get(gram.len().checked_sub(1)?)?.get(gram)
    }

    pub fn num_entries(&self, k: usize) -> usize {
        self.tables[k - 1].len()
    }

    /// Natural-log probability of `word` after `context` via the backoff
    /// recursion. Only the last `order - 1` context words are used.
    fn log_prob_ids(&self, word: WordId, context: &[WordId]) -> f64 {
        let ctx = &context[context.len().saturating_sub(self.order - 1)..];
        let mut key = Vec::with_capacity(ctx.len() + 1);
        let mut backoff = 0.0;
        for start in 0..=ctx.len() {
            let h = &ctx[start..];
            key.clear();
            key.extend_from_slice(h);
            key.push(word);
            if let Some(e) = self.tables[h.len()].get(&key) {
                return backoff + e.log_prob;
            }
            if !h.is_empty() {
                if let Some(e) = self.tables[h.len() - 1].get(h) {
                    backoff += e.log_backoff;
                }
            }
        }
        unreachable!("every vocabulary word has a unigram entry")
    }

    pub fn log_prob(&self, word: WordId, context: &[WordId]) -> Result<f64, NgramError> {
        let n = self.vocab.len() as WordId;
        if let Some(&bad) = std::iter::once(&word).chain(context).find(|&&id| id >= n) {
            return Err(NgramError::UnknownWord(bad));
        }
        Ok(self.log_prob_ids(word, context))
    }

    /// Conditional probability P_N(word | context).
    pub fn prob(&self, word: WordId, context: &[WordId]) -> Result<f64, NgramError> {
        Ok(self.log_prob(word, context)?.exp())
    }

    /// Total natural-log probability of a sentence including `</s>`.
    pub fn sentence_log_prob<S: AsRef<str>>(&self, words: &[S]) -> f64 {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(BOS_ID);
        ids.extend(self.vocab.encode_sentence(words, Lookup::Full));
        ids.push(EOS_ID);
        (1..ids.len())
            .map(|i| self.log_prob_ids(ids[i], &ids[..i]))
            .sum()
    }

    /// Writes the model in ARPA format (log10 probabilities).
    pub fn write_arpa<W: Write>(&self, out: W) -> io::Result<()> {
        let mut out = BufWriter::new(out);
        writeln!(out, "\\data\\")?;
        for k in 1..=self.order {
            writeln!(out, "ngram {}={}", k, self.tables[k - 1].len())?;
        }
        for k in 1..=self.order {
            writeln!(out, "\n\\{k}-grams:")?;
            let mut grams: Vec<_> = self.tables[k - 1].iter().collect();
            grams.sort_by(|a, b| a.0.cmp(b.0));
            for (gram, e) in grams {
                let words: Vec<&str> = gram.iter().map(|&id| self.vocab.words()[id as usize].as_str()).collect();
                let lp = if gram == &[BOS_ID] {
                    ARPA_LOG10_ZERO
                } else {
                    e.log_prob / LN_10
                };
                write!(out, "{:.7}\t{}", lp, words.join(" "))?;
                if k < self.order && e.log_backoff != 0.0 {
                    write!(out, "\t{:.7}", e.log_backoff / LN_10)?;
                }
                writeln!(out)?;
            }
        }
        writeln!(out, "\n\\end\\")?;
        out.flush()
    }

    pub fn export_arpa(&self, path: impl AsRef<Path>) -> io::Result<()> {
        self.write_arpa(fs::File::create(path)?)
    }

    pub fn import_arpa(path: impl AsRef<Path>) -> Result<Self, NgramError> {
        NgramModel::parse_arpa(&fs::read_to_string(path)?)
    }

    /// Parses ARPA text. The vocabulary is the unigram list with the reserved
    /// tokens moved to ids 0..3 (added if absent); the shortlist spans it all.
    pub fn parse_arpa(text: &str) -> Result<Self, NgramError> {
        let err = |line: usize, msg: &str| NgramError::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut last_line = 0;

        // header
        let mut expected: Vec<usize> = Vec::new();
        loop {
            let (no, line) = lines.next().ok_or_else(|| err(last_line + 1, "missing \\data\\ header"))?;
            last_line = no;
            if line.is_empty() {
                continue;
            }
            if line == "\\data\\" {
                break;
            }
            return Err(err(no, "expected \\data\\"));
        }
        let mut pending: Option<(usize, &str)> = None;
        for (no, line) in lines.by_ref() {
            last_line = no;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("ngram ") {
                let (k, n) = rest.split_once('=').ok_or_else(|| err(no, "bad ngram count line"))?;
                let k: usize = k.trim().parse().map_err(|_| err(no, "bad order"))?;
                let n: usize = n.trim().parse().map_err(|_| err(no, "bad count"))?;
                if k != expected.len() + 1 {
                    return Err(err(no, "ngram counts out of order"));
                }
                expected.push(n);
            } else {
                pending = Some((no, line));
                break;
            }
        }
        if expected.is_empty() {
            return Err(err(last_line, "no ngram counts in \\data\\ section"));
        }
        let order = expected.len();

        let mut raw: Vec<Vec<(Vec<String>, f64, f64)>> = vec![Vec::new(); order];
        let mut current: Option<usize> = None;
        let mut ended = false;
        for (no, line) in pending.into_iter().chain(lines) {
            last_line = no;
            if line.is_empty() {
                continue;
            }
            if line == "\\end\\" {
                ended = true;
                break;
            }
            if let Some(k) = line
                .strip_prefix('\\')
                .and_then(|l| l.strip_suffix("-grams:"))
            {
                let k: usize = k.parse().map_err(|_| err(no, "bad section header"))?;
                if k == 0 || k > order {
                    return Err(err(no, "section order not declared in \\data\\"));
                }
                current = Some(k);
                continue;
            }
            let k = current.ok_or_else(|| err(no, "n-gram entry outside a section"))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != k + 1 && fields.len() != k + 2 {
                return Err(err(no, &format!("expected {} or {} fields", k + 1, k + 2)));
            }
            let lp: f64 = fields[0].parse().map_err(|_| err(no, "bad probability"))?;
            let bow: f64 = match fields.get(k + 1) {
                Some(b) => b.parse().map_err(|_| err(no, "bad backoff weight"))?,
                None => 0.0,
            };
            raw[k - 1].push((fields[1..=k].iter().map(|s| s.to_string()).collect(), lp, bow));
        }
        if !ended {
            return Err(err(last_line + 1, "missing \\end\\ marker"));
        }
        for (k, (entries, &n)) in raw.iter().zip(&expected).enumerate() {
            if entries.len() != n {
                return Err(err(
                    last_line,
                    &format!("{}-gram count {} does not match header {}", k + 1, entries.len(), n),
                ));
            }
        }

        let mut words: Vec<String> = [BOS, crate::vocab::EOS, crate::vocab::UNK]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for (gram, _, _) in &raw[0] {
            if !words.contains(&gram[0]) {
                words.push(gram[0].clone());
            }
        }
        let shortlist = words.len();
        let vocab = Vocabulary::from_words(words, shortlist).map_err(|e| err(0, &e.to_string()))?;

        let mut tables = vec![HashMap::new(); order];
        for (k, entries) in raw.into_iter().enumerate() {
            for (gram, lp, bow) in entries {
                let ids = gram
                    .iter()
                    .map(|w| vocab.id(w))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| err(0, &format!("{}-gram {:?} uses a word with no unigram", k + 1, gram)))?;
                tables[k].insert(
                    ids,
                    NgramEntry {
                        log_prob: lp * LN_10,
                        log_backoff: bow * LN_10,
                    },
                );
            }
        }
        for id in 0..vocab.len() as WordId {
            tables[0].entry(vec![id]).or_insert(NgramEntry {
                log_prob: ARPA_LOG10_ZERO * LN_10,
                log_backoff: 0.0,
            });
        }
        Ok(NgramModel {
            order,
            vocab,
            tables,
            discounts: Vec::new(),
        })
    }
}

/// Discounted mass D1·N1 + D2·N2 + D3·N3+ and the number of types.
fn leftover_mass(counts: impl Iterator<Item = u64>, d: &Discounts) -> (f64, usize) {
    let mut mass = 0.0;
    let mut n = 0;
    for c in counts {
        mass += d.for_count(c);
        n += 1;
    }
    (mass, n)
}

/// Highest order keeps raw counts; lower orders use continuation counts
/// except for n-grams starting with `<s>`.
fn adjusted_counts(raw: &[Counts]) -> Vec<Counts> {
    let order = raw.len();
    let mut adjusted = Vec::with_capacity(order);
    for k in 1..=order {
        if k == order {
            adjusted.push(raw[k - 1].clone());
            continue;
        }
        let mut cont = Counts::new();
        for gram in raw[k].keys() {
            *cont.entry(gram[1..].to_vec()).or_insert(0) += 1;
        }
        let mut counts = Counts::new();
        for (gram, &c) in &raw[k - 1] {
            let a = if gram[0] == BOS_ID {
                c
            } else {
                cont.get(gram).copied().unwrap_or(0)
            };
            if a > 0 {
                counts.insert(gram.clone(), a);
            }
        }
        adjusted.push(counts);
    }
    adjusted
}
