//! Corpus loading, frequency-ranked shortlist construction and word/id
//! encoding shared by every model in the crate.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

pub type WordId = u32;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

pub const BOS_ID: WordId = 0;
pub const EOS_ID: WordId = 1;
pub const UNK_ID: WordId = 2;

const RESERVED: [&str; 3] = [BOS, EOS, UNK];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("shortlist size {0} leaves no room for the 3 reserved tokens")]
    ShortlistTooSmall(usize),
    #[error("shortlist size {shortlist} exceeds full vocabulary size {full}")]
    ShortlistExceedsFull { shortlist: usize, full: usize },
    #[error("word id {id} out of range (vocabulary has {len} words)")]
    IdOutOfRange { id: WordId, len: usize },
    #[error("duplicate word {0:?}")]
    DuplicateWord(String),
    #[error("invalid vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// How [`Vocabulary::encode`] treats words outside the shortlist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    /// Anything outside V_IS becomes `<unk>`.
    ShortlistOnly,
    /// Tail words keep their own (tail) id; only true OOVs become `<unk>`.
    Full,
}

/// Whitespace-tokenized sentences.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    sentences: Vec<Vec<String>>,
}

impl Corpus {
    /// Builds a corpus, dropping sentences that contain no tokens.
    pub fn new(sentences: Vec<Vec<String>>) -> Self {
        let sentences = sentences.into_iter().filter(|s| !s.is_empty()).collect();
        Corpus { sentences }
    }

    pub fn from_text(text: &str) -> Self {
        Corpus::new(
            text.lines()
                .map(|l| l.split_whitespace().map(str::to_owned).collect())
                .collect(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> io::Result<Self> {
        Ok(Corpus::from_text(&fs::read_to_string(path)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let mut out = io::BufWriter::new(fs::File::create(path)?);
        for s in &self.sentences {
            writeln!(out, "{}", s.join(" "))?;
        }
        out.flush()
    }

    pub fn sentences(&self) -> &[Vec<String>] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    /// Token frequencies over the whole corpus.
    pub fn counts(&self) -> HashMap<&str, u64> {
        let mut counts = HashMap::new();
        for tok in self.sentences.iter().flatten() {
            *counts.entry(tok.as_str()).or_insert(0) += 1;
        }
        counts
    }
}

/// Ordered word/id map. Ids below `shortlist_size` form the in-shortlist set
/// V_IS; the remaining ids are the full-vocabulary tail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, WordId>,
    shortlist_size: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit word list. The reserved tokens must
    /// occupy ids 0, 1, 2.
    pub fn from_words(words: Vec<String>, shortlist_size: usize) -> Result<Self, VocabError> {
        if words.len() < RESERVED.len() || words[..3] != RESERVED {
            return Err(VocabError::Format(
                "the first three words must be <s>, </s>, <unk>".into(),
            ));
        }
        if shortlist_size < RESERVED.len() {
            return Err(VocabError::ShortlistTooSmall(shortlist_size));
        }
        if shortlist_size > words.len() {
            return Err(VocabError::ShortlistExceedsFull {
                shortlist: shortlist_size,
                full: words.len(),
            });
        }
        let mut index = HashMap::with_capacity(words.len());
        for (id, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(VocabError::Format(format!("invalid token {w:?}")));
            }
            if index.insert(w.clone(), id as WordId).is_some() {
                return Err(VocabError::DuplicateWord(w.clone()));
            }
        }
        Ok(Vocabulary {
            words,
            index,
            shortlist_size,
        })
    }

    /// Ranks corpus words by descending frequency (ties lexicographic) and keeps
    /// the top `shortlist_size - 3` as V_IS content words and the next
    /// `full_size - shortlist_size` as the tail.
    pub fn build(corpus: &Corpus, shortlist_size: usize, full_size: usize) -> Result<Self, VocabError> {
        if shortlist_size < RESERVED.len() {
            return Err(VocabError::ShortlistTooSmall(shortlist_size));
        }
        if shortlist_size > full_size {
            return Err(VocabError::ShortlistExceedsFull {
                shortlist: shortlist_size,
                full: full_size,
            });
        }
        if corpus.token_count() == 0 {
            return Err(VocabError::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, u64)> = corpus
            .counts()
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let content_shortlist = (shortlist_size - RESERVED.len()).min(ranked.len());
        let content_full = (full_size - RESERVED.len()).min(ranked.len());
        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        words.extend(ranked[..content_full].iter().map(|(w, _)| w.to_string()));
        Vocabulary::from_words(words, RESERVED.len() + content_shortlist)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn shortlist_size(&self) -> usize {
        self.shortlist_size
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, token: &str) -> Option<WordId> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn in_shortlist(&self, token: &str) -> bool {
        self.id(token).is_some_and(|id| self.is_shortlist_id(id))
    }

    pub fn is_shortlist_id(&self, id: WordId) -> bool {
        (id as usize) < self.shortlist_size
    }

    pub fn encode(&self, token: &str, lookup: Lookup) -> WordId {
        match (self.id(token), lookup) {
            (Some(id), Lookup::Full) => id,
            (Some(id), Lookup::ShortlistOnly) if self.is_shortlist_id(id) => id,
            _ => UNK_ID,
        }
    }

    pub fn encode_sentence<S: AsRef<str>>(&self, tokens: &[S], lookup: Lookup) -> Vec<WordId> {
        tokens.iter().map(|t| self.encode(t.as_ref(), lookup)).collect()
    }

    pub fn decode(&self, id: WordId) -> Result<&str, VocabError> {
        self.words
            .get(id as usize)
            .map(String::as_str)
            .ok_or(VocabError::IdOutOfRange {
                id,
                len: self.words.len(),
            })
    }

    /// Returns a vocabulary whose shortlist is extended by `new_words`, in order.
    /// Existing shortlist ids are unchanged; new words take the ids directly after
    /// the old shortlist and the remaining tail keeps its relative order.
    pub fn with_shortlist_extended(&self, new_words: &[String]) -> Result<Self, VocabError> {
        let mut words: Vec<String> = self.words[..self.shortlist_size].to_vec();
        for w in new_words {
            if self.in_shortlist(w) {
                return Err(VocabError::DuplicateWord(w.clone()));
            }
        }
        words.extend(new_words.iter().cloned());
        words.extend(
            self.words[self.shortlist_size..]
                .iter()
                .filter(|w| !new_words.contains(w))
                .cloned(),
        );
        Vocabulary::from_words(words, self.shortlist_size + new_words.len())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("#shortlist={}\n", self.shortlist_size);
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, VocabError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| VocabError::Format("missing #shortlist header".into()))?;
        let shortlist = header
            .strip_prefix("#shortlist=")
            .and_then(|n| n.trim().parse::<usize>().ok())
            .ok_or_else(|| VocabError::Format(format!("bad header {header:?}")))?;
        Vocabulary::from_words(lines.map(str::to_owned).collect(), shortlist)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VocabError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        Vocabulary::from_text(&fs::read_to_string(path)?)
    }
}
