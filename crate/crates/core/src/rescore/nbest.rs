use std::collections::HashSet;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::RescoreError;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub words: Vec<String>,
    /// Natural-log acoustic score.
    pub acoustic_score: f64,
    /// Natural-log LM score (decoder's, or the rescoring LM's after rescoring).
    pub lm_score: f64,
    /// Position in the original list.
    pub rank: usize,
}

/// Utterance id → hypotheses in list order. Utterance order is preserved.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NBestList {
    utterances: IndexMap<String, Vec<Hypothesis>>,
}

impl NBestList {
    pub fn new() -> Self {
        NBestList::default()
    }

    /// Adds an utterance; hypotheses must be non-empty with unique ranks and
    /// finite scores.
    pub fn insert(&mut self, utt: impl Into<String>, hyps: Vec<Hypothesis>) -> Result<(), RescoreError> {
        let utt = utt.into();
        if hyps.is_empty() {
            return Err(RescoreError::EmptyUtterance(utt));
        }
        let mut ranks = HashSet::new();
        for h in &hyps {
            if !ranks.insert(h.rank) {
                return Err(RescoreError::DuplicateHypothesis { utt, rank: h.rank });
            }
            if !h.acoustic_score.is_finite() || !h.lm_score.is_finite() {
                return Err(RescoreError::NonFiniteScore(utt));
            }
        }
        if self.utterances.contains_key(&utt) {
            return Err(RescoreError::DuplicateUtterance(utt));
        }
        self.utterances.insert(utt, hyps);
        Ok(())
    }

    pub fn utterances(&self) -> &IndexMap<String, Vec<Hypothesis>> {
        &self.utterances
    }

    pub(crate) fn utterances_mut(&mut self) -> &mut IndexMap<String, Vec<Hypothesis>> {
        &mut self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// First hypothesis of every utterance.
    pub fn best(&self) -> IndexMap<String, Vec<String>> {
        self.utterances
            .iter()
            .map(|(u, h)| (u.clone(), h[0].words.clone()))
            .collect()
    }

    /// Parses `<utt>\t<rank>\t<am>\t<lm>\t<w1> <w2> …` lines. Within an
    /// utterance hypotheses are ordered by rank.
    pub fn parse(text: &str) -> Result<Self, RescoreError> {
        let mut grouped: IndexMap<String, Vec<Hypothesis>> = IndexMap::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| RescoreError::Parse { line: no, msg };
            let fields: Vec<&str> = line.splitn(5, '\t').collect();
            if fields.len() < 5 {
                return Err(err(format!("expected 5 tab-separated fields, found {}", fields.len())));
            }
            let utt = fields[0].to_string();
            if utt.is_empty() {
                return Err(err("empty utterance id".into()));
            }
            let rank: usize = fields[1].trim().parse().map_err(|_| err(format!("bad rank {:?}", fields[1])))?;
            let am: f64 = fields[2]
                .trim()
                .parse()
                .map_err(|_| err(format!("bad acoustic score {:?}", fields[2])))?;
            let lm: f64 = fields[3]
                .trim()
                .parse()
                .map_err(|_| err(format!("bad LM score {:?}", fields[3])))?;
            if !am.is_finite() || !lm.is_finite() {
                return Err(err("scores must be finite".into()));
            }
            if !seen.insert((utt.clone(), rank)) {
                return Err(err(format!("duplicate hypothesis ({utt}, {rank})")));
            }
            grouped.entry(utt).or_default().push(Hypothesis {
                words: fields[4].split_whitespace().map(str::to_owned).collect(),
                acoustic_score: am,
                lm_score: lm,
                rank,
            });
        }
        let mut list = NBestList::new();
        for (utt, mut hyps) in grouped {
            hyps.sort_by_key(|h| h.rank);
            list.insert(utt, hyps)?;
        }
        Ok(list)
    }

    pub fn write<W: Write>(&self, out: W) -> io::Result<()> {
        let mut out = BufWriter::new(out);
        for (utt, hyps) in &self.utterances {
            for h in hyps {
                writeln!(
                    out,
                    "{}\t{}\t{:.6}\t{:.6}\t{}",
                    utt,
                    h.rank,
                    h.acoustic_score,
                    h.lm_score,
                    h.words.join(" ")
                )?;
            }
        }
        out.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RescoreError> {
        NBestList::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        self.write(fs::File::create(path)?)
    }
}

/// Reference transcripts: `<utt-id>\t<w1> <w2> …` per line.
pub fn parse_references(text: &str) -> Result<IndexMap<String, Vec<String>>, RescoreError> {
    let mut refs = IndexMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (utt, words) = line.split_once('\t').unwrap_or((line, ""));
        let utt = utt.trim();
        if utt.is_empty() {
            return Err(RescoreError::Parse {
                line: i + 1,
                msg: "empty utterance id".into(),
            });
        }
        let words = words.split_whitespace().map(str::to_owned).collect();
        if refs.insert(utt.to_string(), words).is_some() {
            return Err(RescoreError::DuplicateUtterance(utt.to_string()));
        }
    }
    Ok(refs)
}

pub fn load_references(path: impl AsRef<Path>) -> Result<IndexMap<String, Vec<String>>, RescoreError> {
    parse_references(&fs::read_to_string(path)?)
}

pub fn write_references<W: Write>(refs: &IndexMap<String, Vec<String>>, out: W) -> io::Result<()> {
    let mut out = BufWriter::new(out);
    for (utt, words) in refs {
        writeln!(out, "{}\t{}", utt, words.join(" "))?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "u1\t1\t-10.500000\t-2.250000\tthe cat sat\n\
                          u1\t2\t-11.000000\t-1.000000\tthe hat sat\n\
                          u2\t1\t-3.000000\t-0.500000\t\n\
                          u3\t1\t-7.125000\t-4.000000\ta b\n";

    #[test]
    fn round_trip() {
        let list = NBestList::parse(SAMPLE).unwrap();
        assert_eq!(list.len(), 3);
        let mut buf = Vec::new();
        list.write(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), SAMPLE);
    }

    #[test]
    fn empty_hypothesis_is_legal() {
        let list = NBestList::parse(SAMPLE).unwrap();
        assert!(list.utterances()["u2"][0].words.is_empty());
    }

    #[test]
    fn sorted_by_rank() {
        let list = NBestList::parse("u\t2\t0\t0\tb\nu\t1\t0\t0\ta\n").unwrap();
        assert_eq!(list.best()["u"], vec!["a"]);
    }

    #[test]
    fn malformed_lines_name_the_line() {
        match NBestList::parse("u1\t1\t-1\t-1\ta\nu1\t2\t-1\n") {
            Err(RescoreError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            NBestList::parse("u1\t1\t-1\t-1\ta\nu1\t1\t-2\t-1\tb\n"),
            Err(RescoreError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            NBestList::parse("u1\tx\t-1\t-1\ta\n"),
            Err(RescoreError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn references() {
        let refs = parse_references("u1\ta b c\nu2\t\n").unwrap();
        assert_eq!(refs["u1"], vec!["a", "b", "c"]);
        assert!(refs["u2"].is_empty());
        assert!(matches!(
            parse_references("u1\ta\nu1\tb\n"),
            Err(RescoreError::DuplicateUtterance(_))
        ));
    }
}
