use indexmap::IndexMap;
use serde::Serialize;

use super::RescoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_words: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Word error rate in percent. An empty reference with no errors is 0.
    pub fn wer_percent(&self) -> f64 {
        match (self.errors(), self.reference_words) {
            (0, _) => 0.0,
            (_, 0) => f64::INFINITY,
            (e, n) => 100.0 * e as f64 / n as f64,
        }
    }

    fn add(&mut self, other: EditCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.reference_words += other.reference_words;
    }
}

/// Minimum-edit alignment. Among optimal alignments the one with the most
/// substitutions wins; since insertions minus deletions is fixed by the
/// lengths, this also minimizes insertions and deletions.
pub fn align<S: AsRef<str>, T: AsRef<str>>(reference: &[S], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let cell = |s: usize, i: usize, d: usize| EditCounts {
        substitutions: s,
        insertions: i,
        deletions: d,
        reference_words: 0,
    };
    let key = |c: &EditCounts| (c.errors(), std::cmp::Reverse(c.substitutions));
    let mut table: Vec<EditCounts> = Vec::with_capacity((n + 1) * w);
    for i in 0..=n {
        for j in 0..=m {
            let best = if i == 0 {
                cell(0, j, 0)
            } else if j == 0 {
                cell(0, 0, i)
            } else {
                let differ = usize::from(reference[i - 1].as_ref() != hypothesis[j - 1].as_ref());
                let diag = &table[(i - 1) * w + j - 1];
                let left = &table[i * w + j - 1];
                let up = &table[(i - 1) * w + j];
                [
                    cell(diag.substitutions + differ, diag.insertions, diag.deletions),
                    cell(left.substitutions, left.insertions + 1, left.deletions),
                    cell(up.substitutions, up.insertions, up.deletions + 1),
                ]
                .into_iter()
                .min_by_key(key)
                .unwrap()
            };
            table.push(best);
        }
    }
    EditCounts {
        reference_words: n,
        ..table[n * w + m]
    }
}

/// Corpus-level counts over every reference utterance. A reference without a
/// hypothesis is an error.
pub fn corpus_edits(
    references: &IndexMap<String, Vec<String>>,
    hypotheses: &IndexMap<String, Vec<String>>,
) -> Result<EditCounts, RescoreError> {
    let mut total = EditCounts::default();
    for (utt, reference) in references {
        let hyp = hypotheses
            .get(utt)
            .ok_or_else(|| RescoreError::MissingHypothesis(utt.clone()))?;
        total.add(align(reference, hyp));
    }
    Ok(total)
}
