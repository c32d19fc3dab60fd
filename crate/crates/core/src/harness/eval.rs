//! Attachment scores and paired bootstrap significance.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conllu::Sentence;
use crate::error::{Error, Result};

/// Word counts for one language.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachmentCounts {
    pub words: usize,
    pub head_correct: usize,
    pub both_correct: usize,
}

impl AttachmentCounts {
    pub fn uas(&self) -> f64 {
        percent(self.head_correct, self.words)
    }

    pub fn las(&self) -> f64 {
        percent(self.both_correct, self.words)
    }

    fn add(&mut self, other: AttachmentCounts) {
        self.words += other.words;
        self.head_correct += other.head_correct;
        self.both_correct += other.both_correct;
    }
}

fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Per-language attachment scores.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub languages: BTreeMap<String, AttachmentCounts>,
}

impl Metrics {
    pub fn single(lang: &str, counts: AttachmentCounts) -> Self {
        let mut m = Metrics::default();
        m.languages.insert(lang.to_string(), counts);
        m
    }

    pub fn merge(&mut self, other: &Metrics) {
        for (lang, c) in &other.languages {
            self.languages.entry(lang.clone()).or_default().add(*c);
        }
    }

    pub fn get(&self, lang: &str) -> Option<&AttachmentCounts> {
        self.languages.get(lang)
    }

    pub fn macro_las(&self) -> f64 {
        mean(self.languages.values().map(AttachmentCounts::las))
    }

    pub fn macro_uas(&self) -> f64 {
        mean(self.languages.values().map(AttachmentCounts::uas))
    }

    pub fn total(&self) -> AttachmentCounts {
        let mut t = AttachmentCounts::default();
        for c in self.languages.values() {
            t.add(*c);
        }
        t
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        0.0
    } else {
        xs.sum::<f64>() / n as f64
    }
}

fn check_aligned(gold: &Sentence, pred: &Sentence, k: usize) -> Result<()> {
    if gold.len() != pred.len() || gold.forms().ne(pred.forms()) {
        return Err(Error::Data(format!(
            "sentence {}: predicted words do not match gold words",
            k + 1
        )));
    }
    Ok(())
}

/// Counts for one gold/predicted sentence pair.
pub fn sentence_counts(gold: &Sentence, pred: &Sentence) -> AttachmentCounts {
    let mut c = AttachmentCounts {
        words: gold.len(),
        ..Default::default()
    };
    for (g, p) in gold.tokens.iter().zip(&pred.tokens) {
        if g.head == p.head {
            c.head_correct += 1;
            if g.deprel == p.deprel {
                c.both_correct += 1;
            }
        }
    }
    c
}

/// Scores predictions against gold over all words. Both sides must contain
/// the same sentences with the same words.
pub fn score(gold: &[Sentence], pred: &[Sentence]) -> Result<AttachmentCounts> {
    if gold.len() != pred.len() {
        return Err(Error::Data(format!(
            "gold has {} sentences, prediction has {}",
            gold.len(),
            pred.len()
        )));
    }
    let mut total = AttachmentCounts::default();
    for (k, (g, p)) in gold.iter().zip(pred).enumerate() {
        check_aligned(g, p, k)?;
        total.add(sentence_counts(g, p));
    }
    Ok(total)
}

/// Per-sentence `(words, correct A, correct B)` labeled counts.
pub fn paired_counts(gold: &[Sentence], a: &[Sentence], b: &[Sentence]) -> Result<Vec<(usize, usize, usize)>> {
    if gold.len() != a.len() || gold.len() != b.len() {
        return Err(Error::Data("gold and both predictions must cover the same sentences".into()));
    }
    let mut out = Vec::with_capacity(gold.len());
    for (k, ((g, pa), pb)) in gold.iter().zip(a).zip(b).enumerate() {
        check_aligned(g, pa, k)?;
        check_aligned(g, pb, k)?;
        out.push((g.len(), sentence_counts(g, pa).both_correct, sentence_counts(g, pb).both_correct));
    }
    Ok(out)
}

/// One-sided paired bootstrap over sentences for "A has higher LAS than B":
/// the fraction of resamples in which B's LAS is at least A's.
pub fn bootstrap_from_counts(counts: &[(usize, usize, usize)], iterations: usize, seed: u64) -> f64 {
    if counts.is_empty() || iterations == 0 {
        return 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = counts.len();
    let mut not_better = 0usize;
    for _ in 0..iterations {
        let (mut ca, mut cb) = (0usize, 0usize);
        for _ in 0..n {
            let (_, a, b) = counts[rng.random_range(0..n)];
            ca += a;
            cb += b;
        }
        // Both systems share the word count, so comparing correct counts is
        // comparing LAS.
        if cb >= ca {
            not_better += 1;
        }
    }
    not_better as f64 / iterations as f64
}

pub fn bootstrap_significance(
    gold: &[Sentence],
    a: &[Sentence],
    b: &[Sentence],
    iterations: usize,
    seed: u64,
) -> Result<f64> {
    Ok(bootstrap_from_counts(&paired_counts(gold, a, b)?, iterations, seed))
}
