//! Synthetic languages for training-level tests.
//!
//! Words belong to four categories with ranks V=3, N=2, A=D=1. Every
//! sentence has exactly one verb. A word's head is the nearest word of higher
//! rank on the preferred side, falling back to the other side; the verb
//! attaches to the root. Two languages differ only in the preferred side, so
//! their surface strings are identically distributed while their trees are
//! mirrored.

#![allow(dead_code)]

use adaparse::conllu::{Sentence, Split, Token, Treebank};
use adaparse::harness::{Backbone, CpgMode, TrainConfig};
use adaparse::typology::{TypologyTable, TypologyVector, SYNTAX_FEATURES, TYPOLOGY_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Right,
    Left,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Cat {
    V,
    N,
    A,
    D,
}

impl Cat {
    fn rank(self) -> u8 {
        match self {
            Cat::V => 3,
            Cat::N => 2,
            Cat::A | Cat::D => 1,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Cat::V => "v",
            Cat::N => "n",
            Cat::A => "a",
            Cat::D => "d",
        }
    }

    fn words(self) -> usize {
        match self {
            Cat::N => 12,
            _ => 6,
        }
    }
}

fn label(dep: Cat, head: Cat, head_after: bool) -> &'static str {
    match (dep, head) {
        (Cat::N, Cat::V) if head_after => "subj",
        (Cat::N, _) => "obj",
        (Cat::A, Cat::N) => "amod",
        (Cat::A, _) => "advmod",
        (Cat::D, Cat::N) => "det",
        (Cat::D, _) => "mark",
        (Cat::V, _) => unreachable!("verbs attach to the root"),
    }
}

pub fn sentence<R: Rng>(side: Side, lang: &str, rng: &mut R) -> Sentence {
    let n = rng.random_range(3..=8);
    let verb = rng.random_range(0..n);
    let cats: Vec<Cat> = (0..n)
        .map(|i| {
            if i == verb {
                Cat::V
            } else {
                match rng.random_range(0..4) {
                    0 | 1 => Cat::N,
                    2 => Cat::A,
                    _ => Cat::D,
                }
            }
        })
        .collect();
    let forms: Vec<String> = cats
        .iter()
        .map(|c| format!("{}{}", c.prefix(), rng.random_range(0..c.words())))
        .collect();
    let tokens = (0..n)
        .map(|i| {
            let higher = |j: &usize| cats[*j].rank() > cats[i].rank();
            let right = (i + 1..n).find(higher);
            let left = (0..i).rev().find(higher);
            let (head, rel) = if cats[i] == Cat::V {
                (0, "root")
            } else {
                let h = match side {
                    Side::Right => right.or(left),
                    Side::Left => left.or(right),
                }
                .expect("the verb outranks every other word");
                (h + 1, label(cats[i], cats[h], h > i))
            };
            Token::new(i + 1, &forms[i], head, rel)
        })
        .collect();
    Sentence {
        tokens,
        comments: Vec::new(),
        lang: lang.to_string(),
    }
}

pub fn treebank(lang: &str, side: Side, count: usize, seed: u64, split: Split) -> Treebank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Treebank {
        sentences: (0..count).map(|_| sentence(side, lang, &mut rng)).collect(),
        lang: lang.to_string(),
        split,
    }
}

/// Typology vectors for "aa" (right-headed), "bb" (left-headed) and the
/// held-out "cc" = 0.25·aa + 0.75·bb. The two training languages share a
/// random background and differ in the first 40 syntax features.
pub fn typology() -> TypologyTable {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let base: Vec<f64> = (0..TYPOLOGY_DIM).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut a = base.clone();
    let mut b = base;
    for j in 0..40.min(SYNTAX_FEATURES) {
        let hi = j % 2 == 0;
        a[j] = if hi { 0.95 } else { 0.05 };
        b[j] = if hi { 0.05 } else { 0.95 };
    }
    let c: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.25 * x + 0.75 * y).collect();
    let mut t = TypologyTable::new();
    for (code, v) in [("aa", a), ("bb", b), ("cc", c)] {
        t.insert(code, TypologyVector::new(v).unwrap()).unwrap();
    }
    t
}

/// A small configuration that trains in seconds.
pub fn toy_config() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: 16,
        d_model: 32,
        layers: 2,
        heads: 2,
        ff: 64,
        maxlen: 16,
        adapter_size: 8,
        arc_dim: 32,
        label_dim: 16,
        lang_dim: 8,
        lang_hidden: 16,
        cpg_mode: CpgMode::Both,
        backbone: Backbone::Frozen,
        ..TrainConfig::default()
    }
}
