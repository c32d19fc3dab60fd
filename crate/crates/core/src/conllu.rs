//! CoNLL-U reading, writing, and tree validation.
//!
//! Only syntactic words are kept: multiword-token range lines (`3-4`) and
//! empty nodes (`5.1`) are skipped on read and are not regenerated on write.
//! Column values are stored verbatim.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct ConlluError {
    pub line: usize,
    pub msg: String,
}

impl ConlluError {
    fn new(line: usize, msg: impl Into<String>) -> Self {
        ConlluError {
            line,
            msg: msg.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub id: usize,
    pub form: String,
    pub lemma: String,
    pub upos: String,
    pub xpos: String,
    pub feats: String,
    pub head: usize,
    pub deprel: String,
    pub deps: String,
    pub misc: String,
}

impl Token {
    /// A token with only form, head, and relation filled in.
    pub fn new(id: usize, form: &str, head: usize, deprel: &str) -> Self {
        Token {
            id,
            form: form.to_string(),
            lemma: "_".to_string(),
            upos: "_".to_string(),
            xpos: "_".to_string(),
            feats: "_".to_string(),
            head,
            deprel: deprel.to_string(),
            deps: "_".to_string(),
            misc: "_".to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    pub comments: Vec<String>,
    pub lang: String,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn heads(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.head).collect()
    }

    pub fn forms(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.form.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Treebank {
    pub sentences: Vec<Sentence>,
    pub lang: String,
    pub split: Split,
}

impl Treebank {
    pub fn new(lang: &str, split: Split) -> Self {
        Treebank {
            sentences: Vec::new(),
            lang: lang.to_string(),
            split,
        }
    }

    pub fn word_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }
}

/// Parses CoNLL-U text. Sentences are tagged with `lang`; the split is
/// `Train` unless changed by the caller.
pub fn parse_conllu(text: &str, lang: &str) -> Result<Treebank, ConlluError> {
    let mut tb = Treebank::new(lang, Split::Train);
    let mut comments = Vec::new();
    let mut tokens: Vec<Token> = Vec::new();

    let mut flush = |comments: &mut Vec<String>, tokens: &mut Vec<Token>| {
        if !tokens.is_empty() || !comments.is_empty() {
            tb.sentences.push(Sentence {
                tokens: std::mem::take(tokens),
                comments: std::mem::take(comments),
                lang: lang.to_string(),
            });
        }
    };

    for (k, raw) in text.split('\n').enumerate() {
        let line_no = k + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            flush(&mut comments, &mut tokens);
            continue;
        }
        if line.starts_with('#') {
            if !tokens.is_empty() {
                return Err(ConlluError::new(line_no, "comment inside token block"));
            }
            comments.push(line.to_string());
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(ConlluError::new(
                line_no,
                format!("expected 10 tab-separated columns, got {}", cols.len()),
            ));
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let id: usize = cols[0]
            .parse()
            .map_err(|_| ConlluError::new(line_no, format!("invalid token id {:?}", cols[0])))?;
        if id != tokens.len() + 1 {
            return Err(ConlluError::new(
                line_no,
                format!("token id {id} out of sequence, expected {}", tokens.len() + 1),
            ));
        }
        let head: usize = cols[6]
            .parse()
            .map_err(|_| ConlluError::new(line_no, format!("invalid head {:?}", cols[6])))?;
        if head == id {
            return Err(ConlluError::new(line_no, format!("token {id} is its own head")));
        }
        tokens.push(Token {
            id,
            form: cols[1].to_string(),
            lemma: cols[2].to_string(),
            upos: cols[3].to_string(),
            xpos: cols[4].to_string(),
            feats: cols[5].to_string(),
            head,
            deprel: cols[7].to_string(),
            deps: cols[8].to_string(),
            misc: cols[9].to_string(),
        });
    }
    flush(&mut comments, &mut tokens);
    Ok(tb)
}

/// Serializes a treebank; comments precede their sentence's tokens.
pub fn write_conllu(tb: &Treebank) -> String {
    let mut out = String::new();
    for s in &tb.sentences {
        write_sentence(&mut out, s);
    }
    out
}

pub fn write_sentence(out: &mut String, s: &Sentence) {
    for c in &s.comments {
        out.push_str(c);
        out.push('\n');
    }
    for t in &s.tokens {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            t.id, t.form, t.lemma, t.upos, t.xpos, t.feats, t.head, t.deprel, t.deps, t.misc
        )
        .expect("writing to a String");
    }
    out.push('\n');
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TreeViolation {
    NoRoot,
    MultipleRoots(Vec<usize>),
    /// Smallest token id on a cycle.
    Cycle(usize),
    HeadOutOfRange(usize),
}

impl fmt::Display for TreeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeViolation::NoRoot => write!(f, "no token is attached to the root"),
            TreeViolation::MultipleRoots(ids) => write!(f, "multiple roots at tokens {ids:?}"),
            TreeViolation::Cycle(k) => write!(f, "cycle at token {k}"),
            TreeViolation::HeadOutOfRange(k) => write!(f, "head of token {k} out of range"),
        }
    }
}

/// Single-root, acyclic check over a head array (`heads[i]` is the head of
/// token `i + 1`, 0 = root).
pub fn validate_heads(heads: &[usize]) -> Result<(), Vec<TreeViolation>> {
    let n = heads.len();
    let mut problems = Vec::new();
    for (i, &h) in heads.iter().enumerate() {
        if h > n || h == i + 1 {
            problems.push(TreeViolation::HeadOutOfRange(i + 1));
        }
    }
    if !problems.is_empty() {
        return Err(problems);
    }
    if n == 0 {
        return Ok(());
    }
    let roots: Vec<usize> = (1..=n).filter(|&k| heads[k - 1] == 0).collect();
    match roots.len() {
        0 => problems.push(TreeViolation::NoRoot),
        1 => {}
        _ => problems.push(TreeViolation::MultipleRoots(roots)),
    }

    // 0 = unvisited, 1 = on current path, 2 = reaches the root.
    let mut state = vec![0u8; n + 1];
    state[0] = 2;
    for start in 1..=n {
        let mut path = Vec::new();
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            path.push(v);
            v = heads[v - 1];
        }
        if state[v] == 1 {
            let pos = path.iter().position(|&p| p == v).expect("on path");
            let smallest = *path[pos..].iter().min().expect("non-empty cycle");
            problems.push(TreeViolation::Cycle(smallest));
        }
        for p in path {
            state[p] = 2;
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems)
    }
}

pub fn validate_tree(s: &Sentence) -> Result<(), Vec<TreeViolation>> {
    validate_heads(&s.heads())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    const TWO: &str = "1\tHe\the\tPRON\t_\t_\t2\tnsubj\t_\t_\n2\truns\trun\tVERB\t_\t_\t0\troot\t_\t_\n";

    #[test]
    fn parses_minimal_sentence() {
        let tb = parse_conllu(TWO, "en").unwrap();
        assert_eq!(tb.sentences.len(), 1);
        let s = &tb.sentences[0];
        assert_eq!(s.len(), 2);
        assert_eq!(s.heads(), vec![2, 0]);
        assert_eq!(s.lang, "en");
        assert_eq!(s.tokens[1].deprel, "root");
    }

    #[test]
    fn skips_ranges_and_empty_nodes() {
        let text = "1\tIl\t_\t_\t_\t_\t2\tnsubj\t_\t_\n\
                    2\tva\t_\t_\t_\t_\t0\troot\t_\t_\n\
                    3-4\tdu\t_\t_\t_\t_\t_\t_\t_\t_\n\
                    3\tde\t_\t_\t_\t_\t4\tcase\t_\t_\n\
                    4\tle\t_\t_\t_\t_\t2\tobl\t_\t_\n\
                    4.1\tx\t_\t_\t_\t_\t_\t_\t_\t_\n";
        let tb = parse_conllu(text, "fr").unwrap();
        let s = &tb.sentences[0];
        assert_eq!(s.len(), 4);
        assert_eq!(s.tokens[2].form, "de");
        assert_eq!(s.tokens[3].form, "le");
    }

    #[test]
    fn bad_head_names_line() {
        let text = "# c\n1\tHe\t_\t_\t_\t_\tx\tnsubj\t_\t_\n";
        let err = parse_conllu(text, "en").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(err.to_string().contains("head"));
    }

    #[test]
    fn wrong_column_count_is_an_error() {
        let err = parse_conllu("1\tHe\t_\n", "en").unwrap_err();
        assert_eq!(err.line, 1);
    }

    #[test]
    fn empty_input_is_empty_treebank() {
        assert!(parse_conllu("", "en").unwrap().sentences.is_empty());
        assert!(parse_conllu("\n\n", "en").unwrap().sentences.is_empty());
    }

    #[test]
    fn crlf_tolerated() {
        let text = TWO.replace('\n', "\r\n");
        let tb = parse_conllu(&text, "en").unwrap();
        assert_eq!(tb.sentences[0].tokens[1].misc, "_");
    }

    #[test]
    fn writes_comments_first_and_round_trips() {
        let text = format!("# sent_id = 1\n# text = He runs\n{TWO}\n");
        let tb = parse_conllu(&text, "en").unwrap();
        let out = write_conllu(&tb);
        assert!(out.starts_with("# sent_id = 1\n# text = He runs\n1\tHe"));
        assert_eq!(out, text);
        assert_eq!(parse_conllu(&out, "en").unwrap(), tb);
    }

    #[test]
    fn empty_treebank_writes_nothing() {
        assert_eq!(write_conllu(&Treebank::new("en", Split::Test)), "");
    }

    #[test]
    fn validation_cases() {
        assert_eq!(validate_heads(&[2, 0]), Ok(()));
        assert_eq!(
            validate_heads(&[2, 1]),
            Err(vec![TreeViolation::NoRoot, TreeViolation::Cycle(1)])
        );
        assert_eq!(
            validate_heads(&[0, 0]),
            Err(vec![TreeViolation::MultipleRoots(vec![1, 2])])
        );
        assert_eq!(
            validate_heads(&[0, 3, 4, 2]),
            Err(vec![TreeViolation::Cycle(2)])
        );
        assert_eq!(validate_heads(&[0, 5]), Err(vec![TreeViolation::HeadOutOfRange(2)]));
    }

    /// Uniform random single-root tree: attach tokens one at a time in a
    /// random order to an already attached node (the root for the first).
    fn random_tree(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut order: Vec<usize> = (1..=n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut heads = vec![0; n];
        for k in 1..n {
            heads[order[k] - 1] = order[rng.random_range(0..k)];
        }
        heads
    }

    #[test]
    fn random_trees_validate() {
        for n in 1..=6 {
            for seed in 0..200 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let heads = random_tree(n, &mut rng);
                assert_eq!(validate_heads(&heads), Ok(()), "{heads:?}");
            }
        }
    }

    fn arb_token_field() -> impl Strategy<Value = String> {
        "[A-Za-z0-9=|:_.,!?-]{1,8}"
    }

    proptest! {
        #[test]
        fn write_then_parse_is_identity(
            fields in prop::collection::vec(prop::collection::vec(arb_token_field(), 7), 1..8),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let heads = random_tree(fields.len(), &mut rng);
            let tokens = fields
                .iter()
                .zip(&heads)
                .enumerate()
                .map(|(i, (f, &h))| Token {
                    id: i + 1,
                    form: f[0].clone(),
                    lemma: f[1].clone(),
                    upos: f[2].clone(),
                    xpos: f[3].clone(),
                    feats: f[4].clone(),
                    head: h,
                    deprel: f[5].clone(),
                    deps: "_".into(),
                    misc: f[6].clone(),
                })
                .collect();
            let tb = Treebank {
                sentences: vec![Sentence { tokens, comments: vec!["# id = x".into()], lang: "xx".into() }],
                lang: "xx".into(),
                split: Split::Train,
            };
            prop_assert_eq!(parse_conllu(&write_conllu(&tb), "xx").unwrap(), tb);
        }
    }
}
