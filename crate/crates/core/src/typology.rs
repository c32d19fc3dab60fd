//! Typological feature vectors (syntax, phonology, phonetic inventory).
//!
//! File format: an optional header `#features<TAB>name1,…,name289`, then one
//! `code<TAB>v1,…,v289` line per language. Values must already be imputed
//! and lie in `[0, 1]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const SYNTAX_FEATURES: usize = 103;
pub const PHONOLOGY_FEATURES: usize = 28;
pub const INVENTORY_FEATURES: usize = 158;
pub const TYPOLOGY_DIM: usize = SYNTAX_FEATURES + PHONOLOGY_FEATURES + INVENTORY_FEATURES;

#[derive(Debug, Error)]
pub enum TypologyError {
    #[error("line {line}: language {code:?}: expected {TYPOLOGY_DIM}, got {got}")]
    Length { line: usize, code: String, got: usize },
    #[error("line {line}: language {code:?}: value {value} at index {index} outside [0, 1]")]
    Range {
        line: usize,
        code: String,
        index: usize,
        value: f64,
    },
    #[error("line {line}: language {code:?}: cannot parse value {token:?}")]
    Number { line: usize, code: String, token: String },
    #[error("line {line}: duplicate language {code:?}")]
    Duplicate { line: usize, code: String },
    #[error("line {line}: expected `code<TAB>values`")]
    Malformed { line: usize },
    #[error("header names {0} features, expected {TYPOLOGY_DIM}")]
    Header(usize),
    #[error("no typology vector for language {0:?}")]
    Missing(String),
    #[error("expected {TYPOLOGY_DIM} values, got {0}")]
    BadVector(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The three feature groups as `(start, end)` index ranges.
pub fn feature_group_slices() -> [(usize, usize); 3] {
    [
        (0, SYNTAX_FEATURES),
        (SYNTAX_FEATURES, SYNTAX_FEATURES + PHONOLOGY_FEATURES),
        (SYNTAX_FEATURES + PHONOLOGY_FEATURES, TYPOLOGY_DIM),
    ]
}

pub const GROUP_NAMES: [&str; 3] = ["syntax", "phonology", "inventory"];

#[derive(Clone, Debug, PartialEq)]
pub struct TypologyVector(Vec<f64>);

impl TypologyVector {
    pub fn new(values: Vec<f64>) -> Result<Self, TypologyError> {
        if values.len() != TYPOLOGY_DIM {
            return Err(TypologyError::BadVector(values.len()));
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(TypologyError::Range {
                line: 0,
                code: String::new(),
                index,
                value,
            });
        }
        Ok(TypologyVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn syntax(&self) -> &[f64] {
        &self.0[..SYNTAX_FEATURES]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TypologyTable {
    entries: BTreeMap<String, TypologyVector>,
    feature_names: Option<Vec<String>>,
}

impl TypologyTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, code: &str, v: TypologyVector) -> Result<(), TypologyError> {
        if self.entries.contains_key(code) {
            return Err(TypologyError::Duplicate {
                line: 0,
                code: code.to_string(),
            });
        }
        self.entries.insert(code.to_string(), v);
        Ok(())
    }

    pub fn get(&self, code: &str) -> Result<&TypologyVector, TypologyError> {
        self.entries
            .get(code)
            .ok_or_else(|| TypologyError::Missing(code.to_string()))
    }

    pub fn contains(&self, code: &str) -> bool {
        self.entries.contains_key(code)
    }

    /// Entries in code order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &TypologyVector)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    pub fn set_feature_names(&mut self, names: Vec<String>) -> Result<(), TypologyError> {
        if names.len() != TYPOLOGY_DIM {
            return Err(TypologyError::Header(names.len()));
        }
        self.feature_names = Some(names);
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, TypologyError> {
        let mut table = TypologyTable::new();
        for (k, raw) in text.lines().enumerate() {
            let line_no = k + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#features\t") {
                let names: Vec<String> = rest.split(',').map(|s| s.trim().to_string()).collect();
                table.set_feature_names(names)?;
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let (code, values) = line
                .split_once('\t')
                .ok_or(TypologyError::Malformed { line: line_no })?;
            let code = code.trim();
            if code.is_empty() {
                return Err(TypologyError::Malformed { line: line_no });
            }
            let parsed = values
                .split(',')
                .map(|tok| {
                    tok.trim().parse::<f64>().map_err(|_| TypologyError::Number {
                        line: line_no,
                        code: code.to_string(),
                        token: tok.to_string(),
                    })
                })
                .collect::<Result<Vec<f64>, _>>()?;
            if parsed.len() != TYPOLOGY_DIM {
                return Err(TypologyError::Length {
                    line: line_no,
                    code: code.to_string(),
                    got: parsed.len(),
                });
            }
            let vector = TypologyVector::new(parsed).map_err(|e| match e {
                TypologyError::Range { index, value, .. } => TypologyError::Range {
                    line: line_no,
                    code: code.to_string(),
                    index,
                    value,
                },
                other => other,
            })?;
            if table.contains(code) {
                return Err(TypologyError::Duplicate {
                    line: line_no,
                    code: code.to_string(),
                });
            }
            table.entries.insert(code.to_string(), vector);
        }
        Ok(table)
    }

    /// Serializes in the same format `parse` reads. Values use Rust's
    /// shortest round-trip formatting, so `parse(to_text(t)) == t`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(names) = &self.feature_names {
            writeln!(out, "#features\t{}", names.join(",")).expect("string write");
        }
        for (code, v) in &self.entries {
            let vals: Vec<String> = v.values().iter().map(|x| x.to_string()).collect();
            writeln!(out, "{code}\t{}", vals.join(",")).expect("string write");
        }
        out
    }
}

pub fn load_typology(path: impl AsRef<Path>) -> Result<TypologyTable, TypologyError> {
    let text = std::fs::read_to_string(path)?;
    TypologyTable::parse(&text)
}
