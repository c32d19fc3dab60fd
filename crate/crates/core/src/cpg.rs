//! Language embeddings and the contextual parameter generator.
//!
//! A language embedding of size `M` comes from a two-layer network over the
//! typology vector, from a learned per-language vector, or from a fallback
//! (centroid of known languages, or a proxy language). The generator maps it
//! to the flat adapter and biaffine parameter vectors with a bias-free linear
//! map, `θ = W·e`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::ParamLayout;
use crate::numcore::{Tape, Tensor, Var};
use crate::typology::{feature_group_slices, TypologyTable, TYPOLOGY_DIM};

#[derive(Debug, Error, PartialEq)]
pub enum CpgError {
    #[error("typology input has {0} values, expected {TYPOLOGY_DIM}")]
    InputLength(usize),
    #[error("generator expects embeddings of size {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("centroid of an empty set of language embeddings")]
    EmptyCentroid,
    #[error(
        "no learned embedding for language {0:?}; use --langvec-mode typology, centroid or proxy:<code>"
    )]
    Unseen(String),
    #[error("proxy language {0:?} has no learned embedding")]
    UnknownProxy(String),
    #[error("no typology vector for language {0:?}")]
    NoTypology(String),
    #[error("model has no typology network; use learned, centroid or proxy:<code>")]
    NoNetwork,
    #[error("unknown language vector mode {0:?}")]
    BadMode(String),
}

/// How a language embedding was obtained.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Typology,
    Learned,
    Centroid,
    Proxy(String),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Typology => f.write_str("typology"),
            Provenance::Learned => f.write_str("learned"),
            Provenance::Centroid => f.write_str("centroid"),
            Provenance::Proxy(code) => write!(f, "proxy:{code}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageEmbedding {
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl LanguageEmbedding {
    pub fn as_row(&self) -> Tensor {
        Tensor::new(vec![1, self.values.len()], self.values.clone()).expect("row shape")
    }
}

/// Where the language vector used for a sentence comes from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LangVecMode {
    Typology,
    Learned,
    Centroid,
    Proxy(String),
}

impl FromStr for LangVecMode {
    type Err = CpgError;

    fn from_str(s: &str) -> Result<Self, CpgError> {
        match s {
            "typology" => Ok(LangVecMode::Typology),
            "learned" => Ok(LangVecMode::Learned),
            "centroid" => Ok(LangVecMode::Centroid),
            _ => match s.strip_prefix("proxy:") {
                Some(code) if !code.is_empty() => Ok(LangVecMode::Proxy(code.to_string())),
                _ => Err(CpgError::BadMode(s.to_string())),
            },
        }
    }
}

impl TryFrom<String> for LangVecMode {
    type Error = CpgError;

    fn try_from(s: String) -> Result<Self, CpgError> {
        s.parse()
    }
}

impl From<LangVecMode> for String {
    fn from(m: LangVecMode) -> String {
        m.to_string()
    }
}

impl fmt::Display for LangVecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LangVecMode::Typology => f.write_str("typology"),
            LangVecMode::Learned => f.write_str("learned"),
            LangVecMode::Centroid => f.write_str("centroid"),
            LangVecMode::Proxy(code) => write!(f, "proxy:{code}"),
        }
    }
}

/// Two feedforward layers with a ReLU between them, typology → embedding.
/// Weights are stored input-major (`w1` is `289 × hidden`).
#[derive(Clone, Debug, PartialEq)]
pub struct LangEmbedNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LangEmbedNet {
    pub fn zeros(hidden: usize, dim: usize) -> Self {
        LangEmbedNet {
            w1: Tensor::zeros(&[TYPOLOGY_DIM, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, dim]),
            b2: Tensor::zeros(&[dim]),
        }
    }

    pub fn init<R: Rng + ?Sized>(hidden: usize, dim: usize, rng: &mut R) -> Self {
        LangEmbedNet {
            w1: Tensor::randn(&[TYPOLOGY_DIM, hidden], (2.0 / TYPOLOGY_DIM as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[hidden, dim], (2.0 / hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[dim]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn dim(&self) -> usize {
        self.b2.len()
    }

    pub fn embed(&self, typology: &[f64]) -> Result<LanguageEmbedding, CpgError> {
        if typology.len() != TYPOLOGY_DIM {
            return Err(CpgError::InputLength(typology.len()));
        }
        let h: Vec<f64> = (0..self.hidden())
            .map(|k| {
                let s: f64 = typology
                    .iter()
                    .enumerate()
                    .map(|(j, x)| x * self.w1.at(j, k))
                    .sum();
                (s + self.b1.data()[k]).max(0.0)
            })
            .collect();
        let values = (0..self.dim())
            .map(|m| {
                let s: f64 = h.iter().enumerate().map(|(k, x)| x * self.w2.at(k, m)).sum();
                s + self.b2.data()[m]
            })
            .collect();
        Ok(LanguageEmbedding {
            values,
            provenance: Provenance::Typology,
        })
    }
}

/// The language network's parameters on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LangNetVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl LangNetVars {
    /// `[1, M]` embedding of a typology vector.
    pub fn embed(&self, tape: &mut Tape, typology: &[f64]) -> Result<Var, CpgError> {
        if typology.len() != TYPOLOGY_DIM {
            return Err(CpgError::InputLength(typology.len()));
        }
        let x = tape.constant(Tensor::new(vec![1, TYPOLOGY_DIM], typology.to_vec()).expect("row"));
        let h = tape.matmul(x, self.w1);
        let h = tape.add_row(h, self.b1);
        let h = tape.relu(h);
        let e = tape.matmul(h, self.w2);
        Ok(tape.add_row(e, self.b2))
    }
}

/// Generator matrices, one row per generated parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorWeights {
    pub adapters: Tensor,
    pub biaffine: Tensor,
}

/// Generator rows for `layout`: entries whose direct initialization has
/// standard deviation `σ` get rows drawn from `N(0, σ/√M)`, so that a unit
/// scale embedding reproduces the direct initialization; zero-initialized
/// entries (biases, up projections, classifiers) get zero rows. A NaN std
/// (constant-one init) is not supported for generated parameters.
pub fn init_generator<R: Rng + ?Sized>(layout: &ParamLayout, stds: &[f64], dim: usize, rng: &mut R) -> Tensor {
    let scale = 1.0 / (dim as f64).sqrt();
    let mut data = Vec::with_capacity(layout.total() * dim);
    for (e, &std) in layout.entries().iter().zip(stds) {
        assert!(!std.is_nan(), "constant init cannot be generated");
        let t = crate::parser::init_tensor(&[e.len(), dim], std * scale, rng);
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![layout.total(), dim], data).expect("generator shape")
}

/// `W·e` for one generator matrix.
pub fn generate(w: &Tensor, e: &LanguageEmbedding) -> Result<Tensor, CpgError> {
    if w.cols() != e.values.len() {
        return Err(CpgError::Dimension {
            expected: w.cols(),
            got: e.values.len(),
        });
    }
    let data = (0..w.rows())
        .map(|r| w.row(r).iter().zip(&e.values).map(|(a, b)| a * b).sum())
        .collect();
    Ok(Tensor::new(vec![w.rows()], data).expect("vector"))
}

/// Flat adapter and biaffine parameters for one language.
pub fn generate_params(e: &LanguageEmbedding, gw: &GeneratorWeights) -> Result<(Tensor, Tensor), CpgError> {
    Ok((generate(&gw.adapters, e)?, generate(&gw.biaffine, e)?))
}

/// `W·e` on the tape; `e` is `[1, M]`, the result `[P, 1]`.
pub fn generate_on_tape(tape: &mut Tape, w: Var, e: Var) -> Var {
    tape.matmul_t(w, e, false, true)
}

/// Coordinate-wise mean.
pub fn centroid_embedding(trained: &[LanguageEmbedding]) -> Result<LanguageEmbedding, CpgError> {
    let first = trained.first().ok_or(CpgError::EmptyCentroid)?;
    let m = first.values.len();
    let mut values = vec![0.0; m];
    for e in trained {
        if e.values.len() != m {
            return Err(CpgError::Dimension {
                expected: m,
                got: e.values.len(),
            });
        }
        for (acc, v) in values.iter_mut().zip(&e.values) {
            *acc += v;
        }
    }
    for v in &mut values {
        *v /= trained.len() as f64;
    }
    Ok(LanguageEmbedding {
        values,
        provenance: Provenance::Centroid,
    })
}

/// Language vector for `code` under `mode`. `learned` holds the embeddings
/// of the training languages.
pub fn resolve_language_vector(
    code: &str,
    mode: &LangVecMode,
    table: &TypologyTable,
    net: Option<&LangEmbedNet>,
    learned: &BTreeMap<String, Vec<f64>>,
) -> Result<LanguageEmbedding, CpgError> {
    let stored = |c: &str, provenance: Provenance| {
        learned.get(c).map(|v| LanguageEmbedding {
            values: v.clone(),
            provenance,
        })
    };
    match mode {
        LangVecMode::Typology => {
            let net = net.ok_or(CpgError::NoNetwork)?;
            let t = table.get(code).map_err(|_| CpgError::NoTypology(code.to_string()))?;
            net.embed(t.values())
        }
        LangVecMode::Learned => stored(code, Provenance::Learned).ok_or_else(|| CpgError::Unseen(code.to_string())),
        LangVecMode::Centroid => {
            let all: Vec<LanguageEmbedding> = learned
                .values()
                .map(|v| LanguageEmbedding {
                    values: v.clone(),
                    provenance: Provenance::Learned,
                })
                .collect();
            centroid_embedding(&all)
        }
        LangVecMode::Proxy(other) => {
            stored(other, Provenance::Proxy(other.clone())).ok_or_else(|| CpgError::UnknownProxy(other.clone()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCount {
    pub adapters: f64,
    pub biaffine: f64,
    pub total: f64,
}

/// Generator size for embedding size `m` and per-language parameter counts.
pub fn param_count(m: f64, p_ad: f64, p_bf: f64) -> ParamCount {
    ParamCount {
        adapters: m * p_ad,
        biaffine: m * p_bf,
        total: m * (p_ad + p_bf),
    }
}

/// Mean normalized weight per feature group (syntax, phonology, inventory).
/// A feature's weight is the L2 norm of its first-layer weights, normalized
/// so that all features sum to one. All-zero weights give all-zero averages.
pub fn feature_weight_report(net: &LangEmbedNet) -> [f64; 3] {
    let norms: Vec<f64> = (0..TYPOLOGY_DIM)
        .map(|j| net.w1.row(j).iter().map(|w| w * w).sum::<f64>().sqrt())
        .collect();
    let total: f64 = norms.iter().sum();
    let mut out = [0.0; 3];
    if total == 0.0 {
        return out;
    }
    for (g, (s, e)) in feature_group_slices().into_iter().enumerate() {
        out[g] = norms[s..e].iter().map(|v| v / total).sum::<f64>() / (e - s) as f64;
    }
    out
}

/// `code<TAB>provenance<TAB>e1,…,eM` lines.
pub fn write_langvec_tsv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a LanguageEmbedding)>) -> String {
    let mut out = String::new();
    for (code, e) in rows {
        let vals: Vec<String> = e.values.iter().map(f64::to_string).collect();
        writeln!(out, "{code}\t{}\t{}", e.provenance, vals.join(",")).expect("string write");
    }
    out
}
