//! Training, evaluation, significance testing, and model persistence.

pub mod bundle;
pub mod config;
pub mod eval;
pub mod model;
pub mod train;

use std::path::Path;

pub use bundle::{load_model, save_model, BundleError};
pub use config::{Backbone, ConfigError, CpgMode, TrainConfig};
pub use eval::{bootstrap_significance, score, AttachmentCounts, Metrics};
pub use model::{LangSource, Model, Prediction};
pub use train::{train, EpochLog, TrainReport};

use crate::conllu::{parse_conllu, write_conllu, Split, Treebank};
use crate::cpg::LangVecMode;
use crate::error::{Error, Result};

/// Parses `tb` with the model and scores it against its own gold trees.
pub fn evaluate(model: &Model, tb: &Treebank, mode: &LangVecMode) -> Result<Metrics> {
    let pred = model.parse(&tb.sentences, &tb.lang, mode)?;
    Ok(Metrics::single(&tb.lang, score(&tb.sentences, &pred)?))
}

pub fn read_treebank(path: impl AsRef<Path>, lang: &str, split: Split) -> Result<Treebank> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tb = parse_conllu(&text, lang).map_err(|source| Error::Conllu {
        path: path.display().to_string(),
        source,
    })?;
    tb.split = split;
    Ok(tb)
}

/// CoNLL-U text of `input` with predicted heads and relations.
pub fn parse_file(model: &Model, input: impl AsRef<Path>, lang: &str, mode: &LangVecMode) -> Result<String> {
    let tb = read_treebank(input, lang, Split::Test)?;
    let parsed = Treebank {
        sentences: model.parse(&tb.sentences, lang, mode)?,
        ..tb
    };
    Ok(write_conllu(&parsed))
}
