//! Multilingual graph-based dependency parsing with language-conditioned
//! adapters and biaffine scorer.

pub mod conllu;
pub mod cpg;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod layout;
pub mod numcore;
pub mod parser;
pub mod typology;

pub use error::{Error, ErrorKind, Result};
