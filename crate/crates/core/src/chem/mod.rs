//! Chemical I/O: kekulized SMILES, line and coordinate-block corpora, valence
//! tables and a deterministic 2D layout.

mod corpus;
mod layout;
mod smiles;
mod valence;

pub use corpus::{read_corpus, Corpus, CorpusFormat, RecordError};
pub use layout::layout_2d;
pub use smiles::{parse_smiles, tokenize, write_smiles, SmilesToken};
pub use valence::{check_valency, ValenceTable, ValencyReport};

use std::path::PathBuf;

use thiserror::Error;

use crate::graph::GraphError;

#[derive(Debug, Error)]
pub enum ChemError {
    #[error("empty SMILES input")]
    EmptyInput,
    #[error("unknown atom symbol {symbol:?} at position {pos}")]
    UnknownAtomSymbol { symbol: String, pos: usize },
    #[error("aromatic notation at position {pos}; input must be kekulized")]
    AromaticInputRejected { pos: usize },
    #[error("unbalanced parentheses at position {pos}")]
    UnbalancedParentheses { pos: usize },
    #[error("ring bond {0} is never closed")]
    DanglingRingBond(u16),
    #[error("unsupported SMILES syntax {ch:?} at position {pos}")]
    UnsupportedSyntax { ch: char, pos: usize },
    #[error("unexpected token at position {pos}")]
    UnexpectedToken { pos: usize },
    #[error("conflicting bond orders on ring closure at position {pos}")]
    RingBondConflict { pos: usize },
    #[error("graph is disconnected")]
    DisconnectedGraph,
    #[error("label {0:?} is a cluster, not an atom")]
    NotAnAtom(String),
    #[error("symbol {0:?} missing from valence table")]
    MissingValence(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}
