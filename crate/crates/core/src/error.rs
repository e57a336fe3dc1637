use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("line {line}: {message}")]
    EdgeList { line: usize, message: String },

    #[error("relation {relation}: expected arity {expected}, found {found}")]
    Arity {
        relation: String,
        expected: usize,
        found: usize,
    },

    #[error("query syntax error at byte {pos}: {message}")]
    QuerySyntax { pos: usize, message: String },

    #[error("query plan error: {0}")]
    Plan(String),

    #[error("index out of bounds: {0}")]
    OutOfBounds(String),

    #[error("invalid trie dump: {0}")]
    TrieDump(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("simulator deadlock at cycle {cycle}: {detail}")]
    Deadlock { cycle: u64, detail: String },

    #[error("pjr cache: {0}")]
    Pjr(String),

    #[error("verification failed: {0}")]
    Verify(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
