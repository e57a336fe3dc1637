pub mod cli;
pub mod engine;
pub mod error;
pub mod pjr;
pub mod query;
pub mod stats;
pub mod trie;
pub mod pairwise;
pub mod sim;
