//! Numeric question answering over long documents by decomposition: small
//! models filter and extract the facts a question needs into a table, a
//! large model writes a script over that table, and the script's output
//! becomes the answer.

pub mod analysis;
pub mod chunking;
pub mod config;
pub mod eval;
pub mod gateway;
pub mod parsers;
pub mod pipeline;
pub mod sandbox;
pub mod tabular;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
