pub mod cli;
pub mod cluster;
pub mod correlate;
pub mod decompose;
pub mod error;
pub mod geo;
pub mod ingest;
pub mod mobility;
pub mod spatial;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
