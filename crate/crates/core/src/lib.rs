//! Open-domain question answering over tables.
//!
//! The pipeline has two stages. A retriever selects a handful of candidate
//! tables from a large corpus, either lexically ([`bm25`]) or with a two-tower
//! dense encoder ([`encoder`], trained by [`training`], searched by
//! [`index`]). A reader ([`reader`]) then scores each candidate and extracts an
//! answer span from a single cell. [`dedup`] prepares the corpus, [`miner`]
//! extracts hard negatives from a first-round retriever, and [`metrics`]
//! evaluates both stages.

pub mod binio;
pub mod bm25;
pub mod config;
pub mod corpus;
pub mod dedup;
pub mod encoder;
pub mod error;
pub mod index;
pub mod metrics;
pub mod miner;
pub mod reader;
pub mod synth;
pub mod table;
pub mod textproc;
pub mod training;

pub use config::Config;
pub use corpus::{load_corpus, load_questions, save_corpus, save_questions, Corpus};
pub use encoder::{Embedding, EncoderParams};
pub use error::{Error, Result};
pub use index::EmbeddingIndex;
pub use metrics::RetrievalRun;
pub use table::{normalize_table, QaExample, Question, Table, TextTablePair};
