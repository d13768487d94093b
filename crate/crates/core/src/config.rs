//! Pipeline configuration.
//!
//! A flat `key = value` text file; every key may also be set from the command
//! line. Defaults are desk-scale: the large-scale reference values (batch 256,
//! learning rate 1.25e-5, 200k steps) are reachable by overriding keys.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

macro_rules! config {
    ($( $(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            $( $(#[doc = $doc])* pub $key: $ty, )*
        }

        impl Default for Config {
            fn default() -> Self {
                Config { $( $key: $default, )* }
            }
        }

        impl Config {
            /// Every key with its one-line description.
            pub const KEYS: &'static [(&'static str, &'static str)] = &[
                $( (stringify!($key), concat!($($doc),*)), )*
            ];

            /// Sets one key from its textual value. `-` and `_` are interchangeable.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let key = key.trim().replace('-', "_");
                match key.as_str() {
                    $( stringify!($key) => self.$key = parse_value(&key, value)?, )*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![ $( (stringify!($key), self.$key.to_string()), )* ]
            }
        }
    };
}

config! {
    /// Embedding dimension of both encoder towers.
    embed_dim: usize = 256,
    /// Number of tables retrieved per question.
    top_k: usize = 10,
    /// Retriever training batch size.
    batch_size: usize = 16,
    /// Retriever peak learning rate.
    learning_rate: f64 = 1e-3,
    /// Input dropout rate during training.
    dropout: f64 = 0.2,
    /// Longest answer span, in tokens.
    max_answer_len: usize = 10,
    /// Repeat count for page-title and header tokens in the BM25 index.
    bm25_boost: u32 = 15,
    /// BM25 term-frequency saturation.
    bm25_k1: f64 = 1.2,
    /// BM25 length normalization.
    bm25_b: f64 = 0.75,
    /// Cosine similarity a pair must exceed to be merged during dedup.
    dedup_threshold: f64 = 0.91,
    /// Seed for every random generator in the pipeline.
    seed: u64 = 0,
    /// Hashed feature space size of the encoder towers.
    feature_dims: usize = 1 << 14,
    /// Use segment/row/column feature channels for tables.
    use_structure: bool = true,
    /// Encode tables from title and header only.
    schema_only: bool = false,
    /// Maximum retriever training steps.
    max_steps: usize = 2000,
    /// Fraction of max_steps spent in linear warm-up.
    warmup_fraction: f64 = 0.1,
    /// Steps between dev recall@10 evaluations (0 disables).
    eval_every: usize = 100,
    /// Evaluations without improvement before stopping early.
    patience: usize = 5,
    /// Spans sampled per table when generating pre-training pairs.
    ict_per_table: usize = 2,
    /// Ranked tables scanned per question when mining hard negatives.
    mine_depth: usize = 100,
    /// Reader token representation size.
    reader_dim: usize = 64,
    /// Reader span-scorer hidden width.
    reader_hidden: usize = 64,
    /// Hashed feature space size of the reader.
    reader_feature_dims: usize = 1 << 14,
    /// Reader learning rate.
    reader_learning_rate: f64 = 1e-3,
    /// Reader training steps.
    reader_steps: usize = 2000,
    /// Reader examples per step.
    reader_batch_size: usize = 8,
    /// Allow answers inside header cells.
    reader_include_header: bool = true,
    /// Worker threads (0 = all cores).
    threads: usize = 0,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{}`: {e}", value.trim())))
}

impl Config {
    /// Applies every `key = value` line of `text`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Config::default();
        cfg.apply_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("top_k", self.top_k),
            ("batch_size", self.batch_size),
            ("max_answer_len", self.max_answer_len),
            ("feature_dims", self.feature_dims),
            ("ict_per_table", self.ict_per_table),
            ("mine_depth", self.mine_depth),
            ("reader_dim", self.reader_dim),
            ("reader_hidden", self.reader_hidden),
            ("reader_feature_dims", self.reader_feature_dims),
            ("reader_batch_size", self.reader_batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        if self.bm25_boost == 0 {
            return Err(Error::Config("`bm25_boost` must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.reader_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("`dropout` must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("`warmup_fraction` must lie in [0, 1]".into()));
        }
        if self.bm25_k1 < 0.0 || !(0.0..=1.0).contains(&self.bm25_b) {
            return Err(Error::Config("bm25_k1 >= 0 and bm25_b in [0, 1] required".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_defaults() {
        let c = Config::default();
        assert_eq!(c.embed_dim, 256);
        assert_eq!(c.top_k, 10);
        assert_eq!(c.max_answer_len, 10);
        assert_eq!(c.bm25_boost, 15);
        assert_eq!(c.dedup_threshold, 0.91);
        assert_eq!(c.dropout, 0.2);
        c.validate().unwrap();
    }

    #[test]
    fn parses_file_text() {
        let mut c = Config::default();
        c.apply_text("# comment\nembed-dim = 32\n\nbatch_size=4 # trailing\nuse_structure = false\n")
            .unwrap();
        assert_eq!(c.embed_dim, 32);
        assert_eq!(c.batch_size, 4);
        assert!(!c.use_structure);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let mut c = Config::default();
        assert!(c.apply_text("nope = 1").is_err());
        assert!(c.set("embed_dim", "abc").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = Config::default();
        c.learning_rate = 1.25e-5;
        c.seed = 7;
        let mut d = Config::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn every_key_is_listed() {
        assert_eq!(Config::KEYS.len(), Config::default().entries().len());
        assert!(Config::KEYS.iter().all(|(_, doc)| !doc.is_empty()));
    }

    #[test]
    fn bounds_checked() {
        let mut c = Config::default();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.top_k = 0;
        assert!(c.validate().is_err());
    }
}
