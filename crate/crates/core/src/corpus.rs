//! The table corpus and JSONL readers/writers for tables, questions and
//! pre-training pairs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::table::{QaExample, Table, TextTablePair};

/// Tables keyed by id, iterated in insertion (file) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    tables: IndexMap<String, Table>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tables(tables: impl IntoIterator<Item = Table>) -> Result<Self> {
        let mut corpus = Corpus::new();
        for t in tables {
            corpus.insert(t)?;
        }
        Ok(corpus)
    }

    pub fn insert(&mut self, table: Table) -> Result<()> {
        table.validate()?;
        if self.tables.contains_key(&table.table_id) {
            return Err(Error::DuplicateTable(table.table_id));
        }
        self.tables.insert(table.table_id.clone(), table);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Table> {
        self.tables.get(id)
    }

    pub fn require(&self, id: &str) -> Result<&Table> {
        self.get(id).ok_or_else(|| Error::UnknownTable(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.tables.contains_key(id)
    }

    /// Position of `id` in iteration order.
    pub fn ordinal(&self, id: &str) -> Option<usize> {
        self.tables.get_index_of(id)
    }

    pub fn by_ordinal(&self, ordinal: usize) -> Option<&Table> {
        self.tables.get_index(ordinal).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Table> {
        self.tables.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.tables.keys().map(String::as_str)
    }

    /// A sub-corpus holding only the given ids, in this corpus' order.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Corpus> {
        let wanted: std::collections::HashSet<&str> = ids.into_iter().collect();
        for id in &wanted {
            self.require(id)?;
        }
        Ok(Corpus {
            tables: self
                .tables
                .iter()
                .filter(|(k, _)| wanted.contains(k.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        })
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a Table;
    type IntoIter = indexmap::map::Values<'a, String, Table>;

    fn into_iter(self) -> Self::IntoIter {
        self.tables.values()
    }
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: impl AsRef<Path>,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::Invalid(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads `tables.jsonl`. Arity and duplicate-id errors carry the line number.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut corpus = Corpus::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let table: Table = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        corpus.insert(table).map_err(|e| parse_err(e.to_string()))?;
    }
    Ok(corpus)
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    write_jsonl(path, corpus.iter())
}

pub fn load_questions(path: impl AsRef<Path>) -> Result<Vec<QaExample>> {
    let path = path.as_ref();
    let examples: Vec<QaExample> = read_jsonl(path)?;
    let mut seen = std::collections::HashSet::new();
    for (i, ex) in examples.iter().enumerate() {
        if !seen.insert(ex.id().to_string()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("duplicate question id `{}`", ex.id()),
            });
        }
    }
    Ok(examples)
}

pub fn save_questions(path: impl AsRef<Path>, examples: &[QaExample]) -> Result<()> {
    write_jsonl(path, examples)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<TextTablePair>> {
    read_jsonl(path)
}

pub fn save_pairs(path: impl AsRef<Path>, pairs: &[TextTablePair]) -> Result<()> {
    write_jsonl(path, pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    const VALID: &str = r#"{"table_id":"t1","page_title":"P","page_version":"1","section_title":null,"caption":"c","header":["a","b","c"],"rows":[["1","2","3"]],"is_infobox":false}"#;

    fn write(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_three_tables_in_order() {
        let a = VALID.to_string();
        let b = VALID.replace("\"t1\"", "\"t2\"");
        let c = VALID.replace("\"t1\"", "\"t0\"");
        let f = write(&[&a, &b, &c]);
        let corpus = load_corpus(f.path()).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.ids().collect::<Vec<_>>(), ["t1", "t2", "t0"]);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let f = write(&[]);
        assert!(load_corpus(f.path()).unwrap().is_empty());
    }

    #[test]
    fn arity_error_names_line() {
        let bad = VALID.replace(r#"["1","2","3"]"#, r#"["1","2"]"#);
        let f = write(&[VALID, &bad]);
        match load_corpus(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_names_line() {
        let f = write(&[VALID, "", "{not json"]);
        match load_corpus(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let f = write(&[VALID, VALID]);
        assert!(load_corpus(f.path()).is_err());
    }

    #[test]
    fn round_trip() {
        let b = VALID
            .replace("\"t1\"", "\"t2\"")
            .replace("\"caption\":\"c\"", "\"caption\":null");
        let f = write(&[VALID, &b]);
        let corpus = load_corpus(f.path()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        save_corpus(out.path(), &corpus).unwrap();
        assert_eq!(load_corpus(out.path()).unwrap(), corpus);
        let text = std::fs::read_to_string(out.path()).unwrap();
        assert_eq!(text.lines().next().unwrap(), VALID);
    }

    #[test]
    fn question_file_with_null_gold() {
        let f = write(&[
            r#"{"question_id":"q1","text":"who","gold_table_id":null,"answers":[]}"#,
            r#"{"question_id":"q2","text":"what","gold_table_id":"t1","answers":["x"]}"#,
        ]);
        let qs = load_questions(f.path()).unwrap();
        assert_eq!(qs[0].gold_table_id, None);
        assert_eq!(qs[1].gold_table_id.as_deref(), Some("t1"));
        assert_eq!(qs[1].answers, vec!["x".to_string()]);
    }
}
