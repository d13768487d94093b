//! Tables, questions and the records that tie them together.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A cell grid plus the page metadata it was extracted from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub table_id: String,
    pub page_title: String,
    /// Opaque revision identifier. Two tables share a page version iff both
    /// `page_title` and `page_version` are equal.
    pub page_version: String,
    pub section_title: Option<String>,
    pub caption: Option<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    #[serde(default)]
    pub is_infobox: bool,
}

impl Table {
    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_columns(&self) -> usize {
        self.header.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.header.is_empty() {
            return Err(Error::InvalidTable {
                id: self.table_id.clone(),
                message: "header is empty".into(),
            });
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != self.header.len() {
                return Err(Error::InvalidTable {
                    id: self.table_id.clone(),
                    message: format!(
                        "row {} has {} cells, header has {}",
                        i,
                        row.len(),
                        self.header.len()
                    ),
                });
            }
        }
        Ok(())
    }

    /// True when both tables come from the same revision of the same page.
    pub fn same_page_version(&self, other: &Table) -> bool {
        self.page_title == other.page_title && self.page_version == other.page_version
    }
}

/// Transposes infobox tables so their keys become the header.
///
/// The first column of the data rows is promoted to the header and every
/// remaining column becomes a data row; the original header row (typically
/// something like `["Field", "Value"]`) is dropped. Non-infobox tables are
/// returned as-is. The output always has `is_infobox == false`, which makes
/// the operation idempotent.
pub fn normalize_table(mut table: Table) -> Table {
    if !table.is_infobox {
        return table;
    }
    table.is_infobox = false;
    if table.rows.is_empty() {
        return table;
    }

    let columns = table.header.len();
    let header: Vec<String> = table.rows.iter().map(|r| r[0].clone()).collect();
    let rows: Vec<Vec<String>> = (1..columns)
        .map(|c| table.rows.iter().map(|r| r[c].clone()).collect())
        .collect();
    debug_assert!(rows.iter().all(|r: &Vec<String>| r.len() == header.len()));

    table.header = header;
    table.rows = rows;
    table
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub text: String,
}

/// A question with its gold table and reference answers.
///
/// `gold_table_id` is optional on disk so that unlabeled question files can
/// share the format; operations that need supervision check for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    #[serde(flatten)]
    pub question: Question,
    pub gold_table_id: Option<String>,
    #[serde(default)]
    pub answers: Vec<String>,
}

impl QaExample {
    pub fn id(&self) -> &str {
        &self.question.question_id
    }

    pub fn text(&self) -> &str {
        &self.question.text
    }
}

/// A pre-training pair: a text span and the table it was sampled next to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextTablePair {
    pub text: String,
    pub table_id: String,
}
