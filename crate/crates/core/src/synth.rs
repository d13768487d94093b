//! Synthetic corpora for end-to-end checks of retrieval and hard-negative
//! training.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;
use crate::error::Result;
use crate::table::{QaExample, Question, Table};

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
const FIELDS: &[&str] = &["founded", "region", "status", "leader", "motto", "symbol"];
const REGIONS: &[&str] = &["north", "south", "east", "west", "central", "coastal", "upland", "island"];
const ATTRIBUTES: &[&str] = &[
    "population", "area", "elevation", "currency", "anthem", "capital", "founder", "climate", "language",
    "religion", "border", "river",
];

/// Generator of unique pseudo-words such as `kovaru`.
struct Words {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Words {
    fn new(seed: u64) -> Self {
        Words {
            rng: ChaCha8Rng::seed_from_u64(seed),
            used: HashSet::new(),
        }
    }

    fn fresh(&mut self) -> String {
        loop {
            let syllables = self.rng.gen_range(3..=4);
            let w: String = (0..syllables)
                .map(|_| {
                    format!(
                        "{}{}",
                        ONSETS.choose(&mut self.rng).unwrap(),
                        VOWELS.choose(&mut self.rng).unwrap()
                    )
                })
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

/// Corpus plus disjoint train / dev / test question splits.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub corpus: Corpus,
    pub train: Vec<QaExample>,
    pub dev: Vec<QaExample>,
    pub test: Vec<QaExample>,
}

impl SyntheticSet {
    pub fn all_questions(&self) -> Vec<QaExample> {
        self.train.iter().chain(&self.dev).chain(&self.test).cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyedSpec {
    pub questions: usize,
    /// Distractor tables; each carries one key token from
    /// `distractors_per_question` different questions.
    pub distractor_tables: usize,
    pub distractors_per_question: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for KeyedSpec {
    fn default() -> Self {
        KeyedSpec {
            questions: 100,
            distractor_tables: 100,
            distractors_per_question: 5,
            dev: 10,
            test: 30,
        }
    }
}

fn qa(id: String, text: String, gold: &str, answer: &str) -> QaExample {
    QaExample {
        question: Question { question_id: id, text },
        gold_table_id: Some(gold.to_string()),
        answers: vec![answer.to_string()],
    }
}

fn split(mut questions: Vec<QaExample>, dev: usize, test: usize, rng: &mut ChaCha8Rng) -> (Vec<QaExample>, Vec<QaExample>, Vec<QaExample>) {
    questions.shuffle(rng);
    let test_set = questions.split_off(questions.len().saturating_sub(test));
    let dev_set = questions.split_off(questions.len().saturating_sub(dev));
    (questions, dev_set, test_set)
}

fn filler_rows(rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    let mut fields: Vec<&str> = FIELDS.to_vec();
    fields.shuffle(rng);
    fields
        .into_iter()
        .take(3)
        .map(|f| {
            let v = match f {
                "founded" => rng.gen_range(1800..2020).to_string(),
                _ => REGIONS.choose(rng).unwrap().to_string(),
            };
            vec![f.to_string(), v]
        })
        .collect()
}

/// Each question names a unique two-token key that also forms its gold
/// table's title. Distractor titles mix single key tokens of several
/// questions, so every question has lexical distractors sharing one token.
pub fn keyed_retrieval_set(spec: KeyedSpec, seed: u64) -> Result<SyntheticSet> {
    let mut words = Words::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let keys: Vec<[String; 2]> = (0..spec.questions).map(|_| [words.fresh(), words.fresh()]).collect();
    let mut tables = Vec::new();
    let mut questions = Vec::new();
    for (i, key) in keys.iter().enumerate() {
        let id = format!("gold{i:03}");
        let rows = filler_rows(&mut rng);
        let (field, answer) = (rows[0][0].clone(), rows[0][1].clone());
        tables.push(Table {
            table_id: id.clone(),
            page_title: format!("{} {}", key[0], key[1]),
            page_version: "1".into(),
            section_title: None,
            caption: None,
            header: vec!["attribute".into(), "value".into()],
            rows,
            is_infobox: false,
        });
        questions.push(qa(
            format!("q{i:03}"),
            format!("what is the {field} of {} {}", key[0], key[1]),
            &id,
            &answer,
        ));
    }
    let n_d = spec.distractor_tables.max(1);
    let stride = (n_d / spec.distractors_per_question.max(1)).max(1);
    let mut titles: Vec<Vec<String>> = vec![Vec::new(); n_d];
    for (q, key) in keys.iter().enumerate() {
        for j in 0..spec.distractors_per_question {
            titles[(q + j * stride) % n_d].push(key[j % 2].clone());
        }
    }
    for (d, title) in titles.into_iter().enumerate() {
        tables.push(Table {
            table_id: format!("dist{d:03}"),
            page_title: title.join(" "),
            page_version: "1".into(),
            section_title: None,
            caption: None,
            header: vec!["attribute".into(), "value".into()],
            rows: filler_rows(&mut rng),
            is_infobox: false,
        });
    }
    let (train, dev, test) = split(questions, spec.dev, spec.test, &mut rng);
    Ok(SyntheticSet {
        corpus: Corpus::from_tables(tables)?,
        train,
        dev,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NearDuplicateSpec {
    pub entities: usize,
    /// Attribute cells per table.
    pub facts: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for NearDuplicateSpec {
    fn default() -> Self {
        NearDuplicateSpec {
            entities: 100,
            facts: 5,
            dev: 0,
            test: 30,
        }
    }
}

/// Every entity has a gold table and a near-duplicate sharing its title and
/// all cells but one. The question asks for the attribute held only by the
/// gold table's differing cell; the duplicate's version of that cell names a
/// different attribute and value, so it does not contain the answer.
pub fn near_duplicate_set(spec: NearDuplicateSpec, seed: u64) -> Result<SyntheticSet> {
    let mut words = Words::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0_0b1e);
    let facts = spec.facts.clamp(1, ATTRIBUTES.len() - 1);
    let mut tables = Vec::new();
    let mut questions = Vec::new();
    for e in 0..spec.entities {
        let key = format!("{} {}", words.fresh(), words.fresh());
        let mut attrs: Vec<&str> = ATTRIBUTES.to_vec();
        attrs.shuffle(&mut rng);
        let cells: Vec<String> = attrs[..facts].iter().map(|a| format!("{a} {}", words.fresh())).collect();
        let row = rng.gen_range(0..facts);
        let mut dup_cells = cells.clone();
        dup_cells[row] = format!("{} {}", attrs[facts], words.fresh());
        let table = |id: String, version: &str, cells: &[String]| Table {
            table_id: id,
            page_title: key.clone(),
            page_version: version.into(),
            section_title: None,
            caption: None,
            header: vec!["fact".into()],
            rows: cells.iter().map(|c| vec![c.clone()]).collect(),
            is_infobox: false,
        };
        // Randomize which id the gold table gets so id order carries no signal.
        let (gold_id, dup_id) = if rng.gen::<bool>() {
            (format!("e{e:03}a"), format!("e{e:03}b"))
        } else {
            (format!("e{e:03}b"), format!("e{e:03}a"))
        };
        let answer = cells[row].split(' ').nth(1).unwrap().to_string();
        questions.push(qa(
            format!("q{e:03}"),
            format!("what is the {} of {key}", attrs[row]),
            &gold_id,
            &answer,
        ));
        tables.push(table(gold_id, "1", &cells));
        tables.push(table(dup_id, "2", &dup_cells));
    }
    tables.sort_by(|a, b| a.table_id.cmp(&b.table_id));
    let (train, dev, test) = split(questions, spec.dev, spec.test, &mut rng);
    Ok(SyntheticSet {
        corpus: Corpus::from_tables(tables)?,
        train,
        dev,
        test,
    })
}
