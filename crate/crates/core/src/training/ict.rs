//! Pre-training pairs: a short window of table metadata text paired with its
//! table.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;
use crate::table::{Table, TextTablePair};
use crate::textproc::{tokenize, TokenSeq};

pub const MIN_SPAN: usize = 3;
pub const MAX_SPAN: usize = 12;

/// Attempts per requested pair before giving up on finding a new span.
const ATTEMPTS_PER_PAIR: usize = 8;

fn metadata_fields(table: &Table) -> Vec<(&str, TokenSeq)> {
    [Some(table.page_title.as_str()), table.section_title.as_deref(), table.caption.as_deref()]
        .into_iter()
        .flatten()
        .map(|text| (text, tokenize(text)))
        .filter(|(_, seq)| !seq.is_empty())
        .collect()
}

/// Samples up to `per_table` distinct spans per table from its title, section
/// title and caption. Windows are 3–12 tokens, clamped to the field length,
/// and keep the original text of the covered tokens.
pub fn generate_ict_pairs(corpus: &Corpus, per_table: usize, seed: u64) -> Vec<TextTablePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for table in corpus.iter() {
        let fields = metadata_fields(table);
        if fields.is_empty() {
            continue;
        }
        let mut seen = BTreeSet::new();
        for _ in 0..per_table * ATTEMPTS_PER_PAIR {
            if seen.len() == per_table {
                break;
            }
            let (text, seq) = &fields[rng.gen_range(0..fields.len())];
            let n = seq.len();
            let len = rng.gen_range(MIN_SPAN..=MAX_SPAN).min(n);
            let start = rng.gen_range(0..=n - len);
            let from = seq.source_spans[start].0;
            let to = seq.source_spans[start + len - 1].1;
            let span = text[from..to].to_string();
            if seen.insert(span.clone()) {
                pairs.push(TextTablePair {
                    text: span,
                    table_id: table.table_id.clone(),
                });
            }
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textproc::tokens;

    fn table(id: &str, title: &str, section: Option<&str>, caption: Option<&str>) -> Table {
        Table {
            table_id: id.into(),
            page_title: title.into(),
            page_version: "1".into(),
            section_title: section.map(Into::into),
            caption: caption.map(Into::into),
            header: vec!["h".into()],
            rows: vec![vec!["v".into()]],
            is_infobox: false,
        }
    }

    #[test]
    fn short_title_yields_whole_title() {
        let c = Corpus::from_tables([table("t", "Grand Prix", None, None)]).unwrap();
        let pairs = generate_ict_pairs(&c, 2, 0);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].text, "Grand Prix");
        assert_eq!(pairs[0].table_id, "t");
    }

    #[test]
    fn rich_table_gets_requested_count() {
        let c = Corpus::from_tables([table(
            "t",
            "List of tallest buildings in the northern hemisphere by decade",
            Some("Completed towers and their architects since nineteen hundred"),
            Some("Heights are measured to the architectural top of each structure"),
        )])
        .unwrap();
        let pairs = generate_ict_pairs(&c, 2, 7);
        assert_eq!(pairs.len(), 2);
        assert_ne!(pairs[0].text, pairs[1].text);
        for p in &pairs {
            let n = tokens(&p.text).len();
            assert!((MIN_SPAN..=MAX_SPAN).contains(&n), "{n} tokens in {:?}", p.text);
        }
    }

    #[test]
    fn spans_are_contiguous_windows_of_metadata() {
        let t = table("t", "Alpha beta, gamma-delta epsilon", Some("zeta eta theta iota"), Some("Kappa"));
        let fields: Vec<Vec<String>> = ["Alpha beta, gamma-delta epsilon", "zeta eta theta iota", "Kappa"]
            .iter()
            .map(|f| tokens(f))
            .collect();
        let c = Corpus::from_tables([t]).unwrap();
        for seed in 0..20 {
            for p in generate_ict_pairs(&c, 3, seed) {
                let w = tokens(&p.text);
                assert!(fields.iter().any(|f| f.windows(w.len()).any(|x| x == w.as_slice())));
            }
        }
    }

    #[test]
    fn deterministic_and_skips_bare_tables() {
        let c = Corpus::from_tables([
            table("a", "One two three four five six", Some("seven eight nine ten"), None),
            table("b", "!!!", None, None),
        ])
        .unwrap();
        let x = generate_ict_pairs(&c, 4, 11);
        assert_eq!(x, generate_ict_pairs(&c, 4, 11));
        assert!(x.iter().all(|p| p.table_id == "a"));
    }
}
