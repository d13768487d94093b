//! Built-in invariant checks on generated fixtures.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabula_core::dedup::dedup_corpus;
use tabula_core::encoder::{EncoderParams, EncoderShape};
use tabula_core::index::search;
use tabula_core::metrics::{em_f1, mcnemar_counts, recall_at_k, RunTag};
use tabula_core::reader::{check_reader_gradients, enumerate_spans, prepare_examples, ReaderParams, ReaderShape};
use tabula_core::textproc::{tokens, MIN_HASH_DIMS};
use tabula_core::training::{check_gradients, hard_negative_loss, in_batch_loss, softmax, FeatureBatch, Matrix, ScoreBatch, MASKED_LOGIT};
use tabula_core::{Config, Corpus, Embedding, EmbeddingIndex, QaExample, Question, RetrievalRun, Table};

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn table(id: &str, title: &str, version: &str, header: &[&str], rows: &[&[&str]]) -> Table {
    Table {
        table_id: id.into(),
        page_title: title.into(),
        page_version: version.into(),
        section_title: None,
        caption: None,
        header: header.iter().map(|s| s.to_string()).collect(),
        rows: rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect(),
        is_infobox: false,
    }
}

fn qa(id: &str, text: &str, gold: &str, answers: &[&str]) -> QaExample {
    QaExample {
        question: Question {
            question_id: id.into(),
            text: text.into(),
        },
        gold_table_id: Some(gold.into()),
        answers: answers.iter().map(|s| s.to_string()).collect(),
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = rng.gen_range(-scale..scale);
    }
    m
}

fn loss_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for b in [2usize, 4, 8, 16] {
        let plain = in_batch_loss(&ScoreBatch {
            scores: Matrix::zeros(b, b),
            hard: None,
        })
        .map_err(|e| e.to_string())?;
        let hard = hard_negative_loss(&ScoreBatch {
            scores: Matrix::zeros(b, b),
            hard: Some(Matrix::zeros(b, b)),
        })
        .map_err(|e| e.to_string())?;
        worst = worst
            .max((plain.loss - (b as f64).ln()).abs())
            .max((hard.loss - (2.0 * b as f64).ln()).abs());
    }
    ensure(worst < 1e-9, format!("max deviation from ln B / ln 2B = {worst:.2e}"))
}

fn hard_negative_limit(rng: &mut ChaCha8Rng) -> Outcome {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let b = rng.gen_range(2..10);
        let scores = random_matrix(rng, b, b, 5.0);
        let plain = in_batch_loss(&ScoreBatch {
            scores: scores.clone(),
            hard: None,
        })
        .map_err(|e| e.to_string())?;
        let hard = hard_negative_loss(&ScoreBatch {
            scores,
            hard: Some(Matrix::filled(b, b, MASKED_LOGIT)),
        })
        .map_err(|e| e.to_string())?;
        worst = worst.max((plain.loss - hard.loss).abs());
    }
    ensure(worst < 1e-6, format!("max |difference| over 100 matrices = {worst:.2e}"))
}

fn softmax_properties(rng: &mut ChaCha8Rng) -> Outcome {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(1..20);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let c = rng.gen_range(-100.0..100.0);
        let p = softmax(&x);
        let shifted = softmax(&x.iter().map(|v| v + c).collect::<Vec<_>>());
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        for (a, b) in p.iter().zip(&shifted) {
            worst = worst.max((a - b).abs());
        }
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err("probability outside [0, 1]".into());
        }
    }
    ensure(worst < 1e-12, format!("max sum/shift deviation = {worst:.2e}"))
}

fn encoder_gradients(seed: u64) -> Outcome {
    let mut p = EncoderParams::init(EncoderShape::new(6, 4096), seed).map_err(|e| e.to_string())?;
    for w in p.question.weights.iter_mut().chain(p.table.weights.iter_mut()) {
        *w *= 30.0;
    }
    let tables = [
        table("t0", "Rivers of Peru", "1", &["name", "length"], &[&["amazon", "6400 km"]]),
        table("t1", "Volcanoes of Chile", "1", &["name", "height"], &[&["llullaillaco", "6739 m"]]),
        table("t2", "Lakes of Canada", "1", &["name", "area"], &[&["great bear", "31153 km2"]]),
        table("t3", "Deserts of Asia", "1", &["name", "area"], &[&["gobi", "1295000 km2"]]),
    ];
    let questions = ["longest river peru", "highest volcano chile", "largest canadian lake", "asian desert area"];
    let negatives = [Some(1), None, Some(0), Some(2)];
    let batch = FeatureBatch {
        questions: questions.iter().map(|q| p.question_features(q)).collect(),
        tables: tables.iter().map(|t| p.table_features(t)).collect(),
        table_ids: tables.iter().map(|t| t.table_id.clone()).collect(),
        negatives: negatives
            .iter()
            .map(|n| n.map(|j: usize| (tables[j].table_id.clone(), p.table_features(&tables[j]))))
            .collect(),
    };
    let gc = check_gradients(&p, &batch, 1e-3).map_err(|e| e.to_string())?;
    ensure(
        gc.max_rel_error < 1e-4,
        format!("{} coordinates, max relative error {:.2e}", gc.checked, gc.max_rel_error),
    )
}

fn reader_gradients(seed: u64) -> Outcome {
    let shape = ReaderShape {
        r: 6,
        hidden: 5,
        feature_dims: MIN_HASH_DIMS,
        include_header: true,
    };
    let mut rp = ReaderParams::init(shape, seed).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for x in rp.embedding.iter_mut() {
        *x *= 5.0;
    }
    for x in rp.b1.iter_mut().chain(rp.wc.iter_mut()) {
        *x = rng.gen_range(-0.5..0.5);
    }
    let corpus = Corpus::from_tables([
        table("g", "Capitals", "1", &["city", "country"], &[&["paris", "france"], &["berlin", "germany"]]),
        table("o1", "Rivers", "1", &["river"], &[&["seine basin"]]),
        table("o2", "Mountains", "1", &["mountain", "height"], &[&["mont blanc", "4808"]]),
    ])
    .map_err(|e| e.to_string())?;
    let mut run = RetrievalRun::new(RunTag::File);
    run.insert("q", vec![("o1".into(), 2.0), ("g".into(), 1.0), ("o2".into(), 0.5)]);
    let cfg = Config {
        max_answer_len: 3,
        ..Config::default()
    };
    let examples = [qa("q", "capital of france", "g", &["paris"])];
    let (prepared, _) = prepare_examples(&rp.shape, Some(&run), &examples, &corpus, &cfg).map_err(|e| e.to_string())?;
    let ex = prepared.first().ok_or("fixture produced no training example")?;
    let gc = check_reader_gradients(&rp, ex, 1e-3);
    ensure(
        gc.max_rel_error < 1e-4,
        format!("{} coordinates, max relative error {:.2e}", gc.checked, gc.max_rel_error),
    )
}

fn span_count(rng: &mut ChaCha8Rng) -> Outcome {
    let words = ["a", "b", "c", "d", "e"];
    for _ in 0..50 {
        let cols = rng.gen_range(1..4);
        let cell = |rng: &mut ChaCha8Rng| -> String {
            let n = rng.gen_range(0..6);
            (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ")
        };
        let header: Vec<String> = (0..cols).map(|_| cell(rng)).collect();
        let rows: Vec<Vec<String>> = (0..rng.gen_range(0..4)).map(|_| (0..cols).map(|_| cell(rng)).collect()).collect();
        let t = Table {
            header,
            rows,
            ..table("t", "T", "1", &[], &[])
        };
        let max_len = rng.gen_range(1..5);
        let expected: usize = t
            .header
            .iter()
            .chain(t.rows.iter().flatten())
            .map(|c| {
                let l = tokens(c).len();
                (1..=l.min(max_len)).map(|len| l - len + 1).sum::<usize>()
            })
            .sum();
        let got = enumerate_spans(&t, max_len).len();
        if got != expected {
            return Err(format!("enumerated {got} spans, closed form gives {expected}"));
        }
    }
    Ok("50 random tables match the closed form".into())
}

fn mips_exactness(rng: &mut ChaCha8Rng) -> Outcome {
    let (n, d) = (300, 32);
    let ids: Vec<String> = (0..n).map(|i| format!("t{i:04}")).collect();
    let vectors: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let idx = EmbeddingIndex::new(d, ids.clone(), vectors).map_err(|e| e.to_string())?;
    for _ in 0..20 {
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut brute: Vec<(f64, &String)> = (0..n).map(|i| (idx.score(i, &q), &ids[i])).collect();
        brute.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        for k in [1, 10, 50] {
            let got = search(&idx, &Embedding(q.clone()), k).map_err(|e| e.to_string())?;
            let expected: Vec<&String> = brute.iter().take(k).map(|(_, id)| *id).collect();
            let got: Vec<&String> = got.iter().map(|(id, _)| id).collect();
            if got != expected {
                return Err(format!("top-{k} differs from brute force"));
            }
        }
    }
    Ok("20 queries, k in {1, 10, 50}".into())
}

fn dedup_determinism() -> Outcome {
    let rows: &[&[&str]] = &[&["alpha", "1"], &["beta", "2"], &["gamma", "3"]];
    let corpus = Corpus::from_tables([
        table("p1v1", "Page one", "1", &["name", "n"], rows),
        table("p1v2", "Page one", "2", &["name", "n"], rows),
        table("p1v3", "Page one", "3", &["name", "n"], &[&["delta", "4"], &["epsilon", "5"]]),
        table("p2v1", "Page two", "1", &["name", "n"], rows),
        table("p2v1b", "Page two", "1", &["name", "n"], rows),
    ])
    .map_err(|e| e.to_string())?;
    let first = dedup_corpus(&corpus, 0.91);
    for _ in 0..5 {
        let again = dedup_corpus(&corpus, 0.91);
        if again.mapping != first.mapping || again.corpus.ids().ne(first.corpus.ids()) {
            return Err("dedup output differs between runs".into());
        }
    }
    let merged = first.mapping.get("p1v2").map(String::as_str) == Some("p1v1");
    let kept_apart = first.mapping.get("p2v1b").map(String::as_str) == Some("p2v1b");
    ensure(
        merged && kept_apart && first.corpus.len() == 4,
        format!("{} tables -> {}", corpus.len(), first.corpus.len()),
    )
}

fn corrupted_checkpoint(seed: u64) -> Outcome {
    let p = EncoderParams::init(EncoderShape::new(4, MIN_HASH_DIMS), seed).map_err(|e| e.to_string())?;
    let mut bytes = p.to_bytes();
    bytes.truncate(bytes.len() - 7);
    let err = match EncoderParams::from_bytes(Path::new("fixture.ckpt"), &bytes) {
        Ok(_) => return Err("truncated checkpoint loaded".into()),
        Err(e) => e.to_string(),
    };
    let mut bad_magic = p.to_bytes();
    bad_magic[0] ^= 0xff;
    if EncoderParams::from_bytes(Path::new("fixture.ckpt"), &bad_magic).is_ok() {
        return Err("checkpoint with a bad magic loaded".into());
    }
    ensure(err.contains("offset"), err)
}

fn metrics(rng: &mut ChaCha8Rng) -> Outcome {
    let (em, f1) = em_f1("red album", &["the red album blues"]);
    if em != 0 || (f1 - 0.8).abs() > 1e-12 {
        return Err(format!("em_f1 gave ({em}, {f1})"));
    }
    let m = mcnemar_counts(5, 15);
    if (m.p_value - 0.044).abs() > 0.002 {
        return Err(format!("mcnemar(5, 15) p = {}", m.p_value));
    }
    let examples: Vec<QaExample> = (0..20).map(|i| qa(&format!("q{i}"), "x", &format!("t{i}"), &[])).collect();
    let mut run = RetrievalRun::new(RunTag::File);
    for e in &examples {
        let mut ranking: Vec<(String, f64)> = (0..20).map(|j| (format!("t{j}"), rng.gen::<f64>())).collect();
        ranking.sort_by(|a, b| b.1.total_cmp(&a.1));
        run.insert(e.id(), ranking);
    }
    let mut prev = 0.0;
    for k in 1..=20 {
        let r = recall_at_k(&run, &examples, k, None).map_err(|e| e.to_string())?;
        if r < prev {
            return Err(format!("recall@{k} = {r} < recall@{} = {prev}", k - 1));
        }
        prev = r;
    }
    ensure(prev == 1.0, format!("em_f1 (0, 0.8), mcnemar p {:.4}, recall monotone", m.p_value))
}

/// Runs every check; the report depends only on `seed`.
pub fn run_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let results: Vec<(&'static str, Outcome)> = vec![
        ("loss_oracle", loss_oracle()),
        ("hard_negative_limit", hard_negative_limit(&mut rng)),
        ("softmax_properties", softmax_properties(&mut rng)),
        ("encoder_gradients", encoder_gradients(seed)),
        ("reader_gradients", reader_gradients(seed)),
        ("span_enumeration", span_count(&mut rng)),
        ("mips_exactness", mips_exactness(&mut rng)),
        ("dedup_determinism", dedup_determinism()),
        ("corrupted_checkpoint", corrupted_checkpoint(seed)),
        ("metrics", metrics(&mut rng)),
    ];
    results
        .into_iter()
        .map(|(name, r)| match r {
            Ok(detail) => Check {
                name,
                passed: true,
                detail,
            },
            Err(detail) => Check {
                name,
                passed: false,
                detail,
            },
        })
        .collect()
}

pub fn report(checks: &[Check]) -> String {
    let mut out = String::new();
    for c in checks {
        out.push_str(&format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    out.push_str(&format!("{} passed, {} failed\n", checks.len() - failed, failed));
    out
}
