//! Two-tower dense encoder.
//!
//! Each tower is a linear map from a hashed feature space to `d` dimensions
//! plus a bias. The question tower sees bare question tokens; the table tower
//! sees the flattened table (title included) with optional structural
//! channels. Relevance is the inner product of the two embeddings.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! | field | type |
//! |---|---|
//! | magic | `b"TQCK"` |
//! | version | u32 (= 1) |
//! | d | u32 |
//! | feature_dims | u32 |
//! | flags | u32: bit 0 `use_structure`, bit 1 `schema_only` |
//! | question weights | d × feature_dims f32, row-major |
//! | question bias | d f32 |
//! | table weights | d × feature_dims f32, row-major |
//! | table bias | d f32 |

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{read_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::table::{Question, Table};
use crate::textproc::{flatten_table, hash_features, question_tokens, FlattenMode, SparseVector, MIN_HASH_DIMS};

pub(crate) const MAGIC: &[u8; 4] = b"TQCK";
const VERSION: u32 = 1;
const FLAG_STRUCTURE: u32 = 1;
const FLAG_SCHEMA_ONLY: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Inner-product relevance score.
pub fn ret_score(h_q: &Embedding, h_t: &Embedding) -> Result<f64> {
    if h_q.len() != h_t.len() {
        return Err(Error::DimensionMismatch {
            expected: h_q.len(),
            actual: h_t.len(),
        });
    }
    Ok(dot(&h_q.0, &h_t.0))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A `d × feature_dims` projection plus bias. Weights are stored
/// feature-major (`weights[f * d + k]`) so a sparse input touches contiguous
/// memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Tower {
    fn zeros(d: usize, feature_dims: usize) -> Self {
        Tower {
            weights: vec![0.0; d * feature_dims],
            bias: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn column(&self, feature: usize) -> &[f64] {
        let d = self.dim();
        &self.weights[feature * d..(feature + 1) * d]
    }

    pub fn project(&self, x: &SparseVector) -> Vec<f64> {
        let d = self.dim();
        let mut h = self.bias.clone();
        for &(f, v) in x.entries() {
            for (hk, w) in h.iter_mut().zip(self.column(f as usize)) {
                *hk += v * w;
            }
        }
        debug_assert_eq!(h.len(), d);
        h
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderShape {
    pub d: usize,
    pub feature_dims: usize,
    /// Structural channels for table tokens (off = text-only ablation).
    pub use_structure: bool,
    /// Tables encoded from title, section and header only.
    pub schema_only: bool,
}

impl EncoderShape {
    pub fn new(d: usize, feature_dims: usize) -> Self {
        EncoderShape {
            d,
            feature_dims,
            use_structure: true,
            schema_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub shape: EncoderShape,
    pub question: Tower,
    pub table: Tower,
}

impl EncoderParams {
    pub fn zeros(shape: EncoderShape) -> Result<Self> {
        if shape.d == 0 {
            return Err(Error::Invalid("embedding dimension must be positive".into()));
        }
        if shape.feature_dims < MIN_HASH_DIMS {
            return Err(Error::Invalid(format!(
                "feature_dims must be at least {MIN_HASH_DIMS}"
            )));
        }
        Ok(EncoderParams {
            shape,
            question: Tower::zeros(shape.d, shape.feature_dims),
            table: Tower::zeros(shape.d, shape.feature_dims),
        })
    }

    /// Weights i.i.d. uniform in ±1/√feature_dims, biases zero.
    pub fn init(shape: EncoderShape, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        let bound = 1.0 / (shape.feature_dims as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in p.question.weights.iter_mut().chain(p.table.weights.iter_mut()) {
            *w = rng.gen_range(-bound..=bound);
        }
        Ok(p)
    }

    pub fn d(&self) -> usize {
        self.shape.d
    }

    pub fn question_features(&self, text: &str) -> SparseVector {
        hash_features(&question_tokens(text), self.shape.feature_dims, false)
    }

    pub fn table_features(&self, table: &Table) -> SparseVector {
        let mode = if self.shape.schema_only {
            FlattenMode::SchemaOnly
        } else {
            FlattenMode::Full
        };
        hash_features(
            &flatten_table(table, mode),
            self.shape.feature_dims,
            self.shape.use_structure,
        )
    }

    pub fn encode_question_text(&self, text: &str) -> Embedding {
        Embedding(self.question.project(&self.question_features(text)))
    }

    pub fn encode_question(&self, q: &Question) -> Embedding {
        self.encode_question_text(&q.text)
    }

    pub fn encode_table(&self, table: &Table) -> Embedding {
        Embedding(self.table.project(&self.table_features(table)))
    }

    pub fn encode_tables(&self, tables: &[&Table]) -> Vec<Embedding> {
        tables.par_iter().map(|t| self.encode_table(t)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.question.is_finite() && self.table.is_finite()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_writer().save(path)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_writer().into_bytes()
    }

    fn to_writer(&self) -> ByteWriter {
        let EncoderShape {
            d,
            feature_dims,
            use_structure,
            schema_only,
        } = self.shape;
        let mut w = ByteWriter::with_header(MAGIC, VERSION);
        w.u32(d as u32);
        w.u32(feature_dims as u32);
        let mut flags = 0;
        if use_structure {
            flags |= FLAG_STRUCTURE;
        }
        if schema_only {
            flags |= FLAG_SCHEMA_ONLY;
        }
        w.u32(flags);
        for tower in [&self.question, &self.table] {
            for k in 0..d {
                for f in 0..feature_dims {
                    w.f32(tower.weights[f * d + k] as f32);
                }
            }
            for &b in &tower.bias {
                w.f32(b as f32);
            }
        }
        w
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        Self::from_bytes(path, &bytes)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(path, bytes);
        r.header(MAGIC, VERSION)?;
        let d = r.u32()? as usize;
        let feature_dims = r.u32()? as usize;
        let flags = r.u32()?;
        if flags & !(FLAG_STRUCTURE | FLAG_SCHEMA_ONLY) != 0 {
            return Err(r.error(format!("unknown flag bits {flags:#x}")));
        }
        if d == 0 || feature_dims < MIN_HASH_DIMS {
            return Err(r.error(format!("invalid shape d={d} feature_dims={feature_dims}")));
        }
        r.check_count(2 * (d as u64) * (feature_dims as u64 + 1), 4)?;
        let shape = EncoderShape {
            d,
            feature_dims,
            use_structure: flags & FLAG_STRUCTURE != 0,
            schema_only: flags & FLAG_SCHEMA_ONLY != 0,
        };
        let mut p = EncoderParams::zeros(shape)?;
        for tower in [&mut p.question, &mut p.table] {
            for k in 0..d {
                for f in 0..feature_dims {
                    tower.weights[f * d + k] = r.f32()? as f64;
                }
            }
            for b in tower.bias.iter_mut() {
                *b = r.f32()? as f64;
            }
        }
        r.finish()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textproc::SparseVector;
    use proptest::prelude::*;

    fn table(rows: &[&[&str]]) -> Table {
        Table {
            table_id: "t".into(),
            page_title: "Some Page".into(),
            page_version: "1".into(),
            section_title: Some("Results".into()),
            caption: None,
            header: vec!["name".into(), "score".into()],
            rows: rows
                .iter()
                .map(|r| r.iter().map(|s| s.to_string()).collect())
                .collect(),
            is_infobox: false,
        }
    }

    fn small(seed: u64) -> EncoderParams {
        EncoderParams::init(EncoderShape::new(8, 1024), seed).unwrap()
    }

    #[test]
    fn zero_towers_give_zero_embeddings() {
        let p = EncoderParams::zeros(EncoderShape::new(8, 1024)).unwrap();
        assert!(p.encode_question_text("who won").0.iter().all(|&v| v == 0.0));
        assert!(p.encode_table(&table(&[&["a", "1"]])).0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_matches_dense_multiply() {
        let p = small(3);
        let x = p.question_features("who won the cup in 1998");
        // Dense oracle: materialize x and the row-major matrix.
        let mut dense_x = vec![0.0; 1024];
        for &(f, v) in x.entries() {
            dense_x[f as usize] = v;
        }
        let h = p.encode_question_text("who won the cup in 1998");
        for k in 0..8 {
            let mut acc = p.question.bias[k];
            for (f, xf) in dense_x.iter().enumerate() {
                acc += p.question.weights[f * 8 + k] * xf;
            }
            assert!((acc - h.0[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn schema_only_ignores_cells() {
        let mut p = small(1);
        p.shape.schema_only = true;
        let a = p.encode_table(&table(&[&["alice", "1"]]));
        let b = p.encode_table(&table(&[&["bob", "7"]]));
        assert_eq!(a, b);
    }

    #[test]
    fn text_mode_ignores_row_order_structure_does_not() {
        let rows_a: &[&[&str]] = &[&["alice", "1"], &["bob", "2"]];
        let rows_b: &[&[&str]] = &[&["bob", "2"], &["alice", "1"]];
        let mut p = small(2);
        p.shape.use_structure = false;
        assert_eq!(p.encode_table(&table(rows_a)), p.encode_table(&table(rows_b)));
        p.shape.use_structure = true;
        assert_ne!(p.encode_table(&table(rows_a)), p.encode_table(&table(rows_b)));
    }

    #[test]
    fn ret_score_cases() {
        let z = Embedding(vec![0.0; 4]);
        let e1 = Embedding(vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(ret_score(&z, &e1).unwrap(), 0.0);
        assert_eq!(ret_score(&e1, &e1).unwrap(), 1.0);
        assert!(ret_score(&e1, &Embedding(vec![1.0])).is_err());
    }

    #[test]
    fn ret_score_matches_compensated_sum() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Kahan-compensated summation as the reference.
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for (x, y) in a.iter().zip(&b) {
            let t = x * y - comp;
            let s = sum + t;
            comp = (s - sum) - t;
            sum = s;
        }
        let got = ret_score(&Embedding(a), &Embedding(b)).unwrap();
        assert!((got - sum).abs() <= 1e-9 * sum.abs().max(1.0));
    }

    #[test]
    fn checkpoint_round_trip_at_f32_precision() {
        let mut p = small(4);
        p.shape.schema_only = true;
        let bytes = p.to_bytes();
        let q = EncoderParams::from_bytes(Path::new("mem"), &bytes).unwrap();
        assert_eq!(q.shape, p.shape);
        for (a, b) in p.question.weights.iter().zip(&q.question.weights) {
            assert_eq!(*a as f32 as f64, *b);
        }
        assert_eq!(q.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_checkpoint_reports_offset() {
        let bytes = small(4).to_bytes();
        let err = EncoderParams::from_bytes(Path::new("ck"), &bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        match EncoderParams::from_bytes(Path::new("ck"), &bad) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut nan = bytes;
        nan[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        match EncoderParams::from_bytes(Path::new("ck"), &nan) {
            Err(Error::Format { offset: 20, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn projection_is_affine(seed in 0u64..50, a in "[a-e ]{1,12}", b in "[f-j ]{1,12}") {
            let p = small(seed);
            let xa = p.question_features(&a);
            let xb = p.question_features(&b);
            let sum = SparseVector::from_pairs(xa.entries().iter().chain(xb.entries()).copied());
            let ha = p.question.project(&xa);
            let hb = p.question.project(&xb);
            let hs = p.question.project(&sum);
            for k in 0..8 {
                prop_assert!((hs[k] - (ha[k] + hb[k] - p.question.bias[k])).abs() < 1e-12);
            }
        }

        #[test]
        fn positive_scaling_keeps_argmax(seed in 0u64..50, scale in 0.01f64..100.0) {
            let p = small(seed);
            let tables: Vec<Table> = (0..5).map(|i| table(&[&[&format!("w{i}"), "1"]])).collect();
            let q = p.encode_question_text("w3 score");
            let argmax = |scale: f64| {
                tables.iter().enumerate().map(|(i, t)| {
                    let h = Embedding(p.encode_table(t).0.iter().map(|v| v * scale).collect());
                    (ret_score(&q, &h).unwrap(), i)
                }).max_by(|a, b| a.0.total_cmp(&b.0)).unwrap().1
            };
            prop_assert_eq!(argmax(1.0), argmax(scale));
        }
    }
}
