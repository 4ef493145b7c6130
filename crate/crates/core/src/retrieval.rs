//! Code database construction and lookup-table retrieval.
//!
//! Every database item is stored as `M` codeword indices, one byte each. A
//! query keeps its full-precision projected feature: its segments are scored
//! once against every codeword into an `M x K` table, after which the score
//! of a database item is the sum of `M` table entries picked by its code.
//! Table entries and item scores are 32-bit.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::LabelSet;
use crate::linalg::dot;
use crate::quantizer::{hard_quantize, Codebooks, HardCode};
use crate::store::FeatureSet;
use crate::trainer::{Model, ProjectionHead};

/// Codes scored per block of the scan; with the table of one codebook (1 KiB
/// at K = 256) this keeps the working set in L1.
const SCAN_BLOCK: usize = 4096;
/// Items per parallel partition of the scan. Fixed, so results never depend
/// on the thread count.
const SCAN_PARTITION: usize = 65_536;

/// Provenance of a database build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BuildMeta {
    pub seed: u64,
    /// SHA-256 of the encoded hyperparameters of the model.
    pub hyper_hash: [u8; 32],
}

/// Hard-quantized database items with their ids, labels and the codebooks
/// they were encoded with.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeDatabase {
    codes: Vec<u8>,
    item_ids: Vec<u64>,
    labels: Vec<LabelSet>,
    codebooks: Codebooks,
    meta: BuildMeta,
}

impl CodeDatabase {
    pub fn new(
        codes: Vec<u8>,
        item_ids: Vec<u64>,
        labels: Vec<LabelSet>,
        codebooks: Codebooks,
        meta: BuildMeta,
    ) -> Result<Self> {
        let m = codebooks.num_codebooks();
        if codes.len() != item_ids.len() * m || labels.len() != item_ids.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} code bytes, {} ids and {} label sets for code width {m}",
                codes.len(),
                item_ids.len(),
                labels.len()
            )));
        }
        let k = codebooks.num_codewords();
        if let Some(&bad) = codes.iter().find(|&&c| c as usize >= k) {
            return Err(Error::IndexOutOfRange {
                index: bad as usize,
                size: k,
            });
        }
        Ok(Self {
            codes,
            item_ids,
            labels,
            codebooks,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    /// Code width `M`.
    pub fn code_width(&self) -> usize {
        self.codebooks.num_codebooks()
    }

    /// Size of the code payload, `N * M` bytes.
    pub fn code_bytes(&self) -> usize {
        self.codes.len()
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn code(&self, pos: usize) -> &[u8] {
        let m = self.code_width();
        &self.codes[pos * m..(pos + 1) * m]
    }

    pub fn item_ids(&self) -> &[u64] {
        &self.item_ids
    }

    pub fn labels(&self, pos: usize) -> &LabelSet {
        &self.labels[pos]
    }

    pub fn all_labels(&self) -> &[LabelSet] {
        &self.labels
    }

    pub fn codebooks(&self) -> &Codebooks {
        &self.codebooks
    }

    pub fn meta(&self) -> BuildMeta {
        self.meta
    }
}

/// Encodes view 0 of every item with the model's head and codebooks.
pub fn build_database(items: &FeatureSet, model: &Model) -> Result<CodeDatabase> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if items.dim() != model.head.in_dim() {
        return Err(Error::DimensionMismatch(format!(
            "database features have {} dims, model expects {}",
            items.dim(),
            model.head.in_dim()
        )));
    }
    let codes: Vec<HardCode> = (0..items.len())
        .into_par_iter()
        .map(|i| {
            let raw: Vec<f64> = items.view(i, 0).iter().map(|&x| x as f64).collect();
            let z = model.head.project(&raw)?;
            hard_quantize(&z, &model.codebooks)
        })
        .collect::<Result<_>>()?;
    let codes: Vec<u8> = codes.into_iter().flat_map(|c| c.indices).collect();
    let meta = BuildMeta {
        seed: model.hyper.seed,
        hyper_hash: crate::store::hyperparams_hash(&model.hyper),
    };
    CodeDatabase::new(
        codes,
        items.item_ids().to_vec(),
        items.all_labels().to_vec(),
        model.codebooks.clone(),
        meta,
    )
}

/// Per-query `M x K` table of segment-codeword inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    num_codebooks: usize,
    num_codewords: usize,
    scores: Vec<f32>,
}

impl LookupTable {
    /// Table for an already projected and normalized feature `z`.
    pub fn from_feature(z: &[f64], codebooks: &Codebooks) -> Result<Self> {
        if z.len() != codebooks.dim() {
            return Err(Error::DimensionMismatch(format!(
                "query has {} dims, codebooks cover {}",
                z.len(),
                codebooks.dim()
            )));
        }
        let (m_count, k, d) = (codebooks.num_codebooks(), codebooks.num_codewords(), codebooks.sub_dim());
        let mut scores = Vec::with_capacity(m_count * k);
        for m in 0..m_count {
            let seg = &z[m * d..(m + 1) * d];
            scores.extend(codebooks.codebook(m).chunks_exact(d).map(|c| dot(seg, c) as f32));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("lookup table".into()));
        }
        Ok(Self {
            num_codebooks: m_count,
            num_codewords: k,
            scores,
        })
    }

    pub fn num_codebooks(&self) -> usize {
        self.num_codebooks
    }

    pub fn num_codewords(&self) -> usize {
        self.num_codewords
    }

    /// Scores of codebook `m`.
    pub fn row(&self, m: usize) -> &[f32] {
        &self.scores[m * self.num_codewords..(m + 1) * self.num_codewords]
    }

    pub fn get(&self, m: usize, i: usize) -> f32 {
        self.scores[m * self.num_codewords + i]
    }
}

/// Projects and normalizes a raw query, then tabulates its scores.
pub fn build_lookup_table(raw: &[f64], head: &ProjectionHead, codebooks: &Codebooks) -> Result<LookupTable> {
    let z = head.project(raw)?;
    LookupTable::from_feature(&z, codebooks)
}

/// Sum over codebooks of the table entry selected by the code.
pub fn asymmetric_score(lut: &LookupTable, code: &HardCode) -> Result<f32> {
    if code.indices.len() != lut.num_codebooks {
        return Err(Error::DimensionMismatch(format!(
            "code has {} indices, table has {} codebooks",
            code.indices.len(),
            lut.num_codebooks
        )));
    }
    let mut score = 0.0f32;
    for (m, &i) in code.indices.iter().enumerate() {
        if i as usize >= lut.num_codewords {
            return Err(Error::IndexOutOfRange {
                index: i as usize,
                size: lut.num_codewords,
            });
        }
        score += lut.get(m, i as usize);
    }
    Ok(score)
}

/// Ranked answer to a query.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub item_ids: Vec<u64>,
    /// Positions of the ranked items in the database.
    pub positions: Vec<usize>,
    /// Non-increasing.
    pub scores: Vec<f32>,
    pub k_requested: usize,
}

/// Candidate ordered so that the greatest value is the best-ranked one.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f32,
    id: u64,
    pos: usize,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(&self.id))
            .then_with(|| other.pos.cmp(&self.pos))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

/// Keeps the best `k` candidates; the heap top is the worst kept one.
struct TopK {
    k: usize,
    heap: BinaryHeap<std::cmp::Reverse<Candidate>>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn offer(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(std::cmp::Reverse(c));
        } else if let Some(worst) = self.heap.peek() {
            if c > worst.0 {
                self.heap.pop();
                self.heap.push(std::cmp::Reverse(c));
            }
        }
    }

    fn into_sorted(self) -> Vec<Candidate> {
        let mut v: Vec<Candidate> = self.heap.into_iter().map(|r| r.0).collect();
        v.sort_by(|a, b| b.cmp(a));
        v
    }
}

/// Scores `codes` (row-major, `M` bytes per item) into `out`, one codebook
/// at a time so a single table row stays hot.
fn score_block(lut: &LookupTable, codes: &[u8], out: &mut [f32]) {
    let m_count = lut.num_codebooks;
    out.fill(0.0);
    for m in 0..m_count {
        let row = lut.row(m);
        for (s, code) in out.iter_mut().zip(codes.chunks_exact(m_count)) {
            *s += row[code[m] as usize];
        }
    }
}

/// Exhaustive scan of the database with a prepared lookup table.
pub fn search(db: &CodeDatabase, lut: &LookupTable, k: usize) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    if lut.num_codebooks != db.code_width() || lut.num_codewords != db.codebooks.num_codewords() {
        return Err(Error::DimensionMismatch(format!(
            "lookup table is {}x{}, database codes are {}x{}",
            lut.num_codebooks,
            lut.num_codewords,
            db.code_width(),
            db.codebooks.num_codewords()
        )));
    }
    let m = db.code_width();
    let keep = k.min(db.len());
    let partitions: Vec<Vec<Candidate>> = (0..db.len())
        .step_by(SCAN_PARTITION)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let end = (start + SCAN_PARTITION).min(db.len());
            let mut top = TopK::new(keep);
            let mut scores = vec![0.0f32; SCAN_BLOCK];
            let mut block_start = start;
            while block_start < end {
                let block_end = (block_start + SCAN_BLOCK).min(end);
                let out = &mut scores[..block_end - block_start];
                score_block(lut, &db.codes[block_start * m..block_end * m], out);
                for (offset, &score) in out.iter().enumerate() {
                    let pos = block_start + offset;
                    top.offer(Candidate {
                        score,
                        id: db.item_ids[pos],
                        pos,
                    });
                }
                block_start = block_end;
            }
            top.into_sorted()
        })
        .collect();

    let mut merged: Vec<Candidate> = partitions.into_iter().flatten().collect();
    merged.sort_by(|a, b| b.cmp(a));
    merged.truncate(keep);
    Ok(RetrievalResult {
        item_ids: merged.iter().map(|c| c.id).collect(),
        positions: merged.iter().map(|c| c.pos).collect(),
        scores: merged.iter().map(|c| c.score).collect(),
        k_requested: k,
    })
}

/// Top-`k` database items for a raw query, using the database's codebooks.
pub fn query_top_k(db: &CodeDatabase, raw: &[f64], head: &ProjectionHead, k: usize) -> Result<RetrievalResult> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let lut = build_lookup_table(raw, head, &db.codebooks)?;
    search(db, &lut, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn simple_db(codes: Vec<u8>, ids: Vec<u64>, cb: Codebooks) -> CodeDatabase {
        let labels = vec![LabelSet::from_labels(1, &[0]).unwrap(); ids.len()];
        CodeDatabase::new(codes, ids, labels, cb, BuildMeta::default()).unwrap()
    }

    #[test]
    fn lookup_table_examples() {
        let cb = Codebooks::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let lut = build_lookup_table(&[1.0, 0.0], &ProjectionHead::identity(2), &cb).unwrap();
        assert_eq!(lut.row(0), &[1.0, 0.0]);
        let again = build_lookup_table(&[1.0, 0.0], &ProjectionHead::identity(2), &cb).unwrap();
        assert_eq!(lut, again);
    }

    #[test]
    fn asymmetric_score_examples() {
        let lut = LookupTable {
            num_codebooks: 2,
            num_codewords: 2,
            scores: vec![0.1, 0.9, 0.4, 0.6],
        };
        let s = asymmetric_score(&lut, &HardCode { indices: vec![1, 0] }).unwrap();
        assert_abs_diff_eq!(s, 1.3, epsilon = 1e-6);
        let zero = LookupTable {
            num_codebooks: 2,
            num_codewords: 2,
            scores: vec![0.0; 4],
        };
        assert_eq!(asymmetric_score(&zero, &HardCode { indices: vec![1, 1] }).unwrap(), 0.0);
        assert!(matches!(
            asymmetric_score(&lut, &HardCode { indices: vec![2, 0] }),
            Err(Error::IndexOutOfRange { index: 2, size: 2 })
        ));
        assert!(asymmetric_score(&lut, &HardCode { indices: vec![0] }).is_err());
    }

    #[test]
    fn asymmetric_score_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, k, d) = (4, 16, 3);
        let w: Vec<f64> = (0..m * k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cb = Codebooks::new(m, k, d, w).unwrap();
        for _ in 0..50 {
            let z: Vec<f64> = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let code: Vec<u8> = (0..m).map(|_| rng.random_range(0..k as u8)).collect();
            let lut = LookupTable::from_feature(&z, &cb).unwrap();
            let got = asymmetric_score(&lut, &HardCode { indices: code.clone() }).unwrap();
            let direct: f64 = (0..m).map(|mm| dot(&z[mm * d..(mm + 1) * d], cb.codeword(mm, code[mm] as usize))).sum();
            assert!((got as f64 - direct).abs() <= 1e-6);
        }
    }

    #[test]
    fn top_k_ordering_truncation_and_ties() {
        let cb = Codebooks::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let db = simple_db(vec![1, 0, 1, 0], vec![40, 30, 20, 10], cb);
        let r = query_top_k(&db, &[1.0, 0.0], &ProjectionHead::identity(2), 10).unwrap();
        assert_eq!(r.item_ids, vec![10, 30, 20, 40]);
        assert_eq!(r.scores, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(r.positions, vec![3, 1, 2, 0]);
        assert_eq!(r.k_requested, 10);
        let r = query_top_k(&db, &[1.0, 0.0], &ProjectionHead::identity(2), 1).unwrap();
        assert_eq!(r.item_ids, vec![10]);
        assert!(query_top_k(&db, &[1.0, 0.0], &ProjectionHead::identity(2), 0).is_err());
    }

    #[test]
    fn empty_database_is_an_error() {
        let cb = Codebooks::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let db = simple_db(vec![], vec![], cb);
        assert!(matches!(
            query_top_k(&db, &[1.0, 0.0], &ProjectionHead::identity(2), 3),
            Err(Error::EmptyDatabase)
        ));
    }

    #[test]
    fn database_validates_codes() {
        let cb = Codebooks::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let labels = vec![LabelSet::empty(1)];
        assert!(matches!(
            CodeDatabase::new(vec![2], vec![0], labels.clone(), cb.clone(), BuildMeta::default()),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(CodeDatabase::new(vec![0, 1], vec![0], labels, cb, BuildMeta::default()).is_err());
    }

    #[test]
    fn scores_bounded_by_code_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (head, cb) = crate::trainer::init_parameters(8, 8, 4, 16, 17).unwrap();
        let codes: Vec<u8> = (0..400).map(|_| rng.random_range(0..16)).collect();
        let db = simple_db(codes, (0..100).collect(), cb);
        for _ in 0..20 {
            let raw: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = query_top_k(&db, &raw, &head, 100).unwrap();
            assert!(r.scores.iter().all(|s| (-4.0..=4.0).contains(s)));
            assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
