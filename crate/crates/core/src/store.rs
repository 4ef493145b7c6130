//! On-disk formats: feature files, dataset manifests, parameter snapshots and
//! code databases.
//!
//! All binary formats are little-endian and versioned; a file with an unknown
//! magic or version is rejected. Writers go through a temporary file in the
//! destination directory followed by a rename, so readers never see a partial
//! file.
//!
//! Feature file (`FPQ1`, version 1), the contract with feature extractors:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FPQ1"
//! 4       4     version (u32) = 1
//! 8       8     N, item count (u64)
//! 16      1     V, views per item (u8)
//! 17      4     D_in, feature dimension (u32)
//! 21      4     label vocabulary size (u32)
//! 25      4     flags (u32), carried through unchanged
//! 29      ...   N records:
//!                 item id (u64)
//!                 label bitset, ceil(vocab / 8) bytes, label j = bit j%8 of byte j/8
//!                 V x D_in f32
//! ```
//!
//! Snapshot (`CPQS`) and database (`CPQD`) files end with a SHA-256 of every
//! preceding byte.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::LabelSet;
use crate::quantizer::Codebooks;
use crate::retrieval::{BuildMeta, CodeDatabase};
use crate::trainer::{Hyperparams, Model, ProjectionHead};

pub const FEATURE_MAGIC: [u8; 4] = *b"FPQ1";
pub const SNAPSHOT_MAGIC: [u8; 4] = *b"CPQS";
pub const DATABASE_MAGIC: [u8; 4] = *b"CPQD";
pub const FORMAT_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 29;
const CHECKSUM_LEN: usize = 32;

/// `N` items with `V` views of `D_in` values each, plus ids and label sets.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    views: usize,
    dim: usize,
    vocab: usize,
    flags: u32,
    item_ids: Vec<u64>,
    labels: Vec<LabelSet>,
    data: Vec<f32>,
}

impl FeatureSet {
    pub fn new(views: usize, dim: usize, vocab: usize) -> Result<Self> {
        if views == 0 || views > u8::MAX as usize || dim == 0 || dim > u32::MAX as usize {
            return Err(Error::InvalidParameter(format!(
                "feature set needs 1..=255 views and a positive dimension, got V = {views}, D_in = {dim}"
            )));
        }
        Ok(Self {
            views,
            dim,
            vocab,
            flags: 0,
            item_ids: Vec::new(),
            labels: Vec::new(),
            data: Vec::new(),
        })
    }

    pub fn with_flags(mut self, flags: u32) -> Self {
        self.flags = flags;
        self
    }

    /// Appends an item; `views` holds `V * D_in` values, view-major.
    pub fn push(&mut self, item_id: u64, labels: LabelSet, views: &[f32]) -> Result<()> {
        if views.len() != self.views * self.dim {
            return Err(Error::DimensionMismatch(format!(
                "item has {} values, expected V * D_in = {}",
                views.len(),
                self.views * self.dim
            )));
        }
        if labels.vocab() != self.vocab {
            return Err(Error::VocabularyMismatch {
                left: labels.vocab(),
                right: self.vocab,
            });
        }
        if views.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("features of item {item_id}")));
        }
        self.item_ids.push(item_id);
        self.labels.push(labels);
        self.data.extend_from_slice(views);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn flags(&self) -> u32 {
        self.flags
    }

    pub fn view(&self, item: usize, view: usize) -> &[f32] {
        let start = (item * self.views + view) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn item_id(&self, item: usize) -> u64 {
        self.item_ids[item]
    }

    pub fn item_ids(&self) -> &[u64] {
        &self.item_ids
    }

    pub fn labels(&self, item: usize) -> &LabelSet {
        &self.labels[item]
    }

    pub fn all_labels(&self) -> &[LabelSet] {
        &self.labels
    }

    /// Keeps only view `view` of every item.
    pub fn select_view(&self, view: usize) -> Result<Self> {
        let mut out = Self::new(1, self.dim, self.vocab)?.with_flags(self.flags);
        for i in 0..self.len() {
            out.push(self.item_ids[i], self.labels[i].clone(), self.view(i, view))?;
        }
        Ok(out)
    }
}

/// Header fields of a feature file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureHeader {
    pub items: u64,
    pub views: u8,
    pub dim: u32,
    pub vocab: u32,
    pub flags: u32,
}

impl FeatureHeader {
    fn record_len(&self) -> u64 {
        8 + LabelSet::byte_len(self.vocab as usize) as u64 + self.views as u64 * self.dim as u64 * 4
    }

    /// Total file size implied by the header.
    pub fn file_len(&self) -> u64 {
        FEATURE_HEADER_LEN as u64 + self.items * self.record_len()
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn new() -> Self {
        Self(Vec::new())
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn finish_with_checksum(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.0);
        self.0.extend_from_slice(&digest);
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    total: u64,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self {
            buf,
            pos: 0,
            total: buf.len() as u64,
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                expected: (self.pos + n) as u64,
                found: self.total,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::TrailingBytes {
                expected: self.pos as u64,
                found: self.total,
            });
        }
        Ok(())
    }
}

fn check_magic(found: [u8; 4], expected: [u8; 4]) -> Result<()> {
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

/// Splits off and verifies the trailing SHA-256.
fn verified_body(bytes: &[u8], magic: [u8; 4]) -> Result<&[u8]> {
    if bytes.len() >= 4 {
        check_magic(bytes[..4].try_into().expect("4 bytes"), magic)?;
    }
    if bytes.len() < 8 + CHECKSUM_LEN {
        return Err(Error::Truncated {
            expected: (8 + CHECKSUM_LEN) as u64,
            found: bytes.len() as u64,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::ChecksumMismatch);
    }
    Ok(body)
}

/// Writes `bytes` to `path` through a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::InvalidParameter(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_features(set: &FeatureSet) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&FEATURE_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(set.len() as u64);
    w.u8(set.views as u8);
    w.u32(set.dim as u32);
    w.u32(set.vocab as u32);
    w.u32(set.flags);
    for i in 0..set.len() {
        w.u64(set.item_ids[i]);
        w.bytes(&set.labels[i].to_bytes());
        for v in 0..set.views {
            for &x in set.view(i, v) {
                w.bytes(&x.to_le_bytes());
            }
        }
    }
    w.0
}

fn decode_feature_header(r: &mut Reader) -> Result<FeatureHeader> {
    check_magic(r.array()?, FEATURE_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    Ok(FeatureHeader {
        items: r.u64()?,
        views: r.u8()?,
        dim: r.u32()?,
        vocab: r.u32()?,
        flags: r.u32()?,
    })
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSet> {
    let mut r = Reader::new(bytes);
    let header = decode_feature_header(&mut r)?;
    let expected = header.file_len();
    let found = bytes.len() as u64;
    if found < expected {
        return Err(Error::Truncated { expected, found });
    }
    if found > expected {
        return Err(Error::TrailingBytes { expected, found });
    }
    let (views, dim, vocab) = (header.views as usize, header.dim as usize, header.vocab as usize);
    let mut set = FeatureSet::new(views, dim, vocab)?.with_flags(header.flags);
    let label_len = LabelSet::byte_len(vocab);
    let mut values = vec![0f32; views * dim];
    for _ in 0..header.items {
        let id = r.u64()?;
        let labels = LabelSet::from_bytes(vocab, r.take(label_len)?)?;
        for (v, chunk) in values.iter_mut().zip(r.take(views * dim * 4)?.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        set.push(id, labels, &values)?;
    }
    r.finish()?;
    Ok(set)
}

pub fn write_features(path: &Path, set: &FeatureSet) -> Result<()> {
    write_atomic(path, &encode_features(set))
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    decode_features(&read_file(path)?)
}

/// Reads only the header of a feature file.
pub fn read_feature_header(path: &Path) -> Result<FeatureHeader> {
    use std::io::Read;
    let mut buf = Vec::with_capacity(FEATURE_HEADER_LEN);
    fs::File::open(path)
        .and_then(|f| f.take(FEATURE_HEADER_LEN as u64).read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_feature_header(&mut Reader::new(&buf))
}

fn encode_hyperparams(w: &mut Writer, h: &Hyperparams) {
    w.f64(h.alpha);
    w.f64(h.tau);
    w.u64(h.eta as u64);
    w.f64(h.beta);
    w.f64(h.gamma);
    w.u32(h.num_codebooks as u32);
    w.u32(h.num_codewords as u32);
    w.u32(h.proj_dim.unwrap_or(0) as u32);
    w.u32(h.batch_size as u32);
    w.u32(h.max_epochs as u32);
    w.f64(h.lr_codebooks);
    w.f64(h.lr_head);
    w.u32(h.patience as u32);
    w.f64(h.min_delta);
    w.u64(h.seed);
}

fn decode_hyperparams(r: &mut Reader) -> Result<Hyperparams> {
    Ok(Hyperparams {
        alpha: r.f64()?,
        tau: r.f64()?,
        eta: r.u64()? as usize,
        beta: r.f64()?,
        gamma: r.f64()?,
        num_codebooks: r.u32()? as usize,
        num_codewords: r.u32()? as usize,
        proj_dim: match r.u32()? {
            0 => None,
            d => Some(d as usize),
        },
        batch_size: r.u32()? as usize,
        max_epochs: r.u32()? as usize,
        lr_codebooks: r.f64()?,
        lr_head: r.f64()?,
        patience: r.u32()? as usize,
        min_delta: r.f64()?,
        seed: r.u64()?,
    })
}

/// SHA-256 of the binary encoding of the hyperparameters.
pub fn hyperparams_hash(h: &Hyperparams) -> [u8; 32] {
    let mut w = Writer::new();
    encode_hyperparams(&mut w, h);
    Sha256::digest(&w.0).into()
}

fn encode_codebooks(w: &mut Writer, cb: &Codebooks) {
    w.u32(cb.num_codebooks() as u32);
    w.u32(cb.num_codewords() as u32);
    w.u32(cb.sub_dim() as u32);
    w.f64s(cb.weights());
}

fn decode_codebooks(r: &mut Reader) -> Result<Codebooks> {
    let (m, k, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let weights = r.f64s(m.checked_mul(k).and_then(|x| x.checked_mul(d)).ok_or_else(|| {
        Error::DimensionMismatch("codebook shape overflows".into())
    })?)?;
    Codebooks::new(m, k, d, weights)
}

pub fn encode_snapshot(model: &Model) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&SNAPSHOT_MAGIC);
    w.u32(FORMAT_VERSION);
    encode_hyperparams(&mut w, &model.hyper);
    let head = &model.head;
    w.u32(head.out_dim() as u32);
    w.u32(head.in_dim() as u32);
    w.u8(head.bias().is_some() as u8);
    w.f64s(head.weights());
    if let Some(b) = head.bias() {
        w.f64s(b);
    }
    encode_codebooks(&mut w, &model.codebooks);
    w.finish_with_checksum()
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<Model> {
    let body = verified_body(bytes, SNAPSHOT_MAGIC)?;
    let mut r = Reader::new(body);
    check_magic(r.array()?, SNAPSHOT_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let hyper = decode_hyperparams(&mut r)?;
    let (out_dim, in_dim) = (r.u32()? as usize, r.u32()? as usize);
    let has_bias = r.u8()? != 0;
    let weights = r.f64s(out_dim * in_dim)?;
    let bias = if has_bias { Some(r.f64s(out_dim)?) } else { None };
    let head = ProjectionHead::new(out_dim, in_dim, weights, bias)?;
    let codebooks = decode_codebooks(&mut r)?;
    r.finish()?;
    if codebooks.num_codebooks() != hyper.num_codebooks || codebooks.num_codewords() != hyper.num_codewords {
        return Err(Error::DimensionMismatch(format!(
            "snapshot codebooks are {}x{}, hyperparameters say {}x{}",
            codebooks.num_codebooks(),
            codebooks.num_codewords(),
            hyper.num_codebooks,
            hyper.num_codewords
        )));
    }
    Model::new(hyper, head, codebooks)
}

pub fn save_parameters(path: &Path, model: &Model) -> Result<()> {
    write_atomic(path, &encode_snapshot(model))
}

pub fn load_parameters(path: &Path) -> Result<Model> {
    decode_snapshot(&read_file(path)?)
}

pub fn encode_database(db: &CodeDatabase) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&DATABASE_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(db.len() as u64);
    let vocab = db.all_labels().first().map_or(0, LabelSet::vocab);
    w.u32(vocab as u32);
    let meta = db.meta();
    w.u64(meta.seed);
    w.bytes(&meta.hyper_hash);
    encode_codebooks(&mut w, db.codebooks());
    for &id in db.item_ids() {
        w.u64(id);
    }
    for labels in db.all_labels() {
        w.bytes(&labels.to_bytes());
    }
    w.bytes(db.codes());
    w.finish_with_checksum()
}

pub fn decode_database(bytes: &[u8]) -> Result<CodeDatabase> {
    let body = verified_body(bytes, DATABASE_MAGIC)?;
    let mut r = Reader::new(body);
    check_magic(r.array()?, DATABASE_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = r.u64()? as usize;
    let vocab = r.u32()? as usize;
    let meta = BuildMeta {
        seed: r.u64()?,
        hyper_hash: r.array()?,
    };
    let codebooks = decode_codebooks(&mut r)?;
    let ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let label_len = LabelSet::byte_len(vocab);
    let labels = (0..n)
        .map(|_| LabelSet::from_bytes(vocab, r.take(label_len)?))
        .collect::<Result<Vec<_>>>()?;
    let codes = r.take(n * codebooks.num_codebooks())?.to_vec();
    r.finish()?;
    CodeDatabase::new(codes, ids, labels, codebooks, meta)
}

pub fn save_database(path: &Path, db: &CodeDatabase) -> Result<()> {
    write_atomic(path, &encode_database(db))
}

pub fn load_database(path: &Path) -> Result<CodeDatabase> {
    decode_database(&read_file(path)?)
}

/// Dataset description: feature files per split and evaluation settings.
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub train: PathBuf,
    pub query: PathBuf,
    pub database: PathBuf,
    /// Cutoff `R` of mAP@R.
    pub map_at: usize,
    #[serde(default)]
    pub exclude_query_from_database: bool,
    #[serde(default)]
    pub vocabulary: Vec<String>,
}

impl Manifest {
    /// Parses the manifest, resolves its paths and checks that the three
    /// feature files exist and agree on `D_in` and vocabulary size.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut manifest.train, &mut manifest.query, &mut manifest.database] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.map_at == 0 {
            return Err(Error::Manifest("map_at must be at least 1".into()));
        }
        let headers = [&self.train, &self.query, &self.database]
            .into_iter()
            .map(|p| read_feature_header(p))
            .collect::<Result<Vec<_>>>()?;
        let first = headers[0];
        for h in &headers[1..] {
            if h.dim != first.dim || h.vocab != first.vocab {
                return Err(Error::Manifest(format!(
                    "feature files disagree: D_in {} vs {}, vocabulary {} vs {}",
                    first.dim, h.dim, first.vocab, h.vocab
                )));
            }
        }
        if !self.vocabulary.is_empty() && self.vocabulary.len() != first.vocab as usize {
            return Err(Error::Manifest(format!(
                "{} vocabulary names for a vocabulary of {}",
                self.vocabulary.len(),
                first.vocab
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> Result<usize> {
        Ok(read_feature_header(&self.train)?.dim as usize)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Manifest(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }
}
