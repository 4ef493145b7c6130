//! Retrieval quality: label relevance, AP@R and mAP@R.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;
use crate::retrieval::{query_top_k, CodeDatabase};
use crate::store::FeatureSet;
use crate::trainer::Model;

/// Multi-label membership over a fixed vocabulary, as a bitset.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelSet {
    vocab: usize,
    words: Vec<u64>,
}

impl LabelSet {
    pub fn empty(vocab: usize) -> Self {
        Self {
            vocab,
            words: vec![0; vocab.div_ceil(64)],
        }
    }

    pub fn from_labels(vocab: usize, labels: &[usize]) -> Result<Self> {
        let mut set = Self::empty(vocab);
        for &l in labels {
            set.insert(l)?;
        }
        Ok(set)
    }

    /// Decodes `ceil(vocab / 8)` bytes, label `j` at bit `j % 8` of byte `j / 8`.
    pub fn from_bytes(vocab: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != Self::byte_len(vocab) {
            return Err(Error::DimensionMismatch(format!(
                "label bitset of {} bytes for vocabulary {vocab}",
                bytes.len()
            )));
        }
        let mut set = Self::empty(vocab);
        for (j, &b) in bytes.iter().enumerate() {
            for bit in 0..8 {
                if b & (1 << bit) != 0 {
                    let label = j * 8 + bit;
                    if label >= vocab {
                        return Err(Error::InvalidParameter(format!(
                            "label bit {label} set beyond vocabulary {vocab}"
                        )));
                    }
                    set.words[label / 64] |= 1 << (label % 64);
                }
            }
        }
        Ok(set)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        (0..Self::byte_len(self.vocab))
            .map(|j| (self.words[j / 8] >> ((j % 8) * 8)) as u8)
            .collect()
    }

    pub fn byte_len(vocab: usize) -> usize {
        vocab.div_ceil(8)
    }

    pub fn insert(&mut self, label: usize) -> Result<()> {
        if label >= self.vocab {
            return Err(Error::InvalidParameter(format!(
                "label {label} outside vocabulary of {}",
                self.vocab
            )));
        }
        self.words[label / 64] |= 1 << (label % 64);
        Ok(())
    }

    pub fn contains(&self, label: usize) -> bool {
        label < self.vocab && self.words[label / 64] & (1 << (label % 64)) != 0
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    fn intersects(&self, other: &Self) -> bool {
        self.words.iter().zip(&other.words).any(|(a, b)| a & b != 0)
    }
}

/// Two items are relevant to each other iff they share a label.
pub fn is_relevant(query: &LabelSet, item: &LabelSet) -> Result<bool> {
    if query.vocab != item.vocab {
        return Err(Error::VocabularyMismatch {
            left: query.vocab,
            right: item.vocab,
        });
    }
    Ok(query.intersects(item))
}

/// Denominator convention of AP@R.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApNormalization {
    /// Relevant items found in the top `R`.
    #[default]
    RetrievedRelevant,
    /// `min(R, relevant items in the whole database)`.
    AllRelevant,
}

/// AP@R with the default (retrieved-relevant) denominator.
pub fn average_precision(relevance: &[bool], cutoff: usize) -> Result<f64> {
    average_precision_with(relevance, cutoff, ApNormalization::RetrievedRelevant, 0)
}

/// AP@R: sum of precision@i over relevant ranks `i <= R`, divided by the
/// chosen denominator. `total_relevant` is used only by
/// [`ApNormalization::AllRelevant`].
pub fn average_precision_with(
    relevance: &[bool],
    cutoff: usize,
    normalization: ApNormalization,
    total_relevant: usize,
) -> Result<f64> {
    if cutoff == 0 {
        return Err(Error::InvalidParameter("AP cutoff must be at least 1".into()));
    }
    if relevance.is_empty() {
        return Err(Error::EmptyRanking);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, _) in relevance.iter().take(cutoff).enumerate().filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (i + 1) as f64;
    }
    let denom = match normalization {
        ApNormalization::RetrievedRelevant => hits,
        ApNormalization::AllRelevant => cutoff.min(total_relevant),
    };
    Ok(if denom == 0 || hits == 0 { 0.0 } else { sum / denom as f64 })
}

/// How queries are scored against a database.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub cutoff: usize,
    pub normalization: ApNormalization,
    /// Drop database entries whose id equals the query id.
    pub exclude_self: bool,
}

impl EvalOptions {
    pub fn at(cutoff: usize) -> Self {
        Self {
            cutoff,
            normalization: ApNormalization::default(),
            exclude_self: false,
        }
    }
}

/// Per-query APs and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub map: f64,
    pub per_query: Vec<f64>,
}

impl MapResult {
    /// Nearest-rank quantile of the per-query APs.
    pub fn quantile(&self, q: f64) -> f64 {
        let mut sorted = self.per_query.clone();
        sorted.sort_by(f64::total_cmp);
        let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
        sorted[idx]
    }
}

/// Mean of per-query APs, already computed.
pub fn mean_of(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(pairwise_sum(aps) / aps.len() as f64)
}

/// mAP@R of every query (view 0) in `queries` against `db`.
pub fn mean_average_precision(
    queries: &FeatureSet,
    db: &CodeDatabase,
    model: &Model,
    options: &EvalOptions,
) -> Result<MapResult> {
    if queries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_query: Vec<f64> = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let raw: Vec<f64> = queries.view(q, 0).iter().map(|&x| x as f64).collect();
            let query_labels = queries.labels(q);
            let query_id = queries.item_id(q);
            let k = if options.exclude_self { options.cutoff + 1 } else { options.cutoff };
            let result = query_top_k(db, &raw, &model.head, k)?;
            let mut flags = Vec::with_capacity(options.cutoff);
            for (&id, &pos) in result.item_ids.iter().zip(&result.positions) {
                if options.exclude_self && id == query_id {
                    continue;
                }
                flags.push(is_relevant(query_labels, db.labels(pos))?);
            }
            flags.truncate(options.cutoff);
            let total_relevant = match options.normalization {
                ApNormalization::RetrievedRelevant => 0,
                ApNormalization::AllRelevant => {
                    let mut count = 0;
                    for i in 0..db.len() {
                        if !(options.exclude_self && db.item_ids()[i] == query_id)
                            && is_relevant(query_labels, db.labels(i))?
                        {
                            count += 1;
                        }
                    }
                    count
                }
            };
            if flags.is_empty() {
                return Ok(0.0);
            }
            average_precision_with(&flags, options.cutoff, options.normalization, total_relevant)
        })
        .collect::<Result<_>>()?;
    Ok(MapResult {
        map: mean_of(&per_query)?,
        per_query,
    })
}

/// Contents of a metrics report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub cutoff: usize,
    pub normalization: ApNormalization,
    pub queries: usize,
    pub map: f64,
    pub ap_min: f64,
    pub ap_q25: f64,
    pub ap_median: f64,
    pub ap_q75: f64,
    pub ap_max: f64,
    pub hyperparams: crate::trainer::Hyperparams,
}

impl MetricsReport {
    pub fn new(dataset: &str, options: &EvalOptions, result: &MapResult, hyper: &crate::trainer::Hyperparams) -> Self {
        Self {
            dataset: dataset.to_string(),
            cutoff: options.cutoff,
            normalization: options.normalization,
            queries: result.per_query.len(),
            map: result.map,
            ap_min: result.quantile(0.0),
            ap_q25: result.quantile(0.25),
            ap_median: result.quantile(0.5),
            ap_q75: result.quantile(0.75),
            ap_max: result.quantile(1.0),
            hyperparams: hyper.clone(),
        }
    }
}
