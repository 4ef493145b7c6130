//! Contrastive objectives over a batch of soft-quantized reconstructions.
//!
//! A batch holds `2 N_B` rows: view A of items `0..N_B` followed by view B of
//! the same items, so the positive key of row `q` is row `(q + N_B) mod 2N_B`.
//! Every other row is a negative, giving `N_S = 2 (N_B - 1)` negatives per
//! query. The clipped loss sorts a query's negative scores ascending and drops
//! the `eta` largest before forming the denominator; the positive term always
//! stays in the denominator. Losses are sums over queries, not means.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, pairwise_sum};
use crate::quantizer::Codebooks;
use crate::trainer::ProjectionHead;

/// `2 N_B` reconstructions, views A then views B, each `dim` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchViews {
    dim: usize,
    rows: Vec<f64>,
}

impl BatchViews {
    /// Builds a batch from row-major data of `rows.len() / dim` rows.
    pub fn new(dim: usize, rows: Vec<f64>) -> Result<Self> {
        if dim == 0 || !rows.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch(format!(
                "{} values do not form rows of width {dim}",
                rows.len()
            )));
        }
        let count = rows.len() / dim;
        if count < 4 || !count.is_multiple_of(2) {
            return Err(Error::BatchTooSmall { rows: count });
        }
        Ok(Self { dim, rows })
    }

    /// Builds a batch from paired views: `view_a[i]` and `view_b[i]` are the
    /// two views of item `i`.
    pub fn from_pairs(view_a: &[Vec<f64>], view_b: &[Vec<f64>]) -> Result<Self> {
        if view_a.len() != view_b.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} A-views but {} B-views",
                view_a.len(),
                view_b.len()
            )));
        }
        let dim = view_a.first().map_or(0, Vec::len);
        if view_a.iter().chain(view_b).any(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch("rows of unequal width".into()));
        }
        let rows: Vec<f64> = view_a.iter().chain(view_b).flatten().copied().collect();
        if view_a.len() < 2 {
            return Err(Error::BatchTooSmall {
                rows: 2 * view_a.len(),
            });
        }
        Self::new(dim, rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Number of items `N_B`.
    pub fn items(&self) -> usize {
        self.len() / 2
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.rows[q * self.dim..(q + 1) * self.dim]
    }

    /// Row holding the other view of the same item.
    pub fn partner(&self, q: usize) -> usize {
        (q + self.items()) % self.len()
    }

    /// Negatives per query, `N_S = 2 (N_B - 1)`.
    pub fn negatives_per_query(&self) -> usize {
        self.len() - 2
    }
}

/// Components of the training objective for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub weight_decay: f64,
    pub codeword_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(contrastive: f64, weight_decay: f64, codeword_reg: f64, beta: f64, gamma: f64) -> Self {
        Self {
            contrastive,
            weight_decay,
            codeword_reg,
            total: contrastive + beta * weight_decay + gamma * codeword_reg,
        }
    }
}

/// Cosine similarity `a . b / (|a| |b|)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine of vectors with {} and {} dims",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine similarity operand".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Per-query contrastive terms plus what backpropagation needs.
pub(crate) struct ContrastiveTerms {
    pub losses: Vec<f64>,
    /// Row-major `2N_B x 2N_B` matrix of `dL_q / dS(q, k)`.
    pub score_grad: Vec<f64>,
    /// Unit-normalized rows used for the similarities.
    pub unit_rows: Vec<f64>,
    /// Norms of the original rows.
    pub row_norms: Vec<f64>,
}

impl ContrastiveTerms {
    pub fn total(&self) -> f64 {
        pairwise_sum(&self.losses)
    }
}

/// Indices of the `eta` negatives of row `q` with the highest scores, using an
/// ascending stable order over `(score, row index)`.
fn clipped_set(scores: &[f64], q: usize, partner: usize, eta: usize) -> Vec<usize> {
    if eta == 0 {
        return Vec::new();
    }
    let mut negatives: Vec<usize> = (0..scores.len()).filter(|&k| k != q && k != partner).collect();
    negatives.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    negatives.split_off(negatives.len() - eta)
}

/// Loss of one query and the softmax weights of its denominator terms.
fn query_term(scores: &[f64], q: usize, partner: usize, dropped: &[usize], tau: f64, grad: &mut [f64]) -> f64 {
    let keep = |k: usize| k != q && k != partner && !dropped.contains(&k);
    let pos = scores[partner] / tau;
    let mut max = pos;
    for (k, &s) in scores.iter().enumerate() {
        if keep(k) {
            max = max.max(s / tau);
        }
    }
    let mut denom = (pos - max).exp();
    for (k, &s) in scores.iter().enumerate() {
        if keep(k) {
            denom += (s / tau - max).exp();
        }
    }
    for (k, &s) in scores.iter().enumerate() {
        if keep(k) {
            grad[k] = (s / tau - max).exp() / denom / tau;
        }
    }
    grad[partner] = ((pos - max).exp() / denom - 1.0) / tau;
    max + denom.ln() - pos
}

pub(crate) fn contrastive_terms(batch: &BatchViews, tau: f64, eta: usize) -> Result<ContrastiveTerms> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    let n = batch.len();
    if n < 4 {
        return Err(Error::BatchTooSmall { rows: n });
    }
    let negatives = batch.negatives_per_query();
    if eta >= negatives {
        return Err(Error::ClippingExhaustsNegatives { eta, negatives });
    }
    let dim = batch.dim();
    let mut row_norms = Vec::with_capacity(n);
    let mut unit_rows = Vec::with_capacity(n * dim);
    for q in 0..n {
        let row = batch.row(q);
        let r = norm(row);
        if r == 0.0 || !r.is_finite() {
            return Err(Error::ZeroNorm(format!("batch row {q}")));
        }
        row_norms.push(r);
        unit_rows.extend(row.iter().map(|x| x / r));
    }

    let per_query: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|q| {
            let uq = &unit_rows[q * dim..(q + 1) * dim];
            let scores: Vec<f64> = unit_rows.chunks_exact(dim).map(|uk| dot(uq, uk)).collect();
            let partner = batch.partner(q);
            let dropped = clipped_set(&scores, q, partner, eta);
            let mut grad = vec![0.0; n];
            let loss = query_term(&scores, q, partner, &dropped, tau, &mut grad);
            (loss, grad)
        })
        .collect();

    let mut losses = Vec::with_capacity(n);
    let mut score_grad = Vec::with_capacity(n * n);
    for (loss, grad) in per_query {
        losses.push(loss);
        score_grad.extend(grad);
    }
    Ok(ContrastiveTerms {
        losses,
        score_grad,
        unit_rows,
        row_norms,
    })
}

/// Contrastive loss with every negative in the denominator, summed over all
/// `2 N_B` queries.
pub fn vanilla_loss(batch: &BatchViews, tau: f64) -> Result<f64> {
    Ok(contrastive_terms(batch, tau, 0)?.total())
}

/// Contrastive loss where each query's `eta` most similar negatives are left
/// out of the denominator. Requires `eta < N_S`.
pub fn clipped_loss(batch: &BatchViews, tau: f64, eta: usize) -> Result<f64> {
    Ok(contrastive_terms(batch, tau, eta)?.total())
}

/// Per codebook: the normalized codewords and their sum.
fn normalized_codebook(codebooks: &Codebooks, m: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (k, d) = (codebooks.num_codewords(), codebooks.sub_dim());
    let mut units = Vec::with_capacity(k * d);
    let mut norms = Vec::with_capacity(k);
    let mut sum = vec![0.0; d];
    for i in 0..k {
        let c = codebooks.codeword(m, i);
        let n = norm(c);
        if n == 0.0 {
            return Err(Error::ZeroNorm(format!("codeword {i} of codebook {m}")));
        }
        norms.push(n);
        for (s, x) in sum.iter_mut().zip(c) {
            *s += x / n;
        }
        units.extend(c.iter().map(|x| x / n));
    }
    Ok((units, norms, sum))
}

fn check_regularizable(codebooks: &Codebooks) -> Result<()> {
    if codebooks.num_codewords() < 2 {
        return Err(Error::InvalidParameter(format!(
            "codeword regularizer needs K >= 2, got {}",
            codebooks.num_codewords()
        )));
    }
    Ok(())
}

/// Mean over codebooks of the mean pairwise cosine similarity between distinct
/// codewords.
///
/// Uses `sum_{i<j} u_i . u_j = (|sum_i u_i|^2 - K) / 2` for unit vectors `u_i`.
pub fn codeword_regularizer(codebooks: &Codebooks) -> Result<f64> {
    check_regularizable(codebooks)?;
    let k = codebooks.num_codewords() as f64;
    let pairs = k * (k - 1.0) / 2.0;
    let mut per_codebook = Vec::with_capacity(codebooks.num_codebooks());
    for m in 0..codebooks.num_codebooks() {
        let (_, _, sum) = normalized_codebook(codebooks, m)?;
        per_codebook.push((dot(&sum, &sum) - k) / 2.0 / pairs);
    }
    Ok(pairwise_sum(&per_codebook) / codebooks.num_codebooks() as f64)
}

/// Gradient of [`codeword_regularizer`] with respect to the codebook weights,
/// added into `grad` scaled by `scale`.
pub(crate) fn codeword_regularizer_grad(codebooks: &Codebooks, scale: f64, grad: &mut [f64]) -> Result<()> {
    check_regularizable(codebooks)?;
    let (k, d) = (codebooks.num_codewords(), codebooks.sub_dim());
    let pairs = (k * (k - 1)) as f64 / 2.0;
    let factor = scale / pairs / codebooks.num_codebooks() as f64;
    for m in 0..codebooks.num_codebooks() {
        let (units, norms, sum) = normalized_codebook(codebooks, m)?;
        for i in 0..k {
            // d/du_i of (|s|^2 - K)/2 is s; project out the radial part.
            let u = &units[i * d..(i + 1) * d];
            let radial = dot(u, &sum);
            let out = &mut grad[(m * k + i) * d..(m * k + i + 1) * d];
            for j in 0..d {
                out[j] += factor * (sum[j] - radial * u[j]) / norms[i];
            }
        }
    }
    Ok(())
}

/// Full objective: clipped contrastive loss plus `beta * |W|_F^2` on the
/// projection head and `gamma` times the codeword regularizer.
pub fn total_objective(
    batch: &BatchViews,
    codebooks: &Codebooks,
    head: &ProjectionHead,
    tau: f64,
    eta: usize,
    beta: f64,
    gamma: f64,
) -> Result<LossBreakdown> {
    let contrastive = clipped_loss(batch, tau, eta)?;
    let weight_decay = head.weight_norm_sq();
    let codeword_reg = codeword_regularizer(codebooks)?;
    Ok(LossBreakdown::new(contrastive, weight_decay, codeword_reg, beta, gamma))
}
