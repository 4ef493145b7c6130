//! Independent oracles shared by the integration tests.
//!
//! Nothing here goes through the code paths it is used to check: losses are
//! enumerated pair by pair, rankings come from a full sort of directly
//! computed scores, and AP is recomputed from label lists.

#![allow(dead_code)]

use clipq::objective::{total_objective, BatchViews};
use clipq::quantizer::Codebooks;
use clipq::trainer::{forward, Hyperparams, ProjectionHead};
use rand::Rng;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    ab / (aa.sqrt() * bb.sqrt())
}

/// Clipped contrastive loss enumerated straight from its definition; eta = 0
/// is the vanilla loss.
pub fn brute_force_loss(rows: &[Vec<f64>], tau: f64, eta: usize) -> f64 {
    let n = rows.len();
    let half = n / 2;
    let mut total = 0.0;
    for q in 0..n {
        let pos = (q + half) % n;
        let mut negatives: Vec<f64> = (0..n)
            .filter(|&k| k != q && k != pos)
            .map(|k| cosine(&rows[q], &rows[k]))
            .collect();
        negatives.sort_by(|a, b| a.partial_cmp(b).unwrap());
        negatives.truncate(negatives.len() - eta);
        let numerator = (cosine(&rows[q], &rows[pos]) / tau).exp();
        let denominator = numerator + negatives.iter().map(|s| (s / tau).exp()).sum::<f64>();
        total -= (numerator / denominator).ln();
    }
    total
}

pub fn random_rows<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Total objective of a raw batch, evaluated through the forward path.
pub fn objective(
    view_a: &[Vec<f64>],
    view_b: &[Vec<f64>],
    head: &ProjectionHead,
    codebooks: &Codebooks,
    h: &Hyperparams,
) -> f64 {
    let rows: Vec<f64> = view_a
        .iter()
        .chain(view_b)
        .flat_map(|v| forward(v, head, codebooks, h.alpha).unwrap().1.reconstruction().to_vec())
        .collect();
    let batch = BatchViews::new(codebooks.dim(), rows).unwrap();
    total_objective(&batch, codebooks, head, h.tau, h.eta, h.beta, h.gamma)
        .unwrap()
        .total
}

/// Score of one code computed without a lookup table: per-segment dot
/// products (f64, rounded to f32) summed in f32 in codebook order.
pub fn direct_score(z: &[f64], codebooks: &Codebooks, code: &[u8]) -> f32 {
    let d = codebooks.sub_dim();
    let mut score = 0.0f32;
    for (m, &i) in code.iter().enumerate() {
        let seg = &z[m * d..(m + 1) * d];
        let c = codebooks.codeword(m, i as usize);
        let mut acc = 0.0f64;
        for j in 0..d {
            acc += seg[j] * c[j];
        }
        score += acc as f32;
    }
    score
}

/// Full sort of every database score: descending score, ascending id.
pub fn brute_force_ranking(
    z: &[f64],
    codebooks: &Codebooks,
    codes: &[u8],
    ids: &[u64],
    k: usize,
) -> Vec<(u64, f32, usize)> {
    let m = codebooks.num_codebooks();
    let mut all: Vec<(u64, f32, usize)> = ids
        .iter()
        .enumerate()
        .map(|(pos, &id)| (id, direct_score(z, codebooks, &codes[pos * m..(pos + 1) * m]), pos))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// AP@R over the first R entries with the retrieved-relevant denominator.
pub fn brute_force_ap(relevant: &[bool], cutoff: usize) -> f64 {
    let mut hits = 0;
    let mut precision_sum = 0.0;
    for rank in 1..=cutoff.min(relevant.len()) {
        if relevant[rank - 1] {
            hits += 1;
            precision_sum += hits as f64 / rank as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        precision_sum / hits as f64
    }
}

pub fn shares_label(a: &[usize], b: &[usize]) -> bool {
    a.iter().any(|x| b.contains(x))
}
