//! Trainable parameters and the training loop.
//!
//! The trainable state is a linear projection head `W: R^{D_in} -> R^D` and the
//! `M x K x d` codebooks. A raw feature `x` is mapped to `z = W x / |W x|`,
//! soft-quantized, and the reconstructions of both views of every batch item
//! feed the clipped contrastive loss. Gradients are analytic; the set of
//! clipped negatives is held fixed within a step.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, axpy, dot, norm};
use crate::objective::{codeword_regularizer, codeword_regularizer_grad, contrastive_terms, BatchViews, LossBreakdown};
use crate::quantizer::{soft_quantize, validate_codebook_size, Codebooks, SoftAssignment};
use crate::store::FeatureSet;

/// Rows per parallel work unit in the backward pass. Fixed so that the
/// reduction order never depends on the thread count.
const BACKWARD_CHUNK: usize = 16;

/// Linear map `R^{in_dim} -> R^{out_dim}`, row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    out_dim: usize,
    in_dim: usize,
    weights: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl ProjectionHead {
    pub fn new(out_dim: usize, in_dim: usize, weights: Vec<f64>, bias: Option<Vec<f64>>) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 || weights.len() != out_dim * in_dim {
            return Err(Error::DimensionMismatch(format!(
                "projection weights have {} entries for a {out_dim}x{in_dim} matrix",
                weights.len()
            )));
        }
        if bias.as_ref().is_some_and(|b| b.len() != out_dim) {
            return Err(Error::DimensionMismatch("projection bias length".into()));
        }
        if !all_finite(&weights) || bias.as_ref().is_some_and(|b| !all_finite(b)) {
            return Err(Error::NonFinite("projection head".into()));
        }
        Ok(Self {
            out_dim,
            in_dim,
            weights,
            bias,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        Self {
            out_dim: dim,
            in_dim: dim,
            weights,
            bias: None,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    /// Squared Frobenius norm of the weight matrix (bias excluded).
    pub fn weight_norm_sq(&self) -> f64 {
        dot(&self.weights, &self.weights)
    }

    /// `W x (+ b)`, not normalized.
    pub fn apply(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.in_dim {
            return Err(Error::DimensionMismatch(format!(
                "raw feature has {} dims, head expects {}",
                raw.len(),
                self.in_dim
            )));
        }
        if !all_finite(raw) {
            return Err(Error::NonFinite("raw feature".into()));
        }
        let mut out: Vec<f64> = self.weights.chunks_exact(self.in_dim).map(|row| dot(row, raw)).collect();
        if let Some(b) = &self.bias {
            axpy(1.0, b, &mut out);
        }
        Ok(out)
    }

    /// `W x (+ b)` scaled to unit length.
    pub fn project(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let u = self.apply(raw)?;
        let n = norm(&u);
        if n == 0.0 {
            return Err(Error::ZeroNorm("projected feature".into()));
        }
        Ok(u.into_iter().map(|x| x / n).collect())
    }
}

/// Configuration of quantization, objective and optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Softmax sharpness of codeword assignment.
    pub alpha: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Negatives clipped per query.
    pub eta: usize,
    /// Weight decay on the projection head.
    pub beta: f64,
    /// Weight of the codeword regularizer.
    pub gamma: f64,
    pub num_codebooks: usize,
    pub num_codewords: usize,
    /// Projection output dimension `D`; `None` keeps the input dimension.
    pub proj_dim: Option<usize>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_codebooks: f64,
    pub lr_head: f64,
    /// Epochs without an improvement of at least `min_delta` before stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            tau: 0.2,
            eta: 10,
            beta: 1e-4,
            gamma: 1e-3,
            num_codebooks: 8,
            num_codewords: 256,
            proj_dim: None,
            batch_size: 128,
            max_epochs: 50,
            lr_codebooks: 1e-3,
            lr_head: 1e-4,
            patience: 5,
            min_delta: 1e-4,
            seed: 0,
        }
    }
}

impl Hyperparams {
    /// Code length in bits, `M * log2 K`.
    pub fn bits(&self) -> usize {
        self.num_codebooks * self.num_codewords.trailing_zeros() as usize
    }

    /// Sets `M` from a code length in bits with the current `K`.
    pub fn set_bits(&mut self, bits: usize) -> Result<()> {
        let per_index = self.num_codewords.trailing_zeros() as usize;
        if per_index == 0 || bits == 0 || !bits.is_multiple_of(per_index) {
            return Err(Error::InvalidParameter(format!(
                "{bits} bits is not a multiple of log2(K) = {per_index}"
            )));
        }
        self.num_codebooks = bits / per_index;
        Ok(())
    }

    /// Projection output dimension for a given input dimension.
    pub fn output_dim(&self, in_dim: usize) -> usize {
        self.proj_dim.unwrap_or(in_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return bad("beta and gamma must be non-negative".into());
        }
        validate_codebook_size(self.num_codewords)?;
        if self.num_codebooks == 0 {
            return bad("M must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        let negatives = 2 * (self.batch_size - 1);
        if self.eta >= negatives {
            return bad(format!(
                "eta = {} exceeds 2(N_B - 1) - 1 = {} for batch size {}",
                self.eta,
                negatives - 1,
                self.batch_size
            ));
        }
        if !(self.lr_codebooks > 0.0 && self.lr_head >= 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.proj_dim.is_some_and(|d| d % self.num_codebooks != 0) {
            return bad(format!(
                "projection dim {:?} is not divisible by M = {}",
                self.proj_dim, self.num_codebooks
            ));
        }
        Ok(())
    }
}

/// Trained (or freshly initialized) parameters together with their config.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub hyper: Hyperparams,
    pub head: ProjectionHead,
    pub codebooks: Codebooks,
}

impl Model {
    pub fn new(hyper: Hyperparams, head: ProjectionHead, codebooks: Codebooks) -> Result<Self> {
        if head.out_dim() != codebooks.dim() {
            return Err(Error::DimensionMismatch(format!(
                "head outputs {} dims, codebooks cover {}",
                head.out_dim(),
                codebooks.dim()
            )));
        }
        Ok(Self { hyper, head, codebooks })
    }

    /// Normalized projected feature for a raw input.
    pub fn embed(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.head.project(raw)
    }
}

/// Draws the projection weights from `N(0, 2 / (D_in + D))` and codewords
/// from a unit Gaussian, normalized per codeword.
pub fn init_parameters(
    in_dim: usize,
    out_dim: usize,
    num_codebooks: usize,
    num_codewords: usize,
    seed: u64,
) -> Result<(ProjectionHead, Codebooks)> {
    if num_codebooks == 0 || !out_dim.is_multiple_of(num_codebooks) {
        return Err(Error::DimensionMismatch(format!(
            "projection dim {out_dim} is not divisible by M = {num_codebooks}"
        )));
    }
    if in_dim == 0 {
        return Err(Error::DimensionMismatch("input dimension is zero".into()));
    }
    validate_codebook_size(num_codewords)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let weights: Vec<f64> = (0..out_dim * in_dim).map(|_| normal.sample(&mut rng)).collect();

    let sub_dim = out_dim / num_codebooks;
    let mut cw: Vec<f64> = (0..num_codebooks * num_codewords * sub_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    for c in cw.chunks_exact_mut(sub_dim) {
        let n = norm(c);
        c.iter_mut().for_each(|x| *x /= n);
    }
    let head = ProjectionHead::new(out_dim, in_dim, weights, None)?;
    let codebooks = Codebooks::new(num_codebooks, num_codewords, sub_dim, cw)?;
    Ok((head, codebooks))
}

/// Projects, normalizes and soft-quantizes one raw feature.
pub fn forward(
    raw: &[f64],
    head: &ProjectionHead,
    codebooks: &Codebooks,
    alpha: f64,
) -> Result<(Vec<f64>, SoftAssignment)> {
    let z = head.project(raw)?;
    let soft = soft_quantize(&z, codebooks, alpha)?;
    Ok((z, soft))
}

/// Gradients of the total objective for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub head: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub codebooks: Vec<f64>,
    pub loss: LossBreakdown,
}

struct RowState {
    raw: Vec<f64>,
    pre_norm: f64,
    z: Vec<f64>,
    soft: SoftAssignment,
}

/// Analytic gradients of the total objective on a batch whose item `i` has
/// raw views `view_a[i]` and `view_b[i]`.
pub fn gradients(
    view_a: &[Vec<f64>],
    view_b: &[Vec<f64>],
    head: &ProjectionHead,
    codebooks: &Codebooks,
    hyper: &Hyperparams,
) -> Result<Gradients> {
    if view_a.len() != view_b.len() {
        return Err(Error::DimensionMismatch("view counts differ".into()));
    }
    if view_a.len() < 2 {
        return Err(Error::BatchTooSmall { rows: 2 * view_a.len() });
    }
    let raws: Vec<&Vec<f64>> = view_a.iter().chain(view_b).collect();
    let states: Vec<RowState> = raws
        .par_iter()
        .map(|raw| {
            let u = head.apply(raw)?;
            let pre_norm = norm(&u);
            if pre_norm == 0.0 {
                return Err(Error::ZeroNorm("projected feature".into()));
            }
            let z: Vec<f64> = u.iter().map(|x| x / pre_norm).collect();
            let soft = soft_quantize(&z, codebooks, hyper.alpha)?;
            Ok(RowState {
                raw: raw.to_vec(),
                pre_norm,
                z,
                soft,
            })
        })
        .collect::<Result<_>>()?;

    let dim = codebooks.dim();
    let rows: Vec<f64> = states.iter().flat_map(|s| s.soft.reconstruction().iter().copied()).collect();
    let batch = BatchViews::new(dim, rows)?;
    let terms = contrastive_terms(&batch, hyper.tau, hyper.eta)?;
    let n = batch.len();

    // dL/d(unit row q) = sum_k (G[q][k] + G[k][q]) n_k, then through the
    // normalization of the reconstruction.
    let recon_grads: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|q| {
            let mut g = vec![0.0; dim];
            for k in 0..n {
                let w = terms.score_grad[q * n + k] + terms.score_grad[k * n + q];
                if w != 0.0 {
                    axpy(w, &terms.unit_rows[k * dim..(k + 1) * dim], &mut g);
                }
            }
            let unit = &terms.unit_rows[q * dim..(q + 1) * dim];
            let radial = dot(&g, unit);
            let r = terms.row_norms[q];
            g.iter_mut().zip(unit).for_each(|(gi, ui)| *gi = (*gi - radial * ui) / r);
            g
        })
        .collect();

    let (m_count, k, d) = (codebooks.num_codebooks(), codebooks.num_codewords(), codebooks.sub_dim());
    let in_dim = head.in_dim();
    let alpha = hyper.alpha;
    let has_bias = head.bias().is_some();
    let row_ids: Vec<usize> = (0..n).collect();
    let partials: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = row_ids
        .par_chunks(BACKWARD_CHUNK)
        .map(|chunk| {
            let mut g_cb = vec![0.0; m_count * k * d];
            let mut g_w = vec![0.0; dim * in_dim];
            let mut g_b = vec![0.0; if has_bias { dim } else { 0 }];
            let mut d_probs = vec![0.0; k];
            for &r in chunk {
                let st = &states[r];
                let g_recon = &recon_grads[r];
                let mut g_z = vec![0.0; dim];
                for m in 0..m_count {
                    let g_seg = &g_recon[m * d..(m + 1) * d];
                    let z_seg = &st.z[m * d..(m + 1) * d];
                    let probs = st.soft.probs(m);
                    for (i, dp) in d_probs.iter_mut().enumerate() {
                        *dp = dot(g_seg, codebooks.codeword(m, i));
                    }
                    let mean = dot(probs, &d_probs);
                    for i in 0..k {
                        let p = probs[i];
                        let d_logit = p * (d_probs[i] - mean);
                        let out = &mut g_cb[(m * k + i) * d..(m * k + i + 1) * d];
                        axpy(p, g_seg, out);
                        axpy(alpha * d_logit, z_seg, out);
                        axpy(alpha * d_logit, codebooks.codeword(m, i), &mut g_z[m * d..(m + 1) * d]);
                    }
                }
                // Through z = u / |u|.
                let radial = dot(&g_z, &st.z);
                for j in 0..dim {
                    let du = (g_z[j] - radial * st.z[j]) / st.pre_norm;
                    axpy(du, &st.raw, &mut g_w[j * in_dim..(j + 1) * in_dim]);
                    if has_bias {
                        g_b[j] += du;
                    }
                }
            }
            (g_cb, g_w, g_b)
        })
        .collect();

    let mut g_cb = vec![0.0; m_count * k * d];
    let mut g_w = vec![0.0; dim * in_dim];
    let mut g_b = vec![0.0; if has_bias { dim } else { 0 }];
    for (cb, w, b) in &partials {
        axpy(1.0, cb, &mut g_cb);
        axpy(1.0, w, &mut g_w);
        axpy(1.0, b, &mut g_b);
    }
    axpy(2.0 * hyper.beta, head.weights(), &mut g_w);
    let codeword_reg = if hyper.gamma != 0.0 {
        codeword_regularizer_grad(codebooks, hyper.gamma, &mut g_cb)?;
        codeword_regularizer(codebooks)?
    } else if codebooks.num_codewords() >= 2 {
        codeword_regularizer(codebooks)?
    } else {
        0.0
    };

    for (name, values) in [("projection head", &g_w), ("codebooks", &g_cb), ("bias", &g_b)] {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!(
                "{name} gradient entry {pos} is {} (tau = {}, alpha = {}, eta = {})",
                values[pos], hyper.tau, hyper.alpha, hyper.eta
            )));
        }
    }

    let loss = LossBreakdown::new(terms.total(), head.weight_norm_sq(), codeword_reg, hyper.beta, hyper.gamma);
    Ok(Gradients {
        head: g_w,
        bias: has_bias.then_some(g_b),
        codebooks: g_cb,
        loss,
    })
}

/// Feature-space view augmentation for synthetic data: additive Gaussian
/// noise followed by random coordinate dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureAugmentation {
    pub noise_std: f64,
    pub dropout: f64,
}

impl Default for FeatureAugmentation {
    fn default() -> Self {
        Self {
            noise_std: 0.05,
            dropout: 0.1,
        }
    }
}

impl FeatureAugmentation {
    pub fn apply<R: Rng>(&self, raw: &[f32], rng: &mut R) -> Vec<f32> {
        raw.iter()
            .map(|&x| {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * self.noise_std;
                if rng.random_bool(self.dropout) {
                    0.0
                } else {
                    (x as f64 + noise) as f32
                }
            })
            .collect()
    }
}

/// Training history and outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-batch objective of every completed epoch.
    pub history: Vec<LossBreakdown>,
    /// Epoch whose parameters were kept (`None` if no epoch ran).
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn best_loss(&self) -> Option<&LossBreakdown> {
        self.best_epoch.map(|e| &self.history[e])
    }
}

/// Progress of one finished epoch, handed to the observer of [`fit_with`].
#[derive(Debug, Clone, Copy)]
pub struct EpochProgress {
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Mean per-query contrastive loss, `contrastive / (2 N_B)`.
    pub per_query: f64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, t: i32) {
        let c1 = 1.0 - Self::BETA1.powi(t);
        let c2 = 1.0 - Self::BETA2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// [`fit_with`] without a progress observer.
pub fn fit(train: &FeatureSet, hyper: &Hyperparams) -> Result<(TrainReport, Model)> {
    fit_with(train, hyper, |_| {})
}

/// Mini-batch Adam on the total objective.
///
/// Each epoch reshuffles the items from the seed and uses view pair
/// `(2e mod V, 2e + 1 mod V)` of a file with `V` (even) views, so files with
/// several materialized pairs cycle through them. Incomplete trailing batches
/// are skipped. Training stops after `patience` epochs without an improvement
/// of `min_delta`; the parameters of the lowest-loss epoch are returned.
pub fn fit_with(
    train: &FeatureSet,
    hyper: &Hyperparams,
    mut observer: impl FnMut(&EpochProgress),
) -> Result<(TrainReport, Model)> {
    hyper.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if train.views() < 2 {
        return Err(Error::InvalidParameter(format!(
            "training needs at least two views per item, file has {}",
            train.views()
        )));
    }
    if hyper.batch_size > train.len() {
        return Err(Error::BatchLargerThanDataset {
            batch: hyper.batch_size,
            items: train.len(),
        });
    }
    let in_dim = train.dim();
    let out_dim = hyper.output_dim(in_dim);
    let (mut head, mut codebooks) =
        init_parameters(in_dim, out_dim, hyper.num_codebooks, hyper.num_codewords, hyper.seed)?;

    let start = Instant::now();
    let mut report = TrainReport {
        history: Vec::new(),
        best_epoch: None,
        stopped_early: false,
        wall_clock_secs: 0.0,
    };
    let mut best = (head.clone(), codebooks.clone());
    let mut best_total = f64::INFINITY;
    let mut reference_total = f64::INFINITY;
    let mut stalled = 0;

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x005e_ed0f_ba7c);
    let mut adam_head = Adam::new(head.weights.len());
    let mut adam_bias = Adam::new(head.bias.as_ref().map_or(0, Vec::len));
    let mut adam_cb = Adam::new(codebooks.weights().len());
    let mut step = 0i32;
    let pairs = train.views() / 2;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let to_f64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();

    for epoch in 0..hyper.max_epochs {
        order.shuffle(&mut rng);
        let pair = epoch % pairs;
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for idx in order.chunks_exact(hyper.batch_size) {
            let view_a: Vec<Vec<f64>> = idx.iter().map(|&i| to_f64(train.view(i, 2 * pair))).collect();
            let view_b: Vec<Vec<f64>> = idx.iter().map(|&i| to_f64(train.view(i, 2 * pair + 1))).collect();
            let grads = gradients(&view_a, &view_b, &head, &codebooks, hyper)?;
            step += 1;
            adam_head.step(&mut head.weights, &grads.head, hyper.lr_head, step);
            if let (Some(b), Some(gb)) = (head.bias.as_mut(), grads.bias.as_ref()) {
                adam_bias.step(b, gb, hyper.lr_head, step);
            }
            adam_cb.step(codebooks.weights_mut(), &grads.codebooks, hyper.lr_codebooks, step);
            let l = grads.loss;
            for (s, v) in sums.iter_mut().zip([l.contrastive, l.weight_decay, l.codeword_reg, l.total]) {
                *s += v;
            }
            batches += 1;
        }
        let b = batches as f64;
        let loss = LossBreakdown {
            contrastive: sums[0] / b,
            weight_decay: sums[1] / b,
            codeword_reg: sums[2] / b,
            total: sums[3] / b,
        };
        report.history.push(loss);
        observer(&EpochProgress {
            epoch,
            loss,
            per_query: loss.contrastive / (2 * hyper.batch_size) as f64,
            elapsed_secs: start.elapsed().as_secs_f64(),
        });

        if loss.total < best_total {
            best_total = loss.total;
            best = (head.clone(), codebooks.clone());
            report.best_epoch = Some(epoch);
        }
        if loss.total < reference_total - hyper.min_delta {
            reference_total = loss.total;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= hyper.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    let (head, codebooks) = best;
    Ok((report, Model::new(hyper.clone(), head, codebooks)?))
}
