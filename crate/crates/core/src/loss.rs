//! CLCE objective: softmax cross-entropy fused with a label-aware contrastive
//! term whose negatives are re-weighted towards the hardest ones.
//!
//! For an anchor `i` with positives `P(i)` (other views sharing its label) and
//! negatives `N(i)` (views with a different label), with `s_ij = x_i·x_j / τ`:
//!
//! ```text
//! pos_mass = Σ_{p∈P(i)} exp(s_ip)
//! neg_mass = Σ_{k∈N(i)} w_ik · exp(s_ik),   w_ik = |N(i)| · exp(s_ik) / Σ_{k'} exp(s_ik')
//! ℓ_i      = −log( pos_mass / (|P(i)| · (pos_mass + neg_mass)) )
//! ```
//!
//! With hard-negative mining disabled every `w_ik` is 1. The fused loss is
//! `(1 − λ)·CE + λ·LACLN`.
//!
//! All sums run in ascending row order and every exponential sum is evaluated
//! in log space with max-shifting, so results are bit-reproducible and do not
//! overflow for small temperatures.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the unit-norm invariant of [`EmbeddingBatch`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

const MIN_NORM: f64 = 1e-12;

/// How per-anchor contrastive losses are reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    /// Mean over anchors that have at least one positive.
    #[default]
    MeanOverAnchors,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub hnm_enabled: bool,
    pub lacln_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            lambda: 0.9,
            hnm_enabled: true,
            lacln_reduction: Reduction::MeanOverAnchors,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Unit-norm view embeddings with their labels and originating sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    embeddings: Array2<f64>,
    labels: Vec<usize>,
    sample_ids: Vec<usize>,
}

impl EmbeddingBatch {
    /// Wraps already-normalized embeddings, checking every invariant.
    pub fn new(embeddings: Array2<f64>, labels: Vec<usize>, sample_ids: Vec<usize>) -> Result<Self> {
        check_lengths(embeddings.nrows(), &labels, &sample_ids)?;
        for (i, row) in embeddings.outer_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::InvalidBatch(format!(
                    "row {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self {
            embeddings,
            labels,
            sample_ids,
        })
    }

    /// Normalizes each row of `raw` and wraps the result.
    pub fn from_raw(raw: ArrayView2<f64>, labels: Vec<usize>, sample_ids: Vec<usize>) -> Result<Self> {
        check_lengths(raw.nrows(), &labels, &sample_ids)?;
        let (embeddings, _) = normalize_rows(raw)?;
        Ok(Self {
            embeddings,
            labels,
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_ids(&self) -> &[usize] {
        &self.sample_ids
    }
}

fn check_lengths(rows: usize, labels: &[usize], sample_ids: &[usize]) -> Result<()> {
    if labels.len() != rows || sample_ids.len() != rows {
        return Err(Error::Shape(format!(
            "{rows} embedding rows but {} labels and {} sample ids",
            labels.len(),
            sample_ids.len()
        )));
    }
    Ok(())
}

/// Pre-softmax head outputs with their target labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBatch {
    logits: Array2<f64>,
    labels: Vec<usize>,
}

impl LogitsBatch {
    pub fn new(logits: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if logits.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} logit rows but {} labels",
                logits.nrows(),
                labels.len()
            )));
        }
        let classes = logits.ncols();
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::InvalidBatch(format!(
                "label {l} at row {i} is outside [0, {classes})"
            )));
        }
        Ok(Self { logits, labels })
    }

    pub fn logits(&self) -> ArrayView2<'_, f64> {
        self.logits.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.ncols()
    }
}

/// Loss values for one batch. `per_anchor_lacln[i]` is `None` for anchors
/// without positives; those are excluded from the reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub lacln: f64,
    pub clce: f64,
    pub per_anchor_lacln: Vec<Option<f64>>,
}

/// Gradients of the fused loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ClceGradient {
    /// With respect to the raw (pre-normalization) embeddings.
    pub embeddings: Array2<f64>,
    pub logits: Array2<f64>,
}

pub fn l2_normalize(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if v.is_empty() || !(norm > MIN_NORM) {
        return Err(Error::DegenerateVector { norm });
    }
    Ok(v.mapv(|x| x / norm))
}

/// Row-wise [`l2_normalize`], also returning the original norms.
pub fn normalize_rows(raw: ArrayView2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut out = raw.to_owned();
    let mut norms = Vec::with_capacity(raw.nrows());
    for mut row in out.outer_iter_mut() {
        let norm = row.dot(&row).sqrt();
        if raw.ncols() == 0 || !(norm > MIN_NORM) {
            return Err(Error::DegenerateVector { norm });
        }
        row.mapv_inplace(|x| x / norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `ln(1 + e^d)` without overflow or cancellation.
fn softplus(d: f64) -> f64 {
    if d > 0.0 {
        d + (-d).exp().ln_1p()
    } else {
        d.exp().ln_1p()
    }
}

/// `1 / (1 + e^{-d})`
fn sigmoid(d: f64) -> f64 {
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// Mean softmax cross-entropy over the rows of `batch`.
pub fn softmax_ce(batch: &LogitsBatch) -> Result<f64> {
    let (rows, _) = softmax_ce_rows(batch.logits(), batch.labels(), false)?;
    Ok(mean(&rows))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-row cross-entropy and, optionally, the gradient of their mean.
fn softmax_ce_rows(
    logits: ArrayView2<f64>,
    labels: &[usize],
    want_grad: bool,
) -> Result<(Vec<f64>, Option<Array2<f64>>)> {
    let rows = logits.nrows();
    if rows == 0 {
        return Err(Error::BatchTooSmall { rows });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    let mut grad = want_grad.then(|| Array2::zeros(logits.raw_dim()));
    let scale = 1.0 / rows as f64;
    let mut losses = Vec::with_capacity(rows);
    for (i, row) in logits.outer_iter().enumerate() {
        let target = row[labels[i]];
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let loss = if target == max {
            // ln(1 + Σ_{c≠y} e^{z_c − z_y}), exact for confident rows
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(c, _)| c != labels[i])
                .map(|(_, &v)| (v - target).exp())
                .sum();
            rest.ln_1p()
        } else {
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            (max - target) + sum.ln()
        };
        losses.push(loss);
        if let Some(g) = grad.as_mut() {
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            for (c, &v) in row.iter().enumerate() {
                let p = (v - max).exp() / sum;
                let onehot = if c == labels[i] { 1.0 } else { 0.0 };
                g[[i, c]] = (p - onehot) * scale;
            }
        }
    }
    Ok((losses, grad))
}

/// `(x_i · x_j) / τ` for every pair of rows. Exactly symmetric.
pub fn similarity_matrix(batch: &EmbeddingBatch, tau: f64) -> Array2<f64> {
    scaled_similarities(batch.embeddings(), tau)
}

fn scaled_similarities(x: ArrayView2<f64>, tau: f64) -> Array2<f64> {
    let m = x.nrows();
    let mut sims = Array2::zeros((m, m));
    for i in 0..m {
        for j in i..m {
            let dot: f64 = x.row(i).iter().zip(x.row(j).iter()).map(|(a, b)| a * b).sum();
            let s = dot / tau;
            sims[[i, j]] = s;
            sims[[j, i]] = s;
        }
    }
    sims
}

/// Self-normalized hard-negative weights `w_k = n·softmax(s)_k` for one
/// anchor's τ-scaled similarities to its negatives. They sum to `n`.
pub fn hard_negative_weights(similarities: &[f64]) -> Result<Vec<f64>> {
    if similarities.is_empty() {
        return Err(Error::EmptyNegativeSet);
    }
    let n = similarities.len() as f64;
    let lse = log_sum_exp(similarities.iter().copied());
    Ok(similarities.iter().map(|&s| n * (s - lse).exp()).collect())
}

/// Log-space summary of one anchor's contrastive term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTerms {
    pub positives: usize,
    pub negatives: usize,
    /// `ln pos_mass`.
    pub log_pos_mass: f64,
    /// `ln neg_mass`; `-inf` when there are no negatives.
    pub log_neg_mass: f64,
    /// `ln(1 + neg_mass / pos_mass)`, the part of the loss above `ln|P|`.
    pub excess: f64,
    pub loss: f64,
}

struct AnchorSets {
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

fn anchor_sets(labels: &[usize], i: usize) -> AnchorSets {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (j, &l) in labels.iter().enumerate() {
        if j == i {
            continue;
        }
        if l == labels[i] {
            positives.push(j);
        } else {
            negatives.push(j);
        }
    }
    AnchorSets {
        positives,
        negatives,
    }
}

/// Evaluates one anchor, returning its terms and `∂ℓ_i/∂s_ij` for every
/// other row `j`.
fn anchor_pass(sims: &Array2<f64>, i: usize, sets: &AnchorSets, hnm: bool) -> (AnchorTerms, Vec<(usize, f64)>) {
    let row = sims.row(i);
    let pos = || sets.positives.iter().map(|&p| row[p]);
    let neg = || sets.negatives.iter().map(|&k| row[k]);

    let log_pos = log_sum_exp(pos());
    let lse_neg = log_sum_exp(neg());
    let lse_neg2 = log_sum_exp(neg().map(|s| 2.0 * s));
    let log_neg = if sets.negatives.is_empty() {
        f64::NEG_INFINITY
    } else if hnm {
        (sets.negatives.len() as f64).ln() + lse_neg2 - lse_neg
    } else {
        lse_neg
    };
    let gap = log_neg - log_pos;
    let excess = softplus(gap);
    let loss = (sets.positives.len() as f64).ln() + excess;

    // neg_mass / (pos_mass + neg_mass)
    let neg_share = sigmoid(gap);
    let mut d_sims = Vec::with_capacity(sets.positives.len() + sets.negatives.len());
    for &p in &sets.positives {
        d_sims.push((p, -(row[p] - log_pos).exp() * neg_share));
    }
    for &k in &sets.negatives {
        let soft = (row[k] - lse_neg).exp();
        let d = if hnm {
            let soft2 = (2.0 * row[k] - lse_neg2).exp();
            neg_share * (2.0 * soft2 - soft)
        } else {
            neg_share * soft
        };
        d_sims.push((k, d));
    }
    let terms = AnchorTerms {
        positives: sets.positives.len(),
        negatives: sets.negatives.len(),
        log_pos_mass: log_pos,
        log_neg_mass: log_neg,
        excess,
        loss,
    };
    (terms, d_sims)
}

/// Row-level pieces of the fused loss before reduction.
///
/// [`LossTerms::breakdown`] assembles them into a [`LossBreakdown`];
/// [`central_difference`] differences them term by term.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub ce_rows: Vec<f64>,
    pub anchors: Vec<Option<AnchorTerms>>,
    pub lacln_scale: f64,
    pub lambda: f64,
}

impl LossTerms {
    pub fn breakdown(&self) -> LossBreakdown {
        let ce = mean(&self.ce_rows);
        let per_anchor_lacln: Vec<Option<f64>> = self.anchors.iter().map(|a| a.map(|t| t.loss)).collect();
        let lacln = per_anchor_lacln.iter().flatten().sum::<f64>() * self.lacln_scale;
        LossBreakdown {
            ce,
            lacln,
            clce: combine(ce, lacln, self.lambda),
            per_anchor_lacln,
        }
    }
}

/// `(L(+h) − L(−h)) / 2h` for the fused loss, with the difference taken per
/// row and per anchor so that constant terms (`ln|P|`, untouched rows) cancel
/// exactly instead of leaving rounding noise.
pub fn central_difference(plus: &LossTerms, minus: &LossTerms, h: f64) -> f64 {
    let ce: f64 = plus.ce_rows.iter().zip(&minus.ce_rows).map(|(a, b)| a - b).sum::<f64>()
        / plus.ce_rows.len() as f64;
    let lacln: f64 = plus
        .anchors
        .iter()
        .zip(&minus.anchors)
        .filter_map(|(a, b)| Some(a.as_ref()?.excess - b.as_ref()?.excess))
        .sum::<f64>()
        * plus.lacln_scale;
    let lambda = plus.lambda;
    ((1.0 - lambda) * ce + lambda * lacln) / (2.0 * h)
}

struct LaclnParts {
    anchors: Vec<Option<AnchorTerms>>,
    scale: f64,
    /// Gradient with respect to the normalized embeddings.
    grad: Option<Array2<f64>>,
}

fn lacln_parts(x: ArrayView2<f64>, labels: &[usize], config: &LossConfig, want_grad: bool) -> Result<LaclnParts> {
    config.validate()?;
    let m = x.nrows();
    if m < 2 {
        return Err(Error::BatchTooSmall { rows: m });
    }
    let sims = scaled_similarities(x, config.tau);
    let mut anchors = vec![None; m];
    let mut anchor_grads = Vec::new();
    for (i, slot) in anchors.iter_mut().enumerate() {
        let sets = anchor_sets(labels, i);
        if sets.positives.is_empty() {
            continue;
        }
        let (terms, d_sims) = anchor_pass(&sims, i, &sets, config.hnm_enabled);
        *slot = Some(terms);
        if want_grad {
            anchor_grads.push((i, d_sims));
        }
    }
    let contributing = anchors.iter().flatten().count();
    if contributing == 0 {
        return Err(Error::NoPositivePairs);
    }
    let scale = match config.lacln_reduction {
        Reduction::Sum => 1.0,
        Reduction::MeanOverAnchors => 1.0 / contributing as f64,
    };

    let grad = want_grad.then(|| {
        let mut g = Array2::<f64>::zeros(x.raw_dim());
        let factor = scale / config.tau;
        for (i, d_sims) in anchor_grads {
            for (j, d) in d_sims {
                let c = d * factor;
                for col in 0..x.ncols() {
                    g[[i, col]] += c * x[[j, col]];
                    g[[j, col]] += c * x[[i, col]];
                }
            }
        }
        g
    });

    Ok(LaclnParts { anchors, scale, grad })
}

/// Contrastive loss with optional hard-negative weighting. Returns the reduced
/// total and the per-anchor values.
pub fn lacln_loss(batch: &EmbeddingBatch, config: &LossConfig) -> Result<(f64, Vec<Option<f64>>)> {
    let parts = lacln_parts(batch.embeddings(), batch.labels(), config, false)?;
    let per_anchor: Vec<Option<f64>> = parts.anchors.iter().map(|a| a.map(|t| t.loss)).collect();
    let total = per_anchor.iter().flatten().sum::<f64>() * parts.scale;
    Ok((total, per_anchor))
}

/// Per-anchor masses and losses, for inspecting the weighting behaviour.
pub fn anchor_terms(batch: &EmbeddingBatch, config: &LossConfig) -> Result<Vec<Option<AnchorTerms>>> {
    Ok(lacln_parts(batch.embeddings(), batch.labels(), config, false)?.anchors)
}

fn combine(ce: f64, lacln: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * ce + lambda * lacln
}

fn check_pairing(emb_labels: &[usize], logits: &LogitsBatch) -> Result<()> {
    if emb_labels != logits.labels() {
        return Err(Error::Shape(
            "embedding and logit batches must describe the same views in the same order".into(),
        ));
    }
    Ok(())
}

pub fn clce_loss(emb: &EmbeddingBatch, logits: &LogitsBatch, config: &LossConfig) -> Result<LossBreakdown> {
    check_pairing(emb.labels(), logits)?;
    let (ce_rows, _) = softmax_ce_rows(logits.logits(), logits.labels(), false)?;
    let parts = lacln_parts(emb.embeddings(), emb.labels(), config, false)?;
    Ok(LossTerms {
        ce_rows,
        anchors: parts.anchors,
        lacln_scale: parts.scale,
        lambda: config.lambda,
    }
    .breakdown())
}

/// Gradient of [`clce_loss`]. The embedding rows are treated as raw
/// encoder outputs that happen to have unit norm, so the result includes the
/// normalization Jacobian.
pub fn clce_gradient(emb: &EmbeddingBatch, logits: &LogitsBatch, config: &LossConfig) -> Result<ClceGradient> {
    check_pairing(emb.labels(), logits)?;
    clce_value_and_gradient_raw(emb.embeddings(), logits.logits(), logits.labels(), config).map(|(_, g)| g)
}

/// Loss terms evaluated on raw encoder outputs, normalizing internally.
pub fn loss_terms_raw(
    raw: ArrayView2<f64>,
    logits: ArrayView2<f64>,
    labels: &[usize],
    config: &LossConfig,
) -> Result<LossTerms> {
    check_raw_shapes(raw, logits, labels)?;
    let (x, _) = normalize_rows(raw)?;
    let (ce_rows, _) = softmax_ce_rows(logits, labels, false)?;
    let parts = lacln_parts(x.view(), labels, config, false)?;
    Ok(LossTerms {
        ce_rows,
        anchors: parts.anchors,
        lacln_scale: parts.scale,
        lambda: config.lambda,
    })
}

/// [`clce_loss`] evaluated on raw encoder outputs.
pub fn clce_loss_raw(
    raw: ArrayView2<f64>,
    logits: ArrayView2<f64>,
    labels: &[usize],
    config: &LossConfig,
) -> Result<LossBreakdown> {
    loss_terms_raw(raw, logits, labels, config).map(|t| t.breakdown())
}

/// Loss and gradient with respect to raw encoder outputs and logits.
pub fn clce_value_and_gradient_raw(
    raw: ArrayView2<f64>,
    logits: ArrayView2<f64>,
    labels: &[usize],
    config: &LossConfig,
) -> Result<(LossBreakdown, ClceGradient)> {
    check_raw_shapes(raw, logits, labels)?;
    let (x, norms) = normalize_rows(raw)?;
    let (ce_rows, ce_grad) = softmax_ce_rows(logits, labels, true)?;
    let parts = lacln_parts(x.view(), labels, config, true)?;
    let lambda = config.lambda;

    let mut d_logits = ce_grad.expect("requested");
    d_logits.mapv_inplace(|g| (1.0 - lambda) * g);

    // chain through x = r/‖r‖:  ∂L/∂r = (g − x (x·g)) / ‖r‖
    let mut d_raw = parts.grad.expect("requested");
    for (i, mut g) in d_raw.outer_iter_mut().enumerate() {
        let xi = x.row(i);
        let radial = xi.dot(&g);
        let inv_norm = 1.0 / norms[i];
        for (gc, &xc) in g.iter_mut().zip(xi.iter()) {
            *gc = lambda * (*gc - xc * radial) * inv_norm;
        }
    }

    let breakdown = LossTerms {
        ce_rows,
        anchors: parts.anchors,
        lacln_scale: parts.scale,
        lambda,
    }
    .breakdown();
    Ok((
        breakdown,
        ClceGradient {
            embeddings: d_raw,
            logits: d_logits,
        },
    ))
}

fn check_raw_shapes(raw: ArrayView2<f64>, logits: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if raw.nrows() != labels.len() || logits.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embedding rows, {} logit rows, {} labels",
            raw.nrows(),
            logits.nrows(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= logits.ncols()) {
        return Err(Error::InvalidBatch(format!(
            "label {l} is outside [0, {})",
            logits.ncols()
        )));
    }
    Ok(())
}

/// Worst disagreement found by a finite-difference check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_relative_error: f64,
    pub worst: Option<FdCoordinate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdCoordinate {
    Embedding { row: usize, col: usize },
    Logit { row: usize, col: usize },
}

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares [`clce_gradient`] against central differences of step `h` on
/// every embedding and logit coordinate.
pub fn finite_difference_check(
    emb: &EmbeddingBatch,
    logits: &LogitsBatch,
    config: &LossConfig,
    h: f64,
) -> Result<FdReport> {
    check_step(h)?;
    let analytic = clce_gradient(emb, logits, config)?;
    finite_difference_check_against(emb.embeddings(), logits.logits(), logits.labels(), config, h, &analytic)
}

/// Central-difference check of an arbitrary candidate gradient of
/// [`clce_loss_raw`] at `(raw, logits)`.
pub fn finite_difference_check_against(
    raw: ArrayView2<f64>,
    logits: ArrayView2<f64>,
    labels: &[usize],
    config: &LossConfig,
    h: f64,
    analytic: &ClceGradient,
) -> Result<FdReport> {
    check_step(h)?;
    if analytic.embeddings.dim() != raw.dim() || analytic.logits.dim() != logits.dim() {
        return Err(Error::Shape("gradient shape does not match inputs".into()));
    }
    let mut report = FdReport {
        max_relative_error: 0.0,
        worst: None,
    };
    let mut record = |err: f64, at: FdCoordinate| {
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if report.worst.is_none() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some(at);
        }
    };

    let mut r = raw.to_owned();
    for row in 0..r.nrows() {
        for col in 0..r.ncols() {
            let orig = r[[row, col]];
            r[[row, col]] = orig + h;
            let plus = loss_terms_raw(r.view(), logits, labels, config)?;
            r[[row, col]] = orig - h;
            let minus = loss_terms_raw(r.view(), logits, labels, config)?;
            r[[row, col]] = orig;
            record(
                relative_error(central_difference(&plus, &minus, h), analytic.embeddings[[row, col]]),
                FdCoordinate::Embedding { row, col },
            );
        }
    }
    let mut z = logits.to_owned();
    for row in 0..z.nrows() {
        for col in 0..z.ncols() {
            let orig = z[[row, col]];
            z[[row, col]] = orig + h;
            let plus = loss_terms_raw(raw, z.view(), labels, config)?;
            z[[row, col]] = orig - h;
            let minus = loss_terms_raw(raw, z.view(), labels, config)?;
            z[[row, col]] = orig;
            record(
                relative_error(central_difference(&plus, &minus, h), analytic.logits[[row, col]]),
                FdCoordinate::Logit { row, col },
            );
        }
    }
    Ok(report)
}

pub fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidStepSize(h));
    }
    Ok(())
}
