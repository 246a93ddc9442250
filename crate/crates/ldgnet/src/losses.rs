//! Training objectives: cross-entropy, the source-domain classification
//! loss, supervised contrastive learning, bidirectional coarse/fine
//! visual-linguistic alignment, and the weighted total.
//!
//! Contrastive losses use inner products of unit-norm features scaled by a
//! learnable log-parameterized temperature. For each anchor the positive
//! set holds every same-label candidate (self excluded within one feature
//! set) and the loss averages over anchors that have at least one
//! positive. The default denominator runs over all non-anchor candidates,
//! positives included; [`DenomMode::NegativesOnly`] restricts it to
//! different-label candidates and errors when that set is empty.

use thiserror::Error;

use crate::ndgrad::{DiffTensor, GradError, Graph};
use crate::params::{ParamError, ParamStore};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("graph error: {0}")]
    Grad(#[from] GradError),
    #[error("param error: {0}")]
    Param(#[from] ParamError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {0} out of range for {1} classes")]
    LabelOutOfRange(usize, usize),
    #[error("probabilities invalid: {0}")]
    BadProbs(String),
    #[error("feature row {0} is not unit-norm (|x| = {1})")]
    NotUnitNorm(usize, f64),
    #[error("labels disagree with feature rows: {labels} labels for {rows} rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("coarse batches pair one text per image: {texts} texts for {images} images")]
    CoarsePairing { texts: usize, images: usize },
    #[error("fine batches pair two texts per image: {texts} texts for {images} images")]
    FinePairing { texts: usize, images: usize },
    #[error("negatives-only denominator is empty for anchor {0}")]
    EmptyDenominator(usize),
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("lambda must be nonnegative, got {0}")]
    BadLambda(f64),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Learnable temperature bookkeeping. The parameter is the log-scale
/// theta; similarities are multiplied by exp(theta), clamped to [1, 100]
/// after each optimizer step.
pub const LOGIT_SCALE: &str = "align.logit_scale";
/// ln(1/0.07)
pub const THETA_INIT: f64 = 2.659260036932778;
/// exp bounds [1, 100] expressed on theta
pub const THETA_MIN: f64 = 0.0;
pub const THETA_MAX: f64 = 4.605170185988091;

pub fn init_temperature(store: &mut ParamStore) -> Result<()> {
    store.insert(LOGIT_SCALE, vec![1], vec![THETA_INIT], true)?;
    Ok(())
}

/// Clamp exp(theta) into [1, 100] after an update.
pub fn clamp_temperature(store: &mut ParamStore) -> Result<()> {
    let p = store.get_mut(LOGIT_SCALE)?;
    p.data[0] = p.data[0].clamp(THETA_MIN, THETA_MAX);
    Ok(())
}

/// Current tau = exp(-theta).
pub fn tau(store: &ParamStore) -> Result<f64> {
    Ok((-store.get(LOGIT_SCALE)?.data[0]).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DenomMode {
    /// Denominator over every non-anchor candidate (standard form).
    #[default]
    AllCandidates,
    /// Denominator over different-label candidates only, exactly as the
    /// alignment equations print it; errors when a contributing anchor
    /// has no negatives.
    NegativesOnly,
}

/// Scalar loss plus a flag set when every anchor was skipped for lack of
/// positives (the loss is then exactly zero).
pub struct ContrastiveOut {
    pub loss: DiffTensor,
    pub no_positives: bool,
}

/// Paired visual and text features with labels; the positive and negative
/// index sets derive from the labels.
pub struct AlignmentBatch {
    pub visual: DiffTensor,
    pub visual_labels: Vec<u16>,
    pub text: DiffTensor,
    pub text_labels: Vec<u16>,
}

impl AlignmentBatch {
    pub fn new(
        visual: DiffTensor,
        visual_labels: Vec<u16>,
        text: DiffTensor,
        text_labels: Vec<u16>,
    ) -> Result<Self> {
        check_features(&visual, &visual_labels)?;
        check_features(&text, &text_labels)?;
        Ok(AlignmentBatch { visual, visual_labels, text, text_labels })
    }

    /// Text indices that are positives for visual anchor `i`.
    pub fn positives_of_visual(&self, i: usize) -> Vec<usize> {
        same_label_indices(self.visual_labels[i], &self.text_labels, None)
    }

    /// Visual indices that are positives for text anchor `j`.
    pub fn positives_of_text(&self, j: usize) -> Vec<usize> {
        same_label_indices(self.text_labels[j], &self.visual_labels, None)
    }
}

fn same_label_indices(label: u16, labels: &[u16], exclude: Option<usize>) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|&(j, &l)| l == label && Some(j) != exclude)
        .map(|(j, _)| j)
        .collect()
}

fn check_features(feats: &DiffTensor, labels: &[u16]) -> Result<()> {
    let [rows, dim] = feats.shape() else {
        return Err(LossError::BadProbs(format!("features must be [n, d], got {:?}", feats.shape())));
    };
    if labels.len() != *rows {
        return Err(LossError::LabelCount { labels: labels.len(), rows: *rows });
    }
    for (i, row) in feats.data().chunks(*dim).enumerate() {
        let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(LossError::NotUnitNorm(i, n));
        }
    }
    Ok(())
}

/// Eq.-style cross-entropy of a probability vector against a class index.
pub fn cross_entropy(g: &mut Graph, probs: &DiffTensor, label: usize) -> Result<DiffTensor> {
    let c = probs.numel();
    if label >= c {
        return Err(LossError::LabelOutOfRange(label, c));
    }
    let sum: f64 = probs.data().iter().sum();
    if probs.data().iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(LossError::BadProbs(format!("entries must be nonnegative and sum to 1, sum {}", sum)));
    }
    let mut onehot = vec![0.0; c];
    onehot[label] = 1.0;
    let flat = g.reshape(probs, &[c])?;
    let oh = g.constant(onehot, &[c])?;
    let picked = g.mul(&flat, &oh)?;
    let p = g.sum(&picked, None)?;
    let lp = g.log(&p)?;
    Ok(g.scale(&lp, -1.0)?)
}

/// Mean per-sample cross-entropy over a batch of probability rows.
pub fn classification_loss_sd(g: &mut Graph, probs: &DiffTensor, labels: &[u16]) -> Result<DiffTensor> {
    let [b, c] = probs.shape() else {
        return Err(LossError::BadProbs(format!("expected [batch, classes], got {:?}", probs.shape())));
    };
    let (b, c) = (*b, *c);
    if b == 0 {
        return Err(LossError::EmptyBatch);
    }
    if labels.len() != b {
        return Err(LossError::LabelCount { labels: labels.len(), rows: b });
    }
    let mut onehot = vec![0.0; b * c];
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l == 0 || l > c {
            return Err(LossError::LabelOutOfRange(l, c));
        }
        onehot[i * c + (l - 1)] = 1.0;
    }
    let oh = g.constant(onehot, &[b, c])?;
    let picked = g.mul(probs, &oh)?;
    let per = g.sum(&picked, Some(1))?;
    let lp = g.log(&per)?;
    let mean = g.mean(&lp, None)?;
    Ok(g.scale(&mean, -1.0)?)
}

/// Same quantity computed from logits through a shifted log-sum-exp, the
/// stable path the trainer uses. Agrees with
/// `classification_loss_sd(softmax(logits))` to machine precision.
pub fn classification_loss_from_logits(
    g: &mut Graph,
    logits: &DiffTensor,
    labels: &[u16],
) -> Result<DiffTensor> {
    let [b, c] = logits.shape() else {
        return Err(LossError::BadProbs(format!("expected [batch, classes], got {:?}", logits.shape())));
    };
    let (b, c) = (*b, *c);
    if b == 0 {
        return Err(LossError::EmptyBatch);
    }
    if labels.len() != b {
        return Err(LossError::LabelCount { labels: labels.len(), rows: b });
    }
    // constant per-row shift keeps exp in range without touching gradients
    let mut shift = vec![0.0; b * c];
    for (row, chunk) in logits.data().chunks(c).enumerate() {
        let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in &mut shift[row * c..(row + 1) * c] {
            *v = -m;
        }
    }
    let shift_c = g.constant(shift, &[b, c])?;
    let shifted = g.add(logits, &shift_c)?;
    let e = g.exp(&shifted)?;
    let z = g.sum(&e, Some(1))?;
    let lse_shifted = g.log(&z)?; // lse(logits) + shift

    let mut onehot = vec![0.0; b * c];
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l == 0 || l > c {
            return Err(LossError::LabelOutOfRange(l, c));
        }
        onehot[i * c + (l - 1)] = 1.0;
    }
    let oh = g.constant(onehot, &[b, c])?;
    let picked_shifted = g.mul(&shifted, &oh)?;
    let picked = g.sum(&picked_shifted, Some(1))?; // logits[y] + shift
    let per = g.sub(&lse_shifted, &picked)?;
    Ok(g.mean(&per, None)?)
}

/// Shared core: per-anchor -((1/|P|) sum_p z_p - logsumexp_denominator),
/// averaged with `anchor_weights`.
fn masked_anchor_loss(
    g: &mut Graph,
    z: &DiffTensor,
    denom_mask: Vec<f64>,
    pos_weights: Vec<f64>,
    anchor_weights: Vec<f64>,
) -> Result<DiffTensor> {
    let [rows, cols] = z.shape() else { unreachable!("built as a matrix") };
    let (rows, cols) = (*rows, *cols);
    let zmax = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let neg_max = g.constant_scalar(-zmax)?;
    let shifted = g.add(z, &neg_max)?;
    let e = g.exp(&shifted)?;
    let d = g.constant(denom_mask, &[rows, cols])?;
    let masked = g.mul(&e, &d)?;
    let rowsum = g.sum(&masked, Some(1))?;
    let logd_shifted = g.log(&rowsum)?;
    let max_back = g.constant_scalar(zmax)?;
    let logd = g.add(&logd_shifted, &max_back)?;

    let w = g.constant(pos_weights, &[rows, cols])?;
    let pos = g.mul(z, &w)?;
    let rowpos = g.sum(&pos, Some(1))?;

    let per_anchor = g.sub(&logd, &rowpos)?;
    let u = g.constant(anchor_weights, &[rows])?;
    let weighted = g.mul(&per_anchor, &u)?;
    Ok(g.sum(&weighted, None)?)
}

struct AnchorPlan {
    denom_mask: Vec<f64>,
    pos_weights: Vec<f64>,
    /// 1.0 where the anchor has positives, else 0.0; the caller rescales.
    contributing: Vec<f64>,
}

/// Build masks for anchors in `anchor_labels` over candidates in
/// `cand_labels`. `self_offset` marks the anchor's own index within the
/// candidate set (intra-set case), or None for cross-modal batches.
fn plan_anchors(
    anchor_labels: &[u16],
    cand_labels: &[u16],
    intra: bool,
    mode: DenomMode,
) -> Result<AnchorPlan> {
    let rows = anchor_labels.len();
    let cols = cand_labels.len();
    let mut denom_mask = vec![0.0; rows * cols];
    let mut pos_weights = vec![0.0; rows * cols];
    let mut contributing = vec![0.0; rows];
    for i in 0..rows {
        let exclude = if intra { Some(i) } else { None };
        let mut pos = Vec::new();
        let mut denom_size = 0;
        for j in 0..cols {
            if Some(j) == exclude {
                continue;
            }
            let same = cand_labels[j] == anchor_labels[i];
            let in_denom = match mode {
                DenomMode::AllCandidates => true,
                DenomMode::NegativesOnly => !same,
            };
            if in_denom {
                denom_mask[i * cols + j] = 1.0;
                denom_size += 1;
            }
            if same {
                pos.push(j);
            }
        }
        if pos.is_empty() {
            // skipped anchor: keep its row numerically alive so the log
            // stays finite; its weight is zero
            denom_mask[i * cols + if intra { i } else { 0 }] = 1.0;
            continue;
        }
        if denom_size == 0 {
            return Err(LossError::EmptyDenominator(i));
        }
        contributing[i] = 1.0;
        let w = 1.0 / pos.len() as f64;
        for j in pos {
            pos_weights[i * cols + j] = w;
        }
    }
    Ok(AnchorPlan { denom_mask, pos_weights, contributing })
}

/// Supervised contrastive loss over one feature set: anchors and
/// candidates are the same rows, self excluded.
pub fn supcon(
    g: &mut Graph,
    features: &DiffTensor,
    labels: &[u16],
    scale: &DiffTensor,
    mode: DenomMode,
) -> Result<ContrastiveOut> {
    check_features(features, labels)?;
    if labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let sims = g.matmul(features, features, false, true)?;
    let z = g.mul(&sims, scale)?;
    let plan = plan_anchors(labels, labels, true, mode)?;
    let n_contrib: f64 = plan.contributing.iter().sum();
    if n_contrib == 0.0 {
        let loss = g.constant_scalar(0.0)?;
        return Ok(ContrastiveOut { loss, no_positives: true });
    }
    let weights: Vec<f64> = plan.contributing.iter().map(|c| c / n_contrib).collect();
    let loss = masked_anchor_loss(g, &z, plan.denom_mask, plan.pos_weights, weights)?;
    Ok(ContrastiveOut { loss, no_positives: false })
}

/// Image-to-text and text-to-image alignment, averaged over every anchor
/// (visual and textual) that has at least one positive.
pub fn bidirectional_alignment(
    g: &mut Graph,
    batch: &AlignmentBatch,
    scale: &DiffTensor,
    mode: DenomMode,
) -> Result<ContrastiveOut> {
    if batch.visual_labels.is_empty() || batch.text_labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let sims_vt = g.matmul(&batch.visual, &batch.text, false, true)?;
    let z_vt = g.mul(&sims_vt, scale)?;
    let sims_tv = g.matmul(&batch.text, &batch.visual, false, true)?;
    let z_tv = g.mul(&sims_tv, scale)?;

    let plan_v = plan_anchors(&batch.visual_labels, &batch.text_labels, false, mode)?;
    let plan_t = plan_anchors(&batch.text_labels, &batch.visual_labels, false, mode)?;
    let n_contrib: f64 =
        plan_v.contributing.iter().sum::<f64>() + plan_t.contributing.iter().sum::<f64>();
    if n_contrib == 0.0 {
        let loss = g.constant_scalar(0.0)?;
        return Ok(ContrastiveOut { loss, no_positives: true });
    }
    let wv: Vec<f64> = plan_v.contributing.iter().map(|c| c / n_contrib).collect();
    let wt: Vec<f64> = plan_t.contributing.iter().map(|c| c / n_contrib).collect();
    let lv = masked_anchor_loss(g, &z_vt, plan_v.denom_mask, plan_v.pos_weights, wv)?;
    let lt = masked_anchor_loss(g, &z_tv, plan_t.denom_mask, plan_t.pos_weights, wt)?;
    let loss = g.add(&lv, &lt)?;
    Ok(ContrastiveOut { loss, no_positives: false })
}

/// Alignment against one coarse text per image.
pub fn coarse_alignment(
    g: &mut Graph,
    batch: &AlignmentBatch,
    scale: &DiffTensor,
    mode: DenomMode,
) -> Result<ContrastiveOut> {
    if batch.text_labels.len() != batch.visual_labels.len() {
        return Err(LossError::CoarsePairing {
            texts: batch.text_labels.len(),
            images: batch.visual_labels.len(),
        });
    }
    bidirectional_alignment(g, batch, scale, mode)
}

/// Alignment against both fine texts per image.
pub fn fine_alignment(
    g: &mut Graph,
    batch: &AlignmentBatch,
    scale: &DiffTensor,
    mode: DenomMode,
) -> Result<ContrastiveOut> {
    if batch.text_labels.len() != 2 * batch.visual_labels.len() {
        return Err(LossError::FinePairing {
            texts: batch.text_labels.len(),
            images: batch.visual_labels.len(),
        });
    }
    bidirectional_alignment(g, batch, scale, mode)
}

/// L_total = L_SD + lambda * ((1 - alpha) * L_coarse + alpha * L_fine).
pub fn total_loss(
    g: &mut Graph,
    l_sd: &DiffTensor,
    l_coarse: &DiffTensor,
    l_fine: &DiffTensor,
    lambda: f64,
    alpha: f64,
) -> Result<DiffTensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LossError::BadAlpha(alpha));
    }
    if lambda < 0.0 {
        return Err(LossError::BadLambda(lambda));
    }
    let c = g.scale(l_coarse, lambda * (1.0 - alpha))?;
    let f = g.scale(l_fine, lambda * alpha)?;
    let align = g.add(&c, &f)?;
    Ok(g.add(l_sd, &align)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::finite_diff_check;

    // frozen oracle values (closed forms evaluated in 64-bit)
    const CE_07: f64 = 0.356674943938732_4; // -ln 0.7
    const LN4: f64 = 1.386294361119890_6;
    const HALF_LN4: f64 = 0.693147180559945_3;
    const SUPCON_PAIR: f64 = 0.313261687518222_8; // -ln(e/(e+1))
    const LN2: f64 = 0.693147180559945_3;
    const FINE_CASE: f64 = 0.271087229172740_94;

    fn scalar_of(r: Result<DiffTensor>) -> f64 {
        r.unwrap().scalar()
    }

    fn unit_rows(g: &mut Graph, rows: &[&[f64]]) -> DiffTensor {
        let dim = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        g.leaf(data, &[rows.len(), dim], false).unwrap()
    }

    #[test]
    fn cross_entropy_matches_hand_values() {
        let mut g = Graph::new();
        let certain = g.leaf(vec![1.0, 0.0, 0.0], &[3], false).unwrap();
        assert_eq!(scalar_of(cross_entropy(&mut g, &certain, 0)), 0.0);

        let uniform = g.leaf(vec![0.25; 4], &[4], false).unwrap();
        assert!((scalar_of(cross_entropy(&mut g, &uniform, 2)) - LN4).abs() < 1e-12);

        let skewed = g.leaf(vec![0.7, 0.2, 0.1], &[3], false).unwrap();
        assert!((scalar_of(cross_entropy(&mut g, &skewed, 0)) - CE_07).abs() < 1e-9);

        let bad = g.leaf(vec![0.7, 0.2, 0.1], &[3], false).unwrap();
        assert!(matches!(cross_entropy(&mut g, &bad, 3), Err(LossError::LabelOutOfRange(3, 3))));
    }

    #[test]
    fn sd_loss_is_the_batch_mean() {
        let mut g = Graph::new();
        let probs = g
            .leaf(vec![1.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25], &[2, 4], false)
            .unwrap();
        let loss = classification_loss_sd(&mut g, &probs, &[1, 2]).unwrap();
        assert!((loss.scalar() - HALF_LN4).abs() < 1e-12);

        // batch of one equals the single cross-entropy
        let one = g.leaf(vec![0.7, 0.2, 0.1], &[1, 3], false).unwrap();
        let l1 = classification_loss_sd(&mut g, &one, &[1]).unwrap();
        assert!((l1.scalar() - CE_07).abs() < 1e-9);

        // perfect predictions give exactly zero
        let perfect = g.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2], false).unwrap();
        let lp = classification_loss_sd(&mut g, &perfect, &[1, 2]).unwrap();
        assert_eq!(lp.scalar(), 0.0);

        let empty = g.leaf(vec![], &[0, 3], false).unwrap();
        assert!(matches!(
            classification_loss_sd(&mut g, &empty, &[]),
            Err(LossError::EmptyBatch)
        ));
    }

    #[test]
    fn logits_path_agrees_with_probability_path() {
        let mut g = Graph::new();
        let logits_v = vec![1.5, -0.3, 0.9, -2.0, 0.1, 0.4];
        let logits = g.leaf(logits_v.clone(), &[2, 3], false).unwrap();
        let labels = [3u16, 1];
        let via_logits = classification_loss_from_logits(&mut g, &logits, &labels).unwrap();
        let probs = g.softmax(&logits).unwrap();
        let via_probs = classification_loss_sd(&mut g, &probs, &labels).unwrap();
        assert!((via_logits.scalar() - via_probs.scalar()).abs() < 1e-12);
    }

    #[test]
    fn supcon_identical_pair_is_zero() {
        let mut g = Graph::new();
        let feats = unit_rows(&mut g, &[&[1.0, 0.0], &[1.0, 0.0]]);
        let s = g.constant_scalar(1.0).unwrap();
        let out = supcon(&mut g, &feats, &[4, 4], &s, DenomMode::AllCandidates).unwrap();
        assert!(!out.no_positives);
        assert!(out.loss.scalar().abs() < 1e-12);
    }

    #[test]
    fn supcon_two_vs_one_matches_hand_value() {
        let mut g = Graph::new();
        let feats = unit_rows(&mut g, &[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let s = g.constant_scalar(1.0).unwrap();
        let out = supcon(&mut g, &feats, &[1, 1, 2], &s, DenomMode::AllCandidates).unwrap();
        assert!((out.loss.scalar() - SUPCON_PAIR).abs() < 1e-9, "{}", out.loss.scalar());
    }

    #[test]
    fn supcon_without_positives_warns_and_returns_zero() {
        let mut g = Graph::new();
        let feats = unit_rows(&mut g, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = g.constant_scalar(1.0).unwrap();
        let out = supcon(&mut g, &feats, &[1, 2], &s, DenomMode::AllCandidates).unwrap();
        assert!(out.no_positives);
        assert_eq!(out.loss.scalar(), 0.0);
    }

    fn batch_of(
        g: &mut Graph,
        v: &[&[f64]],
        vl: &[u16],
        t: &[&[f64]],
        tl: &[u16],
    ) -> AlignmentBatch {
        let visual = unit_rows(g, v);
        let text = unit_rows(g, t);
        AlignmentBatch::new(visual, vl.to_vec(), text, tl.to_vec()).unwrap()
    }

    #[test]
    fn alignment_single_matched_pair_is_zero() {
        let mut g = Graph::new();
        let b = batch_of(&mut g, &[&[1.0, 0.0]], &[1], &[&[1.0, 0.0]], &[1]);
        let s = g.constant_scalar(1.0).unwrap();
        let out = coarse_alignment(&mut g, &b, &s, DenomMode::AllCandidates).unwrap();
        assert!(out.loss.scalar().abs() < 1e-12);
    }

    #[test]
    fn alignment_two_distinct_pairs_matches_hand_value() {
        let mut g = Graph::new();
        let b = batch_of(
            &mut g,
            &[&[1.0, 0.0], &[0.0, 1.0]],
            &[1, 2],
            &[&[1.0, 0.0], &[0.0, 1.0]],
            &[1, 2],
        );
        let s = g.constant_scalar(1.0).unwrap();
        let out = bidirectional_alignment(&mut g, &b, &s, DenomMode::AllCandidates).unwrap();
        assert!((out.loss.scalar() - SUPCON_PAIR).abs() < 1e-9, "{}", out.loss.scalar());
    }

    #[test]
    fn alignment_identical_class_pairs_exercise_positives_in_denominator() {
        let mut g = Graph::new();
        let b = batch_of(
            &mut g,
            &[&[1.0, 0.0], &[1.0, 0.0]],
            &[1, 1],
            &[&[1.0, 0.0], &[1.0, 0.0]],
            &[1, 1],
        );
        let s = g.constant_scalar(1.0).unwrap();
        let out = bidirectional_alignment(&mut g, &b, &s, DenomMode::AllCandidates).unwrap();
        assert!((out.loss.scalar() - LN2).abs() < 1e-9, "{}", out.loss.scalar());
    }

    #[test]
    fn fine_alignment_matches_hand_value() {
        let mut g = Graph::new();
        let b = batch_of(
            &mut g,
            &[&[1.0, 0.0]],
            &[1],
            &[&[1.0, 0.0], &[0.0, 1.0]],
            &[1, 1],
        );
        let s = g.constant_scalar(1.0).unwrap();
        let out = fine_alignment(&mut g, &b, &s, DenomMode::AllCandidates).unwrap();
        assert!((out.loss.scalar() - FINE_CASE).abs() < 1e-9, "{}", out.loss.scalar());
    }

    #[test]
    fn fine_alignment_rejects_one_text_per_image() {
        let mut g = Graph::new();
        let b = batch_of(&mut g, &[&[1.0, 0.0]], &[1], &[&[1.0, 0.0]], &[1]);
        let s = g.constant_scalar(1.0).unwrap();
        assert!(matches!(
            fine_alignment(&mut g, &b, &s, DenomMode::AllCandidates),
            Err(LossError::FinePairing { texts: 1, images: 1 })
        ));
    }

    #[test]
    fn negatives_only_mode_errors_when_no_negative_exists() {
        let mut g = Graph::new();
        let b = batch_of(
            &mut g,
            &[&[1.0, 0.0], &[1.0, 0.0]],
            &[1, 1],
            &[&[1.0, 0.0], &[1.0, 0.0]],
            &[1, 1],
        );
        let s = g.constant_scalar(1.0).unwrap();
        assert!(matches!(
            bidirectional_alignment(&mut g, &b, &s, DenomMode::NegativesOnly),
            Err(LossError::EmptyDenominator(_))
        ));
    }

    #[test]
    fn negatives_only_mode_shrinks_the_denominator() {
        // with positives excluded from the denominator the ratio grows,
        // so the loss drops below the all-candidates value
        let mut g = Graph::new();
        let feats = unit_rows(&mut g, &[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let s = g.constant_scalar(1.0).unwrap();
        let all = supcon(&mut g, &feats, &[1, 1, 2], &s, DenomMode::AllCandidates).unwrap();
        let neg = supcon(&mut g, &feats, &[1, 1, 2], &s, DenomMode::NegativesOnly).unwrap();
        assert!(neg.loss.scalar() < all.loss.scalar());
        // hand value: -log(e / e^0) = -1
        assert!((neg.loss.scalar() - (-1.0)).abs() < 1e-9);
    }

    #[test]
    fn total_loss_weights_terms_per_the_formula() {
        let mut g = Graph::new();
        let sd = g.constant_scalar(0.5).unwrap();
        let coarse = g.constant_scalar(0.2).unwrap();
        let fine = g.constant_scalar(0.4).unwrap();
        let t = total_loss(&mut g, &sd, &coarse, &fine, 1.0, 0.3).unwrap();
        assert!((t.scalar() - 0.76).abs() < 1e-12);

        let t0 = total_loss(&mut g, &sd, &coarse, &fine, 0.0, 0.3).unwrap();
        assert_eq!(t0.scalar(), 0.5);

        let t1 = total_loss(&mut g, &sd, &coarse, &fine, 2.0, 1.0).unwrap();
        assert!((t1.scalar() - (0.5 + 2.0 * 0.4)).abs() < 1e-12);

        assert!(matches!(
            total_loss(&mut g, &sd, &coarse, &fine, 1.0, 1.5),
            Err(LossError::BadAlpha(_))
        ));
    }

    #[test]
    fn batch_order_does_not_change_the_losses() {
        let rows: Vec<Vec<f64>> = vec![
            vec![0.6, 0.8],
            vec![-0.28, 0.96],
            vec![1.0, 0.0],
            vec![0.0, -1.0],
            vec![0.8, -0.6],
        ];
        let labels = [1u16, 2, 1, 3, 2];
        let perm = [4usize, 2, 0, 3, 1];

        let eval = |order: &[usize]| {
            let mut g = Graph::new();
            let data: Vec<f64> = order.iter().flat_map(|&i| rows[i].clone()).collect();
            let lab: Vec<u16> = order.iter().map(|&i| labels[i]).collect();
            let f = g.leaf(data, &[order.len(), 2], false).unwrap();
            let s = g.constant_scalar(2.5).unwrap();
            supcon(&mut g, &f, &lab, &s, DenomMode::AllCandidates).unwrap().loss.scalar()
        };
        let a = eval(&[0, 1, 2, 3, 4]);
        let b = eval(&perm);
        assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn swapping_modalities_leaves_alignment_unchanged() {
        let mut g = Graph::new();
        let v = unit_rows(&mut g, &[&[0.6, 0.8], &[1.0, 0.0]]);
        let t = unit_rows(&mut g, &[&[0.0, 1.0], &[0.8, -0.6]]);
        let s = g.constant_scalar(3.0).unwrap();
        let ab = AlignmentBatch::new(v.clone(), vec![1, 2], t.clone(), vec![1, 2]).unwrap();
        let ba = AlignmentBatch::new(t, vec![1, 2], v, vec![1, 2]).unwrap();
        let x = bidirectional_alignment(&mut g, &ab, &s, DenomMode::AllCandidates).unwrap();
        let y = bidirectional_alignment(&mut g, &ba, &s, DenomMode::AllCandidates).unwrap();
        assert!((x.loss.scalar() - y.loss.scalar()).abs() < 1e-12);
    }

    #[test]
    fn raising_a_positive_similarity_lowers_the_loss() {
        // text anchor l1's own loss is pinned at 0 and l2 is skipped, so
        // only the v anchor moves as l1 rotates toward v
        let eval = |theta: f64| {
            let mut g = Graph::new();
            let v = unit_rows(&mut g, &[&[1.0, 0.0, 0.0]]);
            let l1 = [theta.cos(), theta.sin(), 0.0];
            let t = unit_rows(&mut g, &[&l1, &[0.0, 0.0, 1.0]]);
            let b = AlignmentBatch::new(v, vec![1], t, vec![1, 2]).unwrap();
            let s = g.constant_scalar(4.0).unwrap();
            bidirectional_alignment(&mut g, &b, &s, DenomMode::AllCandidates).unwrap().loss.scalar()
        };
        let hi = eval(0.5);
        let mid = eval(0.3);
        let lo = eval(0.1);
        assert!(lo < mid && mid < hi, "{} {} {}", lo, mid, hi);
    }

    #[test]
    fn one_positive_per_anchor_keeps_the_loss_nonnegative() {
        let mut rng = crate::stream::rng(17, "losstest");
        use rand::Rng;
        for _ in 0..20 {
            let mut g = Graph::new();
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for _ in 0..6 {
                let mut r: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter_mut().for_each(|v| *v /= n);
                rows.push(r);
            }
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let v = unit_rows(&mut g, &refs[..3]);
            let t = unit_rows(&mut g, &refs[3..]);
            // one pair per class: each anchor has exactly one positive
            let b = AlignmentBatch::new(v, vec![1, 2, 3], t, vec![1, 2, 3]).unwrap();
            let s = g.constant_scalar(rng.random_range(1.0..30.0)).unwrap();
            let out = bidirectional_alignment(&mut g, &b, &s, DenomMode::AllCandidates).unwrap();
            assert!(out.loss.scalar() >= 0.0, "loss {}", out.loss.scalar());
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // supcon w.r.t. raw (pre-normalization) features
        let x0: Vec<f64> = vec![0.9, 0.2, -0.4, 0.7, 0.1, -0.8, 0.5, 0.5, -0.2, 0.3, 0.9, 0.1];
        let labels = [1u16, 1, 2, 2];
        let err = finite_diff_check(
            |g, x| {
                let f = g.l2_normalize(x)?;
                let s = g.constant_scalar(3.0)?;
                let out = supcon(g, &f, &labels, &s, DenomMode::AllCandidates)
                    .map_err(|_| GradError::NonFinite("supcon"))?;
                Ok(out.loss)
            },
            &x0,
            &[4, 3],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "supcon grad error {}", err);

        // alignment w.r.t. theta (the log temperature)
        let err = finite_diff_check(
            |g, theta| {
                let v = g.constant(vec![1.0, 0.0, 0.6, 0.8], &[2, 2])?;
                let t = g.constant(vec![0.8, 0.6, 0.0, 1.0], &[2, 2])?;
                let b = AlignmentBatch::new(v, vec![1, 2], t, vec![1, 2])
                    .map_err(|_| GradError::NonFinite("batch"))?;
                let s = g.exp(theta)?;
                let out = bidirectional_alignment(g, &b, &s, DenomMode::AllCandidates)
                    .map_err(|_| GradError::NonFinite("align"))?;
                Ok(out.loss)
            },
            &[THETA_INIT],
            &[1],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "temperature grad error {}", err);
    }

    #[test]
    fn temperature_initializes_and_clamps() {
        let mut store = ParamStore::new();
        init_temperature(&mut store).unwrap();
        assert!((store.get(LOGIT_SCALE).unwrap().data[0] - THETA_INIT).abs() < 1e-12);
        assert!((tau(&store).unwrap() - 0.07).abs() < 1e-9);

        store.get_mut(LOGIT_SCALE).unwrap().data[0] = 9.0;
        clamp_temperature(&mut store).unwrap();
        assert_eq!(store.get(LOGIT_SCALE).unwrap().data[0], THETA_MAX);
        store.get_mut(LOGIT_SCALE).unwrap().data[0] = -3.0;
        clamp_temperature(&mut store).unwrap();
        assert_eq!(store.get(LOGIT_SCALE).unwrap().data[0], THETA_MIN);
    }
}
