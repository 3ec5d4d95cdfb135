//! The four training loss terms and their weighted combination.
//!
//! All mean-squared terms reduce by MEAN over elements so the weights stay
//! comparable across feature shapes; the latent distance in the contrastive
//! term is likewise the mean squared difference of the flattened latents,
//! making the margin scale-free.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ae::{LatentCode, LearnAutoencoder};
use crate::backbone::{ClassifierHead, FeatureMap, FeatureNormalizer};
use crate::error::ModelError;
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_intra: f64,
    pub lambda_inter: f64,
    pub lambda_cls: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_intra: 1.0,
            lambda_inter: 0.5,
            lambda_cls: 1.0,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ModelError> {
        let finite = self.lambda_intra.is_finite()
            && self.lambda_inter.is_finite()
            && self.lambda_cls.is_finite();
        let non_negative =
            self.lambda_intra >= 0.0 && self.lambda_inter >= 0.0 && self.lambda_cls >= 0.0;
        if !finite || !non_negative || !(self.margin > 0.0) {
            return Err(ModelError::Checkpoint(format!(
                "invalid loss weights {self:?}: lambdas must be finite and non-negative, margin positive"
            )));
        }
        Ok(())
    }
}

/// Mean squared error between a reconstruction and the clean parent's
/// (normalized) features.
pub fn loss_rec(f_tilde: &Tensor, f_clean: &Tensor) -> Result<Tensor, TensorError> {
    if f_tilde.shape() != f_clean.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "loss_rec",
            left: f_tilde.shape().to_vec(),
            right: f_clean.shape().to_vec(),
        });
    }
    let diff = f_tilde.sub(f_clean);
    Ok(diff.mul(&diff).mean())
}

/// Mean squared difference between two flattened latents (same class).
pub fn loss_intra(z_a: &LatentCode, z_b: &LatentCode) -> Result<Tensor, TensorError> {
    latent_sq_distance(&z_a.values, &z_b.values)
}

/// Normalized squared Euclidean distance between flattened latents.
pub fn latent_sq_distance(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "latent_sq_distance",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let fa = a.reshape(&[a.numel()])?;
    let fb = b.reshape(&[b.numel()])?;
    let diff = fa.sub(&fb);
    Ok(diff.mul(&diff).mean())
}

/// Contrastive latent loss: d2 for same-class pairs, max(0, margin - d2) for
/// cross-class pairs.
pub fn loss_inter(
    z_a: &LatentCode,
    z_b: &LatentCode,
    same_class: bool,
    margin: f64,
) -> Result<Tensor, TensorError> {
    assert!(margin > 0.0, "margin must be positive, got {margin}");
    let d2 = latent_sq_distance(&z_a.values, &z_b.values)?;
    if same_class {
        Ok(d2)
    } else {
        Ok(Tensor::scalar(margin).sub(&d2).relu())
    }
}

/// Cross-entropy of the frozen head on a reconstructed feature map. The
/// reconstruction lives on the normalized scale and is mapped back to raw
/// feature scale before entering the head; the head is frozen, so the
/// gradient reaches only the autoencoder.
pub fn loss_cls(
    f_tilde: &Tensor,
    head: &ClassifierHead,
    label: usize,
    normalizer: &FeatureNormalizer,
) -> Result<Tensor, TensorError> {
    let raw = normalizer.denormalize_values(f_tilde)?;
    let logits = head.forward(&raw)?;
    logits.softmax_cross_entropy(label)
}

/// One clean/occluded feature pair, both normalized.
pub struct BatchItem {
    pub clean: FeatureMap,
    pub occluded: FeatureMap,
    pub label: usize,
}

/// Per-term values (unweighted) plus the weighted total.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub rec: f64,
    pub intra: f64,
    pub inter: f64,
    pub cls: f64,
    pub total: f64,
}

/// The weighted combination over one batch:
/// `rec + lambda_intra*intra + lambda_inter*inter + lambda_cls*cls`.
///
/// - reconstruction averages occluded->clean AND clean->clean targets;
/// - the intra term averages parent pairs (clean vs occluded of the same
///   sample) plus an equal count of sampled same-class clean-clean pairs;
/// - the contrastive term averages sampled cross-class pairs (margin side)
///   plus the same-class pairs above (pull side);
/// - the classification term averages the frozen head's cross-entropy over
///   both reconstructions.
pub fn loss_total(
    items: &[BatchItem],
    ae: &LearnAutoencoder,
    head: &ClassifierHead,
    normalizer: &FeatureNormalizer,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, LossBreakdown), ModelError> {
    if items.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    weights.validate()?;
    let b = items.len();

    let mut z_clean = Vec::with_capacity(b);
    let mut z_occ = Vec::with_capacity(b);
    let mut rec_terms = Vec::with_capacity(2 * b);
    let mut cls_terms = Vec::with_capacity(2 * b);
    for item in items {
        let (zc, recon_c) = ae.reconstruct(&item.clean)?;
        let (zo, recon_o) = ae.reconstruct(&item.occluded)?;
        rec_terms.push(loss_rec(&recon_o, &item.clean.values)?);
        rec_terms.push(loss_rec(&recon_c, &item.clean.values)?);
        cls_terms.push(loss_cls(&recon_o, head, item.label, normalizer)?);
        cls_terms.push(loss_cls(&recon_c, head, item.label, normalizer)?);
        z_clean.push(zc);
        z_occ.push(zo);
    }

    // Parent pairs: the occluded latent pulled to its clean parent.
    let mut intra_terms: Vec<Tensor> = Vec::with_capacity(2 * b);
    for i in 0..b {
        intra_terms.push(loss_intra(&z_clean[i], &z_occ[i])?);
    }
    // Same-class clean-clean pairs, one sampled per batch item.
    let mut by_label: std::collections::HashMap<usize, Vec<usize>> = std::collections::HashMap::new();
    for (i, item) in items.iter().enumerate() {
        by_label.entry(item.label).or_default().push(i);
    }
    let mut same_pairs: Vec<(usize, usize)> = Vec::with_capacity(b);
    for i in 0..b {
        let mates = &by_label[&items[i].label];
        if mates.len() < 2 {
            continue;
        }
        let j = loop {
            let cand = mates[rng.gen_range(0..mates.len())];
            if cand != i {
                break cand;
            }
        };
        same_pairs.push((i, j));
    }
    for (i, j) in &same_pairs {
        intra_terms.push(loss_intra(&z_clean[*i], &z_clean[*j])?);
    }

    // Contrastive pairs: cross-class with y=0 (clean or occluded variant on
    // each side), plus the same-class pairs above with y=1.
    let mut inter_terms: Vec<Tensor> = Vec::with_capacity(2 * b);
    let labels: Vec<usize> = items.iter().map(|it| it.label).collect();
    let mut candidates: Vec<usize> = (0..b).collect();
    for i in 0..b {
        candidates.shuffle(rng);
        let Some(j) = candidates.iter().copied().find(|j| labels[*j] != labels[i]) else {
            continue;
        };
        let a = pick_variant(&z_clean, &z_occ, i, rng);
        let other = pick_variant(&z_clean, &z_occ, j, rng);
        inter_terms.push(loss_inter(a, other, false, weights.margin)?);
    }
    for (i, j) in &same_pairs {
        inter_terms.push(loss_inter(&z_clean[*i], &z_occ[*j], true, weights.margin)?);
    }

    let rec = average(&rec_terms);
    let intra = average(&intra_terms);
    let inter = average(&inter_terms);
    let cls = average(&cls_terms);

    let total = rec
        .add(&intra.scale(weights.lambda_intra))
        .add(&inter.scale(weights.lambda_inter))
        .add(&cls.scale(weights.lambda_cls));
    let breakdown = LossBreakdown {
        rec: rec.item(),
        intra: intra.item(),
        inter: inter.item(),
        cls: cls.item(),
        total: total.item(),
    };
    Ok((total, breakdown))
}

fn pick_variant<'a>(
    z_clean: &'a [LatentCode],
    z_occ: &'a [LatentCode],
    idx: usize,
    rng: &mut ChaCha8Rng,
) -> &'a LatentCode {
    if rng.gen_bool(0.5) {
        &z_clean[idx]
    } else {
        &z_occ[idx]
    }
}

fn average(terms: &[Tensor]) -> Tensor {
    match terms.len() {
        0 => Tensor::scalar(0.0),
        n => {
            let mut acc = terms[0].clone();
            for t in &terms[1..] {
                acc = acc.add(t);
            }
            acc.scale(1.0 / n as f64)
        }
    }
}
