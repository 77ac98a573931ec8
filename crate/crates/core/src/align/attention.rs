use alloc::vec::Vec;

use super::{one_hot, BatchSnippets};
use crate::diffkernel;
use crate::error::{bail, Result};
use crate::tensor::Tensor2;

/// Floor on the per-snippet cross-entropy inside the attention reciprocal.
pub const ATTENTION_EPS: f64 = 1e-4;

/// Per target snippet weights, stored group-major (`j * r + l`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub r: usize,
    /// `1 + 1 / max(ce, ε)`, always greater than one.
    pub raw: Vec<f64>,
    /// Raw weights divided by their group mean.
    pub normalized: Vec<f64>,
}

impl AttentionWeights {
    /// All-ones weights, used when attention is switched off.
    pub fn uniform(groups: usize, r: usize) -> Self {
        Self {
            r,
            raw: alloc::vec![1.0; groups * r],
            normalized: alloc::vec![1.0; groups * r],
        }
    }

    pub fn group(&self, j: usize) -> &[f64] {
        &self.normalized[j * self.r..(j + 1) * self.r]
    }
}

/// Weights each target snippet by the inverse of its own cross-entropy against
/// the video label, plus one, normalised to mean one within each video.
pub fn attention_weights(batch: &BatchSnippets) -> Result<AttentionWeights> {
    let layout = &batch.layout;
    let r = layout.r;
    if r == 0 {
        bail!(Argument, "attention needs at least one snippet per target video");
    }
    let classes = batch.num_classes();
    let mut raw = Vec::with_capacity(layout.num_target());
    let mut normalized = Vec::with_capacity(layout.num_target());
    for (j, &label) in layout.target_labels.iter().enumerate() {
        let target = one_hot(label, classes);
        let start = raw.len();
        for l in 0..r {
            let ce = diffkernel::cross_entropy(batch.probs.row(layout.target_row(j, l)), &target)?;
            raw.push(1.0 + 1.0 / ce.max(ATTENTION_EPS));
        }
        let mean = raw[start..].iter().sum::<f64>() / r as f64;
        normalized.extend(raw[start..].iter().map(|w| w / mean));
    }
    Ok(AttentionWeights { r, raw, normalized })
}

/// Scales target feature row `i` (group-major) by its normalised weight.
pub fn apply_attention(target_features: &Tensor2, weights: &AttentionWeights) -> Result<Tensor2> {
    if target_features.rows() != weights.normalized.len() {
        bail!(
            Dimension,
            "{} target features but {} attention weights",
            target_features.rows(),
            weights.normalized.len()
        );
    }
    let mut out = target_features.clone();
    for (i, &w) in weights.normalized.iter().enumerate() {
        for v in out.row_mut(i) {
            *v *= w;
        }
    }
    Ok(out)
}
