//! Alignment objective: prediction loss, target prototypes, cross-snippet
//! consistency, interpolation consistency, statistical discrepancy and snippet
//! attention, combined into one weighted objective.
//!
//! Losses act on a [`BatchSnippets`], the encoded features and predictions of
//! one mini-batch. Rows are laid out as all source snippets first, then the
//! target groups one after another, each holding `r` snippets of the same
//! video. A loss returns a [`BatchDual`]: its value plus gradients with respect
//! to the batch features and logits (and, for losses that re-apply the
//! classifier, the classifier weights). [`objective`] chains those into
//! parameter gradients.

mod attention;
mod consistency;
pub mod objective;
mod prototype;
mod statistical;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use self::attention::{apply_attention, attention_weights, AttentionWeights, ATTENTION_EPS};
pub use self::consistency::{
    cross_snippet_loss, cross_snippet_loss_with, draw_ict_plan, ict_pair_loss, select_key_snippet,
    snippet_distribution_loss, snippet_distribution_loss_with, CrossTeachers, IctPair,
    IctPairGrad, IctPlan,
};
pub use self::objective::{
    evaluate, total_loss, Detached, LossReport, ObjectiveConfig, Term, TermWeights,
};
pub use self::prototype::{
    compute_prototypes, prototype_alignment_loss, ClassMeans, PrototypeAccumulator, Prototypes,
};
pub use self::statistical::{
    coral, median_bandwidth, mmd, statistical_loss, StatDual, StatMetric,
};

use crate::diffkernel;
use crate::error::{bail, Result};
use crate::tensor::Tensor2;

/// Labels and grouping of one mini-batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLayout {
    pub source_labels: Vec<usize>,
    /// One label per target video group.
    pub target_labels: Vec<usize>,
    /// Snippets per target group.
    pub r: usize,
}

impl BatchLayout {
    pub fn num_source(&self) -> usize {
        self.source_labels.len()
    }

    pub fn num_groups(&self) -> usize {
        self.target_labels.len()
    }

    pub fn num_target(&self) -> usize {
        self.target_labels.len() * self.r
    }

    pub fn len(&self) -> usize {
        self.num_source() + self.num_target()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row of the `l`-th snippet of target group `j`.
    #[inline]
    pub fn target_row(&self, j: usize, l: usize) -> usize {
        self.num_source() + j * self.r + l
    }

    /// Label of any batch row.
    pub fn label(&self, row: usize) -> usize {
        let ns = self.num_source();
        if row < ns {
            self.source_labels[row]
        } else {
            self.target_labels[(row - ns) / self.r]
        }
    }

    pub fn is_target(&self, row: usize) -> bool {
        row >= self.num_source()
    }
}

/// Encoded snippets of one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSnippets {
    pub layout: BatchLayout,
    /// `N × d` snippet features.
    pub features: Tensor2,
    /// `N × C` predictions.
    pub probs: Tensor2,
}

impl BatchSnippets {
    pub fn new(layout: BatchLayout, features: Tensor2, probs: Tensor2) -> Result<Self> {
        let n = layout.len();
        if features.rows() != n || probs.rows() != n {
            bail!(
                Dimension,
                "batch layout has {n} rows, features {:?}, predictions {:?}",
                features.shape(),
                probs.shape()
            );
        }
        if let Some(&bad) = layout
            .source_labels
            .iter()
            .chain(&layout.target_labels)
            .find(|&&y| y >= probs.cols())
        {
            bail!(Argument, "label {bad} out of range for {} classes", probs.cols());
        }
        Ok(Self {
            layout,
            features,
            probs,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Same batch with the target feature rows replaced.
    pub fn with_target_features(&self, target: &Tensor2) -> Result<Self> {
        let ns = self.layout.num_source();
        if target.rows() != self.layout.num_target() || target.cols() != self.feature_dim() {
            bail!(
                Dimension,
                "replacement target features {:?} do not match batch",
                target.shape()
            );
        }
        let mut features = self.features.clone();
        for i in 0..target.rows() {
            features.row_mut(ns + i).copy_from_slice(target.row(i));
        }
        Ok(Self {
            layout: self.layout.clone(),
            features,
            probs: self.probs.clone(),
        })
    }

    pub fn source_features(&self) -> Tensor2 {
        let idx: Vec<usize> = (0..self.layout.num_source()).collect();
        self.features.select_rows(&idx)
    }

    pub fn target_features(&self) -> Tensor2 {
        let ns = self.layout.num_source();
        let idx: Vec<usize> = (ns..self.layout.len()).collect();
        self.features.select_rows(&idx)
    }
}

/// A loss value with gradients on the batch activations.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDual {
    pub value: f64,
    pub d_features: Tensor2,
    pub d_logits: Tensor2,
    /// Gradient on the classifier `(weight, bias)` for losses that re-apply
    /// the classifier to derived features.
    pub d_classifier: Option<(Tensor2, Tensor2)>,
}

impl BatchDual {
    pub fn zero(batch: &BatchSnippets) -> Self {
        Self {
            value: 0.0,
            d_features: Tensor2::zeros(batch.features.rows(), batch.features.cols()),
            d_logits: Tensor2::zeros(batch.probs.rows(), batch.probs.cols()),
            d_classifier: None,
        }
    }
}

pub(crate) fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = alloc::vec![0.0; classes];
    v[label] = 1.0;
    v
}

/// Mean cross-entropy over source snippets plus mean cross-entropy over all
/// target snippets.
pub fn prediction_loss(batch: &BatchSnippets) -> Result<BatchDual> {
    let layout = &batch.layout;
    let ns = layout.num_source();
    let nt = layout.num_target();
    if ns == 0 || nt == 0 {
        bail!(
            Argument,
            "prediction loss needs both source and target snippets (got {ns} and {nt})"
        );
    }
    let classes = batch.num_classes();
    let mut out = BatchDual::zero(batch);
    let mut source_sum = 0.0;
    let mut target_sum = 0.0;
    for row in 0..layout.len() {
        let target = one_hot(layout.label(row), classes);
        let p = batch.probs.row(row);
        let ce = diffkernel::cross_entropy(p, &target)?;
        let scale = if row < ns {
            source_sum += ce;
            ns as f64
        } else {
            target_sum += ce;
            nt as f64
        };
        let dz = diffkernel::cross_entropy_logit_grad(p, &target)?;
        for (o, g) in out.d_logits.row_mut(row).iter_mut().zip(dz) {
            *o = g / scale;
        }
    }
    out.value = source_sum / ns as f64 + target_sum / nt as f64;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    pub(crate) fn batch(
        source_labels: Vec<usize>,
        target_labels: Vec<usize>,
        r: usize,
        features: Tensor2,
        probs: Tensor2,
    ) -> BatchSnippets {
        BatchSnippets::new(
            BatchLayout {
                source_labels,
                target_labels,
                r,
            },
            features,
            probs,
        )
        .unwrap()
    }

    #[test]
    fn prediction_loss_closed_forms() {
        let probs = Tensor2::from_rows(&[[0.5, 0.5], [1.0, 0.0]]).unwrap();
        let b = batch(vec![0], vec![0], 1, Tensor2::zeros(2, 1), probs);
        let v = prediction_loss(&b).unwrap().value;
        assert!((v - core::f64::consts::LN_2).abs() < 1e-12);

        let probs = Tensor2::from_rows(&[[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]).unwrap();
        let b = batch(vec![1], vec![0], 2, Tensor2::zeros(3, 1), probs);
        assert!(prediction_loss(&b).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn prediction_loss_requires_both_sides() {
        let b = batch(vec![], vec![0], 1, Tensor2::zeros(1, 1), Tensor2::filled(1, 2, 0.5));
        assert!(matches!(prediction_loss(&b), Err(crate::Error::Argument(_))));
    }

    #[test]
    fn layout_rows() {
        let l = BatchLayout {
            source_labels: vec![3, 1],
            target_labels: vec![0, 2],
            r: 3,
        };
        assert_eq!(l.len(), 8);
        assert_eq!(l.target_row(1, 2), 7);
        assert_eq!(l.label(1), 1);
        assert_eq!(l.label(4), 0);
        assert_eq!(l.label(5), 2);
    }
}
