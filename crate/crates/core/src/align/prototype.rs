use alloc::vec;
use alloc::vec::Vec;

use super::{BatchDual, BatchSnippets};
use crate::diffkernel;
use crate::error::{bail, Result};
use crate::tensor::Tensor2;

/// Per-class mean of a set of features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    /// `C × d`; rows of classes with no members are zero.
    pub means: Tensor2,
    pub counts: Vec<usize>,
}

/// Running per-class feature sums, fed one snippet at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeAccumulator {
    sums: Tensor2,
    counts: Vec<usize>,
}

impl PrototypeAccumulator {
    pub fn new(classes: usize, dim: usize) -> Self {
        Self {
            sums: Tensor2::zeros(classes, dim),
            counts: vec![0; classes],
        }
    }

    pub fn add(&mut self, label: usize, feature: &[f64]) -> Result<()> {
        if label >= self.counts.len() || feature.len() != self.sums.cols() {
            bail!(
                Dimension,
                "cannot accumulate a {}-dim feature for class {label}",
                feature.len()
            );
        }
        for (s, f) in self.sums.row_mut(label).iter_mut().zip(feature) {
            *s += f;
        }
        self.counts[label] += 1;
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn means(&self) -> ClassMeans {
        let mut means = self.sums.clone();
        for (c, &n) in self.counts.iter().enumerate() {
            if n > 0 {
                for v in means.row_mut(c) {
                    *v /= n as f64;
                }
            }
        }
        ClassMeans {
            means,
            counts: self.counts.clone(),
        }
    }

    pub fn clear(&mut self) {
        self.sums.scale(0.0);
        self.counts.iter_mut().for_each(|c| *c = 0);
    }
}

/// Mean feature of each class over the given rows.
pub fn compute_prototypes(features: &Tensor2, labels: &[usize], classes: usize) -> Result<ClassMeans> {
    if features.rows() != labels.len() {
        bail!(
            Dimension,
            "{} features but {} labels",
            features.rows(),
            labels.len()
        );
    }
    let mut acc = PrototypeAccumulator::new(classes, features.cols());
    for (row, &y) in features.iter_rows().zip(labels) {
        acc.add(y, row)?;
    }
    Ok(acc.means())
}

/// Target class prototypes with exponential-moving-average state.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    centers: Tensor2,
    present: Vec<bool>,
    initialized: bool,
    /// Weight of the current-epoch prototype in the moving average.
    pub lambda_p: f64,
}

impl Prototypes {
    pub fn new(classes: usize, dim: usize, lambda_p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda_p) {
            bail!(Argument, "prototype momentum {lambda_p} outside [0, 1]");
        }
        Ok(Self {
            centers: Tensor2::zeros(classes, dim),
            present: vec![false; classes],
            initialized: false,
            lambda_p,
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn centers(&self) -> &Tensor2 {
        &self.centers
    }

    /// Whether class `c` has ever received a prototype.
    pub fn has_class(&self, c: usize) -> bool {
        self.present[c]
    }

    fn check_shape(&self, current: &ClassMeans) -> Result<()> {
        if !current.means.same_shape(&self.centers) || current.counts.len() != self.present.len() {
            bail!(
                Dimension,
                "prototype shape {:?} vs current {:?}",
                self.centers.shape(),
                current.means.shape()
            );
        }
        Ok(())
    }

    /// First assignment from one epoch's class means.
    pub fn initialize(&mut self, current: &ClassMeans) -> Result<()> {
        self.check_shape(current)?;
        for (c, &n) in current.counts.iter().enumerate() {
            if n > 0 {
                self.centers.row_mut(c).copy_from_slice(current.means.row(c));
                self.present[c] = true;
            }
        }
        if !self.centers.is_finite() {
            bail!(NonFinite, "prototype initialisation produced non-finite values");
        }
        self.initialized = true;
        Ok(())
    }

    /// `Pr ← λ_P·current + (1 − λ_P)·previous` for every class present in
    /// `current`; absent classes keep their previous prototype.
    pub fn update(&mut self, current: &ClassMeans) -> Result<()> {
        if !self.initialized {
            bail!(Sequencing, "prototypes must be initialised before the moving-average update");
        }
        self.check_shape(current)?;
        let lambda = self.lambda_p;
        for (c, &n) in current.counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            if !self.present[c] {
                self.centers.row_mut(c).copy_from_slice(current.means.row(c));
                self.present[c] = true;
                continue;
            }
            let cur = current.means.row(c);
            for (p, &x) in self.centers.row_mut(c).iter_mut().zip(cur) {
                *p = if lambda == 1.0 {
                    x
                } else if lambda == 0.0 {
                    *p
                } else {
                    lambda * x + (1.0 - lambda) * *p
                };
            }
        }
        Ok(())
    }
}

/// Mean Euclidean distance from each source feature to the prototype of its
/// class. Prototypes are constants; sources of classes without a prototype
/// contribute zero.
pub fn prototype_alignment_loss(batch: &BatchSnippets, protos: &Prototypes) -> Result<BatchDual> {
    if !protos.is_initialized() {
        bail!(Sequencing, "prototype alignment requested before prototypes exist");
    }
    if protos.centers.cols() != batch.feature_dim() {
        bail!(
            Dimension,
            "prototypes are {}-dim, features {}-dim",
            protos.centers.cols(),
            batch.feature_dim()
        );
    }
    let ns = batch.layout.num_source();
    if ns == 0 {
        bail!(Argument, "prototype alignment needs source snippets");
    }
    let mut out = BatchDual::zero(batch);
    let mut sum = 0.0;
    for (i, &y) in batch.layout.source_labels.iter().enumerate() {
        if !protos.present[y] {
            continue;
        }
        let f = batch.features.row(i);
        let pr = protos.centers.row(y);
        sum += diffkernel::euclidean_distance(f, pr)?;
        let g = diffkernel::euclidean_distance_grad(f, pr)?;
        for (o, gv) in out.d_features.row_mut(i).iter_mut().zip(g) {
            *o = gv / ns as f64;
        }
    }
    out.value = sum / ns as f64;
    Ok(out)
}
