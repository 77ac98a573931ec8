//! Cross-snippet consistency and interpolation consistency.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::{BatchDual, BatchSnippets};
use crate::diffkernel::{self, affine, affine_backward, softmax};
use crate::error::{bail, Result};
use crate::model::{ModelParams, BC, WC};
use crate::tensor::Tensor2;

/// Picks the anchor snippet of one target video: the lowest-entropy snippet
/// among those classified correctly, or the lowest-entropy snippet overall
/// when none is. Ties go to the lowest index.
pub fn select_key_snippet<P: AsRef<[f64]>>(predictions: &[P], label: usize) -> usize {
    let mut best_correct: Option<(usize, f64)> = None;
    let mut best_any: Option<(usize, f64)> = None;
    for (i, p) in predictions.iter().enumerate() {
        let p = p.as_ref();
        let h = diffkernel::entropy(p);
        if best_any.is_none_or(|(_, bh)| h < bh) {
            best_any = Some((i, h));
        }
        if diffkernel::argmax(p) == label && best_correct.is_none_or(|(_, bh)| h < bh) {
            best_correct = Some((i, h));
        }
    }
    best_correct.or(best_any).map_or(0, |(i, _)| i)
}

/// Key snippet index per target group and the key's (constant) prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossTeachers {
    pub keys: Vec<usize>,
    /// `groups × C`.
    pub probs: Tensor2,
}

impl CrossTeachers {
    pub fn select(batch: &BatchSnippets) -> Self {
        let layout = &batch.layout;
        let mut keys = Vec::with_capacity(layout.num_groups());
        let mut rows = Vec::with_capacity(layout.num_groups());
        for (j, &label) in layout.target_labels.iter().enumerate() {
            let preds: Vec<&[f64]> = (0..layout.r)
                .map(|l| batch.probs.row(layout.target_row(j, l)))
                .collect();
            let key = select_key_snippet(&preds, label);
            keys.push(key);
            rows.push(layout.target_row(j, key));
        }
        Self {
            keys,
            probs: batch.probs.select_rows(&rows),
        }
    }
}

/// Mean `KL(o_key ‖ o_l)` over the non-key snippets of every target video,
/// with the key predictions taken from `teachers` and held constant.
pub fn cross_snippet_loss_with(batch: &BatchSnippets, teachers: &CrossTeachers) -> Result<BatchDual> {
    let layout = &batch.layout;
    let r = layout.r;
    if r < 2 {
        bail!(Config, "cross-snippet consistency needs r >= 2 snippets per target video, got {r}");
    }
    let groups = layout.num_groups();
    if groups == 0 {
        bail!(Argument, "cross-snippet consistency needs at least one target video");
    }
    if teachers.keys.len() != groups || teachers.probs.shape() != (groups, batch.num_classes()) {
        bail!(Dimension, "teacher predictions do not match the batch");
    }
    let norm = (groups * (r - 1)) as f64;
    let mut out = BatchDual::zero(batch);
    let mut sum = 0.0;
    for j in 0..groups {
        let teacher = diffkernel::clamp_normalized(teachers.probs.row(j));
        let mass: f64 = teacher.iter().sum();
        for l in (0..r).filter(|&l| l != teachers.keys[j]) {
            let row = layout.target_row(j, l);
            let q = batch.probs.row(row);
            sum += diffkernel::kl_divergence(&teacher, q)?;
            // d/dz of −Σ a·ln softmax(z) is softmax(z)·Σa − a.
            for ((o, &qc), &ac) in out.d_logits.row_mut(row).iter_mut().zip(q).zip(&teacher) {
                *o = (qc * mass - ac) / norm;
            }
        }
    }
    out.value = sum / norm;
    Ok(out)
}

/// [`cross_snippet_loss_with`] using keys selected from the batch itself.
pub fn cross_snippet_loss(batch: &BatchSnippets) -> Result<BatchDual> {
    cross_snippet_loss_with(batch, &CrossTeachers::select(batch))
}

/// Gradients of a single interpolation-consistency pair.
#[derive(Debug, Clone, PartialEq)]
pub struct IctPairGrad {
    pub value: f64,
    pub d_feature_a: Vec<f64>,
    pub d_feature_b: Vec<f64>,
    pub d_weight: Tensor2,
    pub d_bias: Tensor2,
}

/// Cross-entropy between the classifier's prediction on `λ·f_a + (1−λ)·f_b`
/// and the constant target `λ·o_a + (1−λ)·o_b`.
pub fn ict_pair_loss(
    f_a: &[f64],
    o_a: &[f64],
    f_b: &[f64],
    o_b: &[f64],
    lambda: f64,
    params: &ModelParams,
) -> Result<IctPairGrad> {
    let mixed = Tensor2::row_vector(&diffkernel::convex_mix_slice(f_a, f_b, lambda)?)?;
    let target = diffkernel::convex_mix_slice(o_a, o_b, lambda)?;
    let w = params.block(WC);
    let logits = affine(&mixed, w, params.block(BC))?;
    let probs = softmax(&logits);
    let value = diffkernel::cross_entropy(probs.row(0), &target)?;
    let dz = Tensor2::row_vector(&diffkernel::cross_entropy_logit_grad(probs.row(0), &target)?)?;
    let g = affine_backward(&mixed, w, &dz)?;
    let d_mixed = g.input.row(0);
    Ok(IctPairGrad {
        value,
        d_feature_a: d_mixed.iter().map(|v| lambda * v).collect(),
        d_feature_b: d_mixed.iter().map(|v| (1.0 - lambda) * v).collect(),
        d_weight: g.weight,
        d_bias: g.bias,
    })
}

/// One sampled pair: batch rows `a`, `b` and the weight `λ` on `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IctPair {
    pub a: usize,
    pub b: usize,
    pub lambda: f64,
}

/// Sampled pairs together with their (constant) mixed prediction targets.
#[derive(Debug, Clone, PartialEq)]
pub struct IctPlan {
    pub pairs: Vec<IctPair>,
    /// `pairs × C`.
    pub targets: Tensor2,
}

/// Pairs every batch row with one other row drawn uniformly (never itself)
/// and draws a fresh `λ ~ Beta(α, α)` per pair.
pub fn draw_ict_plan<R: Rng + ?Sized>(
    batch: &BatchSnippets,
    alpha_v: f64,
    rng: &mut R,
) -> Result<IctPlan> {
    let n = batch.layout.len();
    if n < 2 {
        bail!(Argument, "interpolation consistency needs at least two snippets, got {n}");
    }
    let beta = match Beta::new(alpha_v, alpha_v) {
        Ok(b) => b,
        Err(e) => bail!(Argument, "invalid Beta parameter {alpha_v}: {e}"),
    };
    let mut pairs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n * batch.num_classes());
    for a in 0..n {
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let lambda: f64 = beta.sample(rng);
        let lambda = lambda.clamp(0.0, 1.0);
        targets.extend(diffkernel::convex_mix_slice(
            batch.probs.row(a),
            batch.probs.row(b),
            lambda,
        )?);
        pairs.push(IctPair { a, b, lambda });
    }
    let targets = Tensor2::new(n, batch.num_classes(), targets)?;
    Ok(IctPlan { pairs, targets })
}

/// Mean interpolation-consistency loss over the pairs of `plan`.
pub fn snippet_distribution_loss_with(
    batch: &BatchSnippets,
    plan: &IctPlan,
    params: &ModelParams,
) -> Result<BatchDual> {
    let count = plan.pairs.len();
    if count == 0 || plan.targets.rows() != count {
        bail!(Argument, "empty or inconsistent interpolation plan");
    }
    let dim = batch.feature_dim();
    let mut mixed = Vec::with_capacity(count * dim);
    for p in &plan.pairs {
        mixed.extend(diffkernel::convex_mix_slice(
            batch.features.row(p.a),
            batch.features.row(p.b),
            p.lambda,
        )?);
    }
    let mixed = Tensor2::new(count, dim, mixed)?;
    let w = params.block(WC);
    let probs = softmax(&affine(&mixed, w, params.block(BC))?);
    let mut sum = 0.0;
    let mut dz = Tensor2::zeros(count, probs.cols());
    for i in 0..count {
        let target = plan.targets.row(i);
        sum += diffkernel::cross_entropy(probs.row(i), target)?;
        let g = diffkernel::cross_entropy_logit_grad(probs.row(i), target)?;
        for (o, v) in dz.row_mut(i).iter_mut().zip(g) {
            *o = v / count as f64;
        }
    }
    let g = affine_backward(&mixed, w, &dz)?;
    let mut out = BatchDual::zero(batch);
    for (i, p) in plan.pairs.iter().enumerate() {
        let d_mixed = g.input.row(i);
        for (o, v) in out.d_features.row_mut(p.a).iter_mut().zip(d_mixed) {
            *o += p.lambda * v;
        }
        for (o, v) in out.d_features.row_mut(p.b).iter_mut().zip(d_mixed) {
            *o += (1.0 - p.lambda) * v;
        }
    }
    out.value = sum / count as f64;
    out.d_classifier = Some((g.weight, g.bias));
    Ok(out)
}

/// Draws a plan with [`draw_ict_plan`] and evaluates it.
pub fn snippet_distribution_loss<R: Rng + ?Sized>(
    batch: &BatchSnippets,
    alpha_v: f64,
    rng: &mut R,
    params: &ModelParams,
) -> Result<BatchDual> {
    let plan = draw_ict_plan(batch, alpha_v, rng)?;
    snippet_distribution_loss_with(batch, &plan, params)
}
