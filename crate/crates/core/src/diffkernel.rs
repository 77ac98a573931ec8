//! Differentiable numeric primitives with hand-written backward passes, and a
//! central-difference gradient checker.
//!
//! Every primitive is a pure function. Probability rows are plain slices; the
//! batched ops work on [`Tensor2`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::math;
use crate::tensor::Tensor2;

/// Lower clamp applied to probabilities before any logarithm or reciprocal.
pub const PROB_CLAMP: f64 = 1e-7;

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0)
}

/// Gradients of [`affine`] with respect to its three inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub input: Tensor2,
    pub weight: Tensor2,
    pub bias: Tensor2,
}

/// `x·W + b`, broadcasting the bias row over the batch.
pub fn affine(x: &Tensor2, w: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    check_affine_shapes(x, w, b)?;
    let (batch, inner) = x.shape();
    let out_dim = w.cols();
    let mut out = Tensor2::zeros(batch, out_dim);
    for i in 0..batch {
        let xi = x.row(i);
        let oi = out.row_mut(i);
        oi.copy_from_slice(b.row(0));
        for (k, &xv) in xi.iter().enumerate().take(inner) {
            if xv == 0.0 {
                continue;
            }
            for (o, &wv) in oi.iter_mut().zip(w.row(k)) {
                *o += xv * wv;
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`affine`] given the upstream gradient `d_out`.
pub fn affine_backward(x: &Tensor2, w: &Tensor2, d_out: &Tensor2) -> Result<AffineGrads> {
    if x.cols() != w.rows() || d_out.shape() != (x.rows(), w.cols()) {
        bail!(
            Dimension,
            "affine backward: x {:?}, W {:?}, upstream {:?}",
            x.shape(),
            w.shape(),
            d_out.shape()
        );
    }
    let (batch, inner) = x.shape();
    let out_dim = w.cols();
    let mut dx = Tensor2::zeros(batch, inner);
    let mut dw = Tensor2::zeros(inner, out_dim);
    let mut db = Tensor2::zeros(1, out_dim);
    for i in 0..batch {
        let gi = d_out.row(i);
        for (acc, &g) in db.data_mut().iter_mut().zip(gi) {
            *acc += g;
        }
        let xi = x.row(i);
        for k in 0..inner {
            let wk = w.row(k);
            dx[(i, k)] = gi.iter().zip(wk).map(|(g, w)| g * w).sum();
            let xv = xi[k];
            if xv != 0.0 {
                for (acc, &g) in dw.row_mut(k).iter_mut().zip(gi) {
                    *acc += xv * g;
                }
            }
        }
    }
    Ok(AffineGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

fn check_affine_shapes(x: &Tensor2, w: &Tensor2, b: &Tensor2) -> Result<()> {
    if x.cols() != w.rows() || b.shape() != (1, w.cols()) {
        bail!(
            Dimension,
            "affine: x {:?}, W {:?}, b {:?} do not conform",
            x.shape(),
            w.shape(),
            b.shape()
        );
    }
    Ok(())
}

pub fn relu(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    out
}

/// Subgradient at exactly zero is taken as zero.
pub fn relu_backward(x: &Tensor2, d_out: &Tensor2) -> Result<Tensor2> {
    if !x.same_shape(d_out) {
        bail!(Dimension, "relu backward: {:?} vs {:?}", x.shape(), d_out.shape());
    }
    let mut dx = d_out.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(dx)
}

/// Row-wise softmax with max subtraction.
pub fn softmax(z: &Tensor2) -> Tensor2 {
    let mut out = z.clone();
    for i in 0..z.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn softmax_row(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Backward of softmax for a general upstream gradient on the probabilities.
pub fn softmax_backward(probs: &Tensor2, d_probs: &Tensor2) -> Result<Tensor2> {
    if !probs.same_shape(d_probs) {
        bail!(
            Dimension,
            "softmax backward: {:?} vs {:?}",
            probs.shape(),
            d_probs.shape()
        );
    }
    let mut dz = Tensor2::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let g = d_probs.row(i);
        let dot: f64 = p.iter().zip(g).map(|(p, g)| p * g).sum();
        for ((out, &pc), &gc) in dz.row_mut(i).iter_mut().zip(p).zip(g) {
            *out = pc * (gc - dot);
        }
    }
    Ok(dz)
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        bail!(Dimension, "{what}: lengths {} and {} differ", a.len(), b.len());
    }
    Ok(())
}

/// `−Σ target_c · ln(clamp(o_c))`.
pub fn cross_entropy(o: &[f64], target: &[f64]) -> Result<f64> {
    same_len(o, target, "cross entropy")?;
    Ok(-o
        .iter()
        .zip(target)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| t * math::ln(clamp_prob(p)))
        .sum::<f64>())
}

/// Gradient of [`cross_entropy`] with respect to `o`; zero where the clamp is
/// active. The target never receives gradient.
pub fn cross_entropy_grad(o: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    same_len(o, target, "cross entropy")?;
    Ok(o.iter()
        .zip(target)
        .map(|(&p, &t)| if p < PROB_CLAMP { 0.0 } else { -t / p })
        .collect())
}

/// Gradient of `cross_entropy(softmax(z), target)` with respect to the logits
/// `z`: `softmax(z)·Σtarget − target`, which is `softmax(z) − target` for a
/// normalised target.
///
/// This is the fused form used for training; it coincides with composing
/// [`cross_entropy_grad`] and [`softmax_backward`] wherever the clamp is
/// inactive.
pub fn cross_entropy_logit_grad(probs: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    same_len(probs, target, "cross entropy")?;
    let mass: f64 = target.iter().sum();
    Ok(probs
        .iter()
        .zip(target)
        .map(|(p, t)| if mass == 1.0 { p - t } else { p * mass - t })
        .collect())
}

/// Clamps every entry to `[PROB_CLAMP, 1]` and renormalises to unit mass.
pub fn clamp_normalized(p: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = p.iter().map(|&v| clamp_prob(v)).collect();
    let mass: f64 = clamped.iter().sum();
    clamped.into_iter().map(|v| v / mass).collect()
}

/// `Σ p_c ln(p_c / q_c)` after [`clamp_normalized`] on both rows, so the
/// value is a divergence between proper distributions.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    same_len(p, q, "kl divergence")?;
    let (p, q) = (clamp_normalized(p), clamp_normalized(q));
    Ok(p.iter()
        .zip(&q)
        .map(|(&pc, &qc)| pc * (math::ln(pc) - math::ln(qc)))
        .sum())
}

/// Gradient of [`kl_divergence`] with respect to `q`.
pub fn kl_divergence_grad_q(p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    same_len(p, q, "kl divergence")?;
    let p = clamp_normalized(p);
    let mass: f64 = q.iter().map(|&v| clamp_prob(v)).sum();
    Ok(p.iter()
        .zip(q)
        .map(|(&pc, &qc)| {
            if qc < PROB_CLAMP {
                0.0
            } else {
                1.0 / mass - pc / qc
            }
        })
        .collect())
}

/// Shannon entropy `−Σ p ln p` (clamped).
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .map(|&pc| {
            let c = clamp_prob(pc);
            c * math::ln(c)
        })
        .sum::<f64>()
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a, b, "euclidean distance")?;
    Ok(math::sqrt(
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
    ))
}

/// Gradient of [`euclidean_distance`] with respect to `a` (the gradient with
/// respect to `b` is its negation). Defined as zero when `a == b`.
pub fn euclidean_distance_grad(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let dist = euclidean_distance(a, b)?;
    if dist == 0.0 {
        return Ok(vec![0.0; a.len()]);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) / dist).collect())
}

/// `λ·a + (1−λ)·b`. Exact at λ ∈ {0, 1}.
pub fn convex_mix(a: &Tensor2, b: &Tensor2, lambda: f64) -> Result<Tensor2> {
    if !a.same_shape(b) {
        bail!(Dimension, "convex mix: {:?} vs {:?}", a.shape(), b.shape());
    }
    let data = convex_mix_slice(a.data(), b.data(), lambda)?;
    Tensor2::new(a.rows(), a.cols(), data)
}

pub fn convex_mix_slice(a: &[f64], b: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        bail!(Argument, "mixing weight {lambda} outside [0, 1]");
    }
    same_len(a, b, "convex mix")?;
    Ok(if lambda == 1.0 {
        a.to_vec()
    } else if lambda == 0.0 {
        b.to_vec()
    } else {
        a.iter()
            .zip(b)
            .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
            .collect()
    })
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// A scalar together with its gradient for each parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct DualValue {
    pub value: f64,
    pub grads: Vec<Tensor2>,
}

/// Worst central-difference disagreement found in one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub block: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// A coordinate whose analytic and numeric gradients disagree beyond tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct FlaggedCoordinate {
    pub block: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub flagged: Vec<FlaggedCoordinate>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.max_rel_error))
    }
}

/// Denominator floor for relative errors, so that gradients that are
/// numerically zero are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradient returned by `loss` against central
/// differences `(L(θ+h) − L(θ−h)) / 2h` on every coordinate of every block.
///
/// `loss` must be a deterministic function of the parameters.
pub fn check_gradients<F>(
    mut loss: F,
    params: &[Tensor2],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor2]) -> Result<DualValue>,
{
    if !(step > 0.0) {
        bail!(Argument, "finite-difference step must be positive, got {step}");
    }
    let base = loss(params)?;
    if !base.value.is_finite() {
        bail!(NonFinite, "loss at the base point is {}", base.value);
    }
    if base.grads.len() != params.len() {
        bail!(
            Dimension,
            "loss returned {} gradient blocks for {} parameter blocks",
            base.grads.len(),
            params.len()
        );
    }
    let mut work: Vec<Tensor2> = params.to_vec();
    let mut blocks = Vec::with_capacity(params.len());
    let mut flagged = Vec::new();
    for (bi, grad) in base.grads.iter().enumerate() {
        if !grad.same_shape(&params[bi]) {
            bail!(
                Dimension,
                "gradient block {bi} has shape {:?}, parameter has {:?}",
                grad.shape(),
                params[bi].shape()
            );
        }
        let mut worst = BlockCheck {
            block: bi,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in 0..grad.data().len() {
            let orig = work[bi].data()[idx];
            work[bi].data_mut()[idx] = orig + step;
            let plus = loss(&work)?.value;
            work[bi].data_mut()[idx] = orig - step;
            let minus = loss(&work)?.value;
            work[bi].data_mut()[idx] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss non-finite when perturbing block {bi} coordinate {idx}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grad.data()[idx];
            let rel = relative_error(analytic, numeric);
            if rel > worst.max_rel_error || idx == 0 {
                worst = BlockCheck {
                    block: bi,
                    max_rel_error: rel,
                    worst_index: idx,
                    analytic,
                    numeric,
                };
            }
            if rel > tolerance {
                flagged.push(FlaggedCoordinate {
                    block: bi,
                    index: idx,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        blocks.push(worst);
    }
    Ok(GradCheckReport { blocks, flagged })
}
