//! Snippet encoder and shared classifier.
//!
//! The encoder flattens the `m` frames of a snippet in temporal order into a
//! single `m·D` vector and applies a two-layer perceptron
//! (`relu(x·W₁ + b₁)·W₂ + b₂`) to produce the snippet feature. The classifier
//! is one affine layer followed by softmax. One parameter set serves both
//! domains.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, FrameFeatureVideo};
use crate::diffkernel::{self, affine, affine_backward, relu, relu_backward, softmax};
use crate::error::{bail, Result};
use crate::math;
use crate::tensor::Tensor2;

/// Layer sizes of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Frames per snippet.
    pub snippet_len: usize,
    /// Per-frame feature dimension `D`.
    pub frame_dim: usize,
    pub hidden: usize,
    /// Snippet feature dimension `d`.
    pub embed: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn input_dim(&self) -> usize {
        self.snippet_len * self.frame_dim
    }

    /// Shapes of the parameter blocks in declaration order.
    pub fn block_shapes(&self) -> [(usize, usize); 6] {
        [
            (self.input_dim(), self.hidden),
            (1, self.hidden),
            (self.hidden, self.embed),
            (1, self.embed),
            (self.embed, self.classes),
            (1, self.classes),
        ]
    }
}

/// Parameter block indices, in declaration (and checkpoint) order.
pub const W1: usize = 0;
pub const B1: usize = 1;
pub const W2: usize = 2;
pub const B2: usize = 3;
pub const WC: usize = 4;
pub const BC: usize = 5;
pub const NUM_BLOCKS: usize = 6;
pub const BLOCK_NAMES: [&str; NUM_BLOCKS] = [
    "encoder.w1",
    "encoder.b1",
    "encoder.w2",
    "encoder.b2",
    "classifier.w",
    "classifier.b",
];

/// Trainable state: encoder layers then classifier, in [`BLOCK_NAMES`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    dims: ModelDims,
    blocks: Vec<Tensor2>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        if dims.snippet_len == 0
            || dims.frame_dim == 0
            || dims.hidden == 0
            || dims.embed == 0
            || dims.classes == 0
        {
            bail!(Argument, "model dimensions must be positive: {dims:?}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = dims
            .block_shapes()
            .iter()
            .map(|&(rows, cols)| {
                if rows == 1 {
                    Tensor2::zeros(rows, cols)
                } else {
                    let bound = xavier_bound(rows, cols);
                    let data = (0..rows * cols)
                        .map(|_| rng.random_range(-bound..=bound))
                        .collect();
                    Tensor2::new(rows, cols, data).expect("finite init")
                }
            })
            .collect();
        Ok(Self { dims, blocks })
    }

    pub fn from_blocks(dims: ModelDims, blocks: Vec<Tensor2>) -> Result<Self> {
        if blocks.len() != NUM_BLOCKS {
            bail!(Dimension, "expected {NUM_BLOCKS} parameter blocks, got {}", blocks.len());
        }
        for ((i, b), shape) in blocks.iter().enumerate().zip(dims.block_shapes()) {
            if b.shape() != shape {
                bail!(
                    Dimension,
                    "block {} has shape {:?}, expected {:?}",
                    BLOCK_NAMES[i],
                    b.shape(),
                    shape
                );
            }
            if !b.is_finite() {
                bail!(NonFinite, "block {} is not finite", BLOCK_NAMES[i]);
            }
        }
        Ok(Self { dims, blocks })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn blocks(&self) -> &[Tensor2] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Tensor2] {
        &mut self.blocks
    }

    pub fn block(&self, i: usize) -> &Tensor2 {
        &self.blocks[i]
    }

    /// Zero tensors shaped like each block.
    pub fn zero_grads(&self) -> Vec<Tensor2> {
        self.blocks
            .iter()
            .map(|b| Tensor2::zeros(b.rows(), b.cols()))
            .collect()
    }
}

/// `√(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    math::sqrt(6.0 / (fan_in + fan_out) as f64)
}

/// Encoding of a single snippet.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetFeature {
    pub feature: Tensor2,
    pub logits: Tensor2,
    pub prediction: Vec<f64>,
}

/// Cached activations of a batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub input: Tensor2,
    pub pre_hidden: Tensor2,
    pub hidden: Tensor2,
    pub features: Tensor2,
    pub logits: Tensor2,
    pub probs: Tensor2,
}

/// Flattens frames `start..start + m` of a video in temporal order.
pub fn snippet_input(frames: &Tensor2, start: usize, m: usize, out: &mut Vec<f64>) -> Result<()> {
    if start + m > frames.rows() {
        bail!(
            Dimension,
            "snippet [{start}, {}) exceeds {} frames",
            start + m,
            frames.rows()
        );
    }
    for t in start..start + m {
        out.extend_from_slice(frames.row(t));
    }
    Ok(())
}

/// Applies the encoder and classifier to a batch of flattened snippets.
pub fn forward_batch(params: &ModelParams, input: &Tensor2) -> Result<BatchForward> {
    if input.cols() != params.dims.input_dim() {
        bail!(
            Dimension,
            "encoder expects {} inputs per snippet, got {}",
            params.dims.input_dim(),
            input.cols()
        );
    }
    let b = &params.blocks;
    let pre_hidden = affine(input, &b[W1], &b[B1])?;
    let hidden = relu(&pre_hidden);
    let features = affine(&hidden, &b[W2], &b[B2])?;
    let logits = affine(&features, &b[WC], &b[BC])?;
    let probs = softmax(&logits);
    Ok(BatchForward {
        input: input.clone(),
        pre_hidden,
        hidden,
        features,
        logits,
        probs,
    })
}

/// Backpropagates upstream gradients on the features and logits of a batch
/// into per-block parameter gradients.
pub fn backward_batch(
    params: &ModelParams,
    fwd: &BatchForward,
    d_features: &Tensor2,
    d_logits: &Tensor2,
) -> Result<Vec<Tensor2>> {
    let b = &params.blocks;
    let cls = affine_backward(&fwd.features, &b[WC], d_logits)?;
    let mut d_feat = cls.input;
    d_feat.add_scaled(d_features, 1.0)?;
    let enc2 = affine_backward(&fwd.hidden, &b[W2], &d_feat)?;
    let d_pre = relu_backward(&fwd.pre_hidden, &enc2.input)?;
    let enc1 = affine_backward(&fwd.input, &b[W1], &d_pre)?;
    Ok(alloc::vec![
        enc1.weight,
        enc1.bias,
        enc2.weight,
        enc2.bias,
        cls.weight,
        cls.bias
    ])
}

/// Classifier logits for arbitrary feature rows.
pub fn classifier_logits(params: &ModelParams, features: &Tensor2) -> Result<Tensor2> {
    affine(features, &params.blocks[WC], &params.blocks[BC])
}

/// Encodes one snippet given as an `m × D` frame matrix.
pub fn encode_snippet(params: &ModelParams, frames: &Tensor2) -> Result<SnippetFeature> {
    let dims = params.dims;
    if frames.shape() != (dims.snippet_len, dims.frame_dim) {
        bail!(
            Dimension,
            "snippet must be {}x{}, got {:?}",
            dims.snippet_len,
            dims.frame_dim,
            frames.shape()
        );
    }
    let input = Tensor2::new(1, dims.input_dim(), frames.data().to_vec())?;
    let fwd = forward_batch(params, &input)?;
    Ok(SnippetFeature {
        feature: fwd.features,
        logits: fwd.logits,
        prediction: fwd.probs.row(0).to_vec(),
    })
}

/// Frame indices `⌊i·n/m⌋` for `i ∈ [0, m)`, spread over the whole video.
pub fn uniform_frame_indices(n: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 || n < m {
        bail!(Argument, "cannot sample {m} frames from a {n}-frame video");
    }
    Ok((0..m).map(|i| i * n / m).collect())
}

/// Test-time prediction from `m` uniformly spaced frames.
pub fn predict_video(params: &ModelParams, video: &FrameFeatureVideo) -> Result<Vec<f64>> {
    let m = params.dims.snippet_len;
    let indices = uniform_frame_indices(video.num_frames(), m).map_err(|_| {
        crate::Error::Argument(alloc::format!(
            "video '{}' has {} frames, fewer than the snippet length {m}",
            video.id,
            video.num_frames()
        ))
    })?;
    let clip = video.frames.select_rows(&indices);
    Ok(encode_snippet(params, &clip)?.prediction)
}

/// Fraction of videos whose argmax prediction equals the label.
pub fn top1_accuracy(params: &ModelParams, dataset: &DomainDataset) -> Result<f64> {
    if dataset.is_empty() {
        bail!(Argument, "cannot evaluate accuracy on an empty dataset '{}'", dataset.name);
    }
    let m = params.dims.snippet_len;
    let mut input = Vec::with_capacity(dataset.len() * params.dims.input_dim());
    for video in &dataset.videos {
        let indices = uniform_frame_indices(video.num_frames(), m)?;
        for i in indices {
            input.extend_from_slice(video.frames.row(i));
        }
    }
    let input = Tensor2::new(dataset.len(), params.dims.input_dim(), input)?;
    let fwd = forward_batch(params, &input)?;
    let correct = dataset
        .videos
        .iter()
        .zip(fwd.probs.iter_rows())
        .filter(|(v, p)| diffkernel::argmax(p) == v.label)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}
