//! Dataset model and the synthetic cross-domain benchmark.
//!
//! A video is an `n × D` matrix of per-frame features with a class label. The
//! synthetic generator draws every class from a latent temporal pattern (a
//! class mean plus a class-specific sinusoid along a class direction) and
//! produces the target domain by rotating a fixed coordinate plane, adding a
//! global bias and extra Gaussian noise.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::math;
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFeatureVideo {
    pub id: String,
    pub label: usize,
    /// `n × D`, one row per frame in temporal order.
    pub frames: Tensor2,
}

impl FrameFeatureVideo {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub name: String,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub videos: Vec<FrameFeatureVideo>,
}

impl DomainDataset {
    /// Checks labels, feature dimension and finiteness of every video.
    pub fn validate(&self) -> Result<()> {
        for v in &self.videos {
            if v.label >= self.num_classes {
                bail!(
                    Argument,
                    "video '{}' has label {} but the dataset has {} classes",
                    v.id,
                    v.label,
                    self.num_classes
                );
            }
            if v.feature_dim() != self.feature_dim {
                bail!(
                    Dimension,
                    "video '{}' has feature dimension {}, dataset declares {}",
                    v.id,
                    v.feature_dim(),
                    self.feature_dim
                );
            }
            if !v.frames.is_finite() {
                bail!(NonFinite, "video '{}' contains non-finite features", v.id);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn min_frames(&self) -> Option<usize> {
        self.videos.iter().map(FrameFeatureVideo::num_frames).min()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = alloc::vec![0; self.num_classes];
        for v in &self.videos {
            counts[v.label] += 1;
        }
        counts
    }
}

/// Target-domain transformation applied by the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Rotation angle (radians) in the plane of feature coordinates 0 and 1.
    pub rotation_angle: f64,
    /// Norm of the global offset added to every target frame.
    pub bias_scale: f64,
    /// Standard deviation of the extra per-frame Gaussian noise on targets.
    pub noise_std: f64,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn none(seed: u64) -> Self {
        Self {
            rotation_angle: 0.0,
            bias_scale: 0.0,
            noise_std: 0.0,
            seed,
        }
    }
}

/// Shape of a generated benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Total number of source videos, assigned to classes round-robin.
    pub n_source: usize,
    /// Labelled target training videos per class.
    pub k_shot: usize,
    /// Total number of target test videos, assigned round-robin.
    pub n_test: usize,
    pub frames_per_video: usize,
    pub shift: ShiftSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    pub source: DomainDataset,
    pub target_train: DomainDataset,
    pub target_test: DomainDataset,
}

// Latent pattern constants.
const CLASS_MEAN_SCALE: f64 = 0.4;
const TEMPORAL_AMPLITUDE: f64 = 1.0;
const VIDEO_OFFSET_STD: f64 = 0.35;
const FRAME_NOISE_STD: f64 = 1.3;

/// Frames per generated video unless a caller chooses otherwise.
pub const DEFAULT_FRAMES_PER_VIDEO: usize = 48;
/// Target bias norm unless a caller chooses otherwise.
pub const DEFAULT_BIAS_SCALE: f64 = 2.0;

struct ClassPattern {
    mean: Vec<f64>,
    direction: Vec<f64>,
    cycles: f64,
    phase: f64,
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v = normal_vec(rng, dim, 1.0);
    let norm = math::sqrt(v.iter().map(|x| x * x).sum());
    v.into_iter().map(|x| x / norm).collect()
}

impl ClassPattern {
    fn draw(rng: &mut ChaCha8Rng, class: usize, dim: usize) -> Self {
        Self {
            mean: normal_vec(rng, dim, CLASS_MEAN_SCALE),
            direction: unit_vec(rng, dim),
            cycles: 1.0 + (class % 3) as f64,
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }
}

struct TargetShift {
    cos: f64,
    sin: f64,
    bias: Vec<f64>,
    noise_std: f64,
}

impl TargetShift {
    fn apply(&self, frame: &mut [f64], rng: &mut ChaCha8Rng) {
        let (x, y) = (frame[0], frame[1]);
        frame[0] = self.cos * x - self.sin * y;
        frame[1] = self.sin * x + self.cos * y;
        for (v, b) in frame.iter_mut().zip(&self.bias) {
            *v += b;
        }
        if self.noise_std > 0.0 {
            for v in frame.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += self.noise_std * z;
            }
        }
    }
}

fn draw_video(
    rng: &mut ChaCha8Rng,
    id: String,
    label: usize,
    pattern: &ClassPattern,
    frames: usize,
    shift: Option<&TargetShift>,
) -> Result<FrameFeatureVideo> {
    let dim = pattern.mean.len();
    let offset = normal_vec(rng, dim, VIDEO_OFFSET_STD);
    let jitter = rng.random_range(-0.5..0.5);
    let mut data = Vec::with_capacity(frames * dim);
    let mut frame = alloc::vec![0.0; dim];
    for t in 0..frames {
        let wave = TEMPORAL_AMPLITUDE
            * math::sin(2.0 * PI * pattern.cycles * t as f64 / frames as f64 + pattern.phase + jitter);
        for (c, v) in frame.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            *v = pattern.mean[c] + offset[c] + wave * pattern.direction[c] + FRAME_NOISE_STD * z;
        }
        if let Some(s) = shift {
            s.apply(&mut frame, rng);
        }
        // Values are kept exactly representable in f32 so that the on-disk
        // format round-trips bit for bit.
        data.extend(frame.iter().map(|&v| v as f32 as f64));
    }
    Ok(FrameFeatureVideo {
        id,
        label,
        frames: Tensor2::new(frames, dim, data)?,
    })
}

/// Generates `(source, target_train, target_test)`; a pure function of `spec`.
pub fn generate_synthetic_benchmark(spec: &SyntheticSpec) -> Result<SyntheticBenchmark> {
    let SyntheticSpec {
        num_classes,
        feature_dim,
        n_source,
        k_shot,
        n_test,
        frames_per_video,
        shift,
    } = *spec;
    if num_classes == 0 || feature_dim < 2 {
        bail!(
            Argument,
            "need at least one class and two feature dimensions (got C={num_classes}, D={feature_dim})"
        );
    }
    if k_shot == 0 {
        bail!(Argument, "k_shot must be at least 1");
    }
    if n_source == 0 || n_test == 0 || frames_per_video == 0 {
        bail!(Argument, "video and frame counts must be positive");
    }
    if !(shift.noise_std >= 0.0) || !shift.rotation_angle.is_finite() || !shift.bias_scale.is_finite() {
        bail!(Argument, "invalid shift parameters {shift:?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(shift.seed);
    let patterns: Vec<ClassPattern> = (0..num_classes)
        .map(|c| ClassPattern::draw(&mut rng, c, feature_dim))
        .collect();
    let bias_dir = unit_vec(&mut rng, feature_dim);
    let target_shift = TargetShift {
        cos: math::cos(shift.rotation_angle),
        sin: math::sin(shift.rotation_angle),
        bias: bias_dir.iter().map(|b| b * shift.bias_scale).collect(),
        noise_std: shift.noise_std,
    };

    let mut source = Vec::with_capacity(n_source);
    for i in 0..n_source {
        let label = i % num_classes;
        source.push(draw_video(
            &mut rng,
            format!("src-{i:05}"),
            label,
            &patterns[label],
            frames_per_video,
            None,
        )?);
    }
    let mut target_train = Vec::with_capacity(k_shot * num_classes);
    for i in 0..k_shot * num_classes {
        let label = i % num_classes;
        target_train.push(draw_video(
            &mut rng,
            format!("tgt-train-{i:05}"),
            label,
            &patterns[label],
            frames_per_video,
            Some(&target_shift),
        )?);
    }
    let mut target_test = Vec::with_capacity(n_test);
    for i in 0..n_test {
        let label = i % num_classes;
        target_test.push(draw_video(
            &mut rng,
            format!("tgt-test-{i:05}"),
            label,
            &patterns[label],
            frames_per_video,
            Some(&target_shift),
        )?);
    }

    let dataset = |name: &str, videos| DomainDataset {
        name: name.into(),
        num_classes,
        feature_dim,
        videos,
    };
    Ok(SyntheticBenchmark {
        source: dataset("source", source),
        target_train: dataset("target_train", target_train),
        target_test: dataset("target_test", target_test),
    })
}
