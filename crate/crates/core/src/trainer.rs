//! Mini-batch training: batch assembly, the weighted objective, SGD with
//! momentum and weight decay, and per-epoch prototype refresh.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{
    evaluate, BatchLayout, BatchSnippets, Detached, ObjectiveConfig, PrototypeAccumulator,
    Prototypes, StatMetric, TermWeights,
};
use crate::data::DomainDataset;
use crate::error::{bail, Result};
use crate::model::{
    forward_batch, snippet_input, top1_accuracy, ModelDims, ModelParams, BLOCK_NAMES,
};
use crate::sampler::{
    check_target_feasible, sample_source_snippet, sample_target_snippets,
    sequential_target_snippets, EpochSamplingState, SnippetRef,
};
use crate::tensor::Tensor2;

const SAMPLING_STREAM: u64 = 1;
const OBJECTIVE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_sem: f64,
    pub lambda_stat: f64,
    pub lambda_p: f64,
    pub alpha_v: f64,
    /// Frames per snippet.
    pub m: usize,
    /// Minimum start gap between the snippets of one target video.
    pub m_hat: usize,
    /// Snippets per target video.
    pub r: usize,
    /// Prototype alignment starts after this many epochs.
    pub e_warmup: usize,
    /// `None` disables the statistical term.
    pub stat_metric: Option<StatMetric>,
    /// Source videos per batch.
    pub batch_source: usize,
    /// Target videos per batch.
    pub batch_target: usize,
    pub hidden: usize,
    pub embed: usize,
    pub seed: u64,
    pub enable_proto: bool,
    pub enable_cross: bool,
    pub enable_sn_dist: bool,
    pub enable_attention: bool,
    pub enable_ssa: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda_sem: 1.0,
            lambda_stat: 1.0,
            lambda_p: 0.6,
            alpha_v: 0.3,
            m: 8,
            m_hat: 8,
            r: 3,
            e_warmup: 5,
            stat_metric: Some(StatMetric::Mmd),
            batch_source: 12,
            batch_target: 4,
            hidden: 64,
            embed: 32,
            seed: 0,
            enable_proto: true,
            enable_cross: true,
            enable_sn_dist: true,
            enable_attention: true,
            enable_ssa: true,
        }
    }
}

impl TrainConfig {
    /// Every adaptation component off: cross-entropy on source and target
    /// snippets only, target snippets at fixed positions.
    pub fn baseline() -> Self {
        Self {
            enable_proto: false,
            enable_cross: false,
            enable_sn_dist: false,
            enable_attention: false,
            enable_ssa: false,
            stat_metric: None,
            ..Self::default()
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda_sem: self.lambda_sem,
            lambda_stat: self.lambda_stat,
            enable_proto: self.enable_proto,
            enable_cross: self.enable_cross,
            enable_sn_dist: self.enable_sn_dist,
            stat_metric: self.stat_metric,
            enable_attention: self.enable_attention,
            alpha_v: self.alpha_v,
        }
    }

    /// Checks ranges that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            bail!(Config, "learning rate must be positive, got {}", self.lr);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Config, "momentum must lie in [0, 1), got {}", self.momentum);
        }
        for (name, v) in [
            ("weight decay", self.weight_decay),
            ("lambda_sem", self.lambda_sem),
            ("lambda_stat", self.lambda_stat),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                bail!(Config, "{name} must be finite and non-negative, got {v}");
            }
        }
        if !(0.0..=1.0).contains(&self.lambda_p) {
            bail!(Config, "lambda_p must lie in [0, 1], got {}", self.lambda_p);
        }
        if self.enable_sn_dist && !(self.alpha_v.is_finite() && self.alpha_v > 0.0) {
            bail!(Config, "alpha_v must be positive, got {}", self.alpha_v);
        }
        if self.m == 0 || self.r == 0 {
            bail!(Config, "snippet length and snippets per video must be at least 1");
        }
        if self.enable_cross && self.r < 2 {
            bail!(
                Config,
                "cross-snippet consistency needs r >= 2 (got r = {}); disable it or raise r",
                self.r
            );
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            bail!(Config, "batch sizes must be at least 1");
        }
        if self.hidden == 0 || self.embed == 0 {
            bail!(Config, "hidden and embedding sizes must be at least 1");
        }
        Ok(())
    }

    /// Checks the configuration against the datasets and returns the model
    /// shape. Called before any training step.
    pub fn check_data(&self, source: &DomainDataset, target: &DomainDataset) -> Result<ModelDims> {
        self.validate()?;
        source.validate()?;
        target.validate()?;
        if source.is_empty() || target.is_empty() {
            bail!(Config, "source and target training sets must be non-empty");
        }
        if source.feature_dim != target.feature_dim || source.num_classes != target.num_classes {
            bail!(
                Config,
                "source ({} classes, {}-dim) and target ({} classes, {}-dim) disagree",
                source.num_classes,
                source.feature_dim,
                target.num_classes,
                target.feature_dim
            );
        }
        let src_min = source.min_frames().unwrap_or(0);
        if src_min < self.m {
            bail!(Config, "source video with {src_min} frames is shorter than m = {}", self.m);
        }
        let tgt_min = target.min_frames().unwrap_or(0);
        check_target_feasible(tgt_min, self.r, self.m, self.m_hat)?;
        if self.stat_metric == Some(StatMetric::Coral) {
            let (bs, bt) = self.effective_batch(source.len(), target.len());
            if bs < 2 || bt * self.r < 2 {
                bail!(Config, "CORAL needs at least two source and two target snippets per batch");
            }
        }
        Ok(ModelDims {
            snippet_len: self.m,
            frame_dim: source.feature_dim,
            hidden: self.hidden,
            embed: self.embed,
            classes: source.num_classes,
        })
    }

    fn effective_batch(&self, ns: usize, nt: usize) -> (usize, usize) {
        (self.batch_source.min(ns), self.batch_target.min(nt))
    }
}

/// Momentum buffers, one per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor2>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            velocity: params.zero_grads(),
        }
    }
}

/// `g' = g + wd·θ`, `v ← μ·v + g'`, `θ ← θ − lr·v`, block by block.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &[Tensor2],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let blocks = params.blocks_mut();
    if grads.len() != blocks.len() || state.velocity.len() != blocks.len() {
        bail!(Dimension, "expected {} gradient blocks, got {}", blocks.len(), grads.len());
    }
    for (b, (g, v)) in grads.iter().zip(&state.velocity).enumerate() {
        let name = BLOCK_NAMES.get(b).copied().unwrap_or("?");
        if !g.same_shape(&blocks[b]) || !v.same_shape(&blocks[b]) {
            bail!(Dimension, "gradient for block {name} has shape {:?}", g.shape());
        }
        if !g.is_finite() {
            bail!(NonFinite, "gradient of block {name} contains NaN or infinity");
        }
    }
    for ((theta, g), v) in blocks.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((t, &gi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let gp = gi + weight_decay * *t;
            *vi = momentum * *vi + gp;
            *t -= lr * *vi;
        }
    }
    Ok(())
}

/// Video indices of one mini-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Splits one epoch into batches: source videos in a fresh random order
/// without replacement (a trailing partial batch is dropped), target videos
/// cycled through a per-epoch shuffled order.
pub fn plan_epoch<R: Rng + ?Sized>(
    num_source: usize,
    num_target: usize,
    batch_source: usize,
    batch_target: usize,
    rng: &mut R,
) -> Result<Vec<BatchPlan>> {
    if num_source == 0 || num_target == 0 || batch_source == 0 || batch_target == 0 {
        bail!(Argument, "cannot plan an epoch over empty datasets or batches");
    }
    let bs = batch_source.min(num_source);
    let bt = batch_target.min(num_target);
    let mut src: Vec<usize> = (0..num_source).collect();
    src.shuffle(rng);
    let mut tgt: Vec<usize> = (0..num_target).collect();
    tgt.shuffle(rng);
    let batches = num_source / bs;
    Ok((0..batches)
        .map(|b| BatchPlan {
            source: src[b * bs..(b + 1) * bs].to_vec(),
            target: (0..bt).map(|i| tgt[(b * bt + i) % num_target]).collect(),
        })
        .collect())
}

/// Flattened snippet inputs of one batch, in the row order of its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledBatch {
    pub input: Tensor2,
    pub layout: BatchLayout,
    pub source_snippets: Vec<SnippetRef>,
    /// Group-major: the `r` snippets of each target video in turn.
    pub target_snippets: Vec<SnippetRef>,
}

/// Samples snippets for a batch plan and gathers their frames.
pub fn assemble_batch<R: Rng + ?Sized>(
    source: &DomainDataset,
    target: &DomainDataset,
    plan: &BatchPlan,
    config: &TrainConfig,
    state: &mut EpochSamplingState,
    rng: &mut R,
) -> Result<AssembledBatch> {
    let m = config.m;
    let mut source_snippets = Vec::with_capacity(plan.source.len());
    for &v in &plan.source {
        source_snippets.push(sample_source_snippet(v, source.videos[v].num_frames(), m, rng)?);
    }
    let mut target_snippets = Vec::with_capacity(plan.target.len() * config.r);
    for &v in &plan.target {
        let n = target.videos[v].num_frames();
        let snippets = if config.enable_ssa {
            sample_target_snippets(v, n, config.r, m, config.m_hat, state, rng)?
        } else {
            sequential_target_snippets(v, n, config.r, m, config.m_hat)?
        };
        target_snippets.extend(snippets);
    }
    let rows = source_snippets.len() + target_snippets.len();
    let dim = m * source.feature_dim;
    let mut data = Vec::with_capacity(rows * dim);
    for s in &source_snippets {
        snippet_input(&source.videos[s.video].frames, s.start, m, &mut data)?;
    }
    for s in &target_snippets {
        snippet_input(&target.videos[s.video].frames, s.start, m, &mut data)?;
    }
    let layout = BatchLayout {
        source_labels: plan.source.iter().map(|&v| source.videos[v].label).collect(),
        target_labels: plan.target.iter().map(|&v| target.videos[v].label).collect(),
        r: config.r,
    };
    Ok(AssembledBatch {
        input: Tensor2::new(rows, dim, data)?,
        layout,
        source_snippets,
        target_snippets,
    })
}

/// Epoch means of the loss terms plus test accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub l_pred: f64,
    pub l_proto: f64,
    pub l_cross: f64,
    pub l_sn_dist: f64,
    pub l_sn_stat: f64,
    pub total: f64,
    pub test_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_accuracy)
    }
}

/// RNG for one purpose of a run: independent streams keep snippet sampling
/// identical across objective variants with the same seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Initial parameters for a run.
pub fn initial_params(config: &TrainConfig, dims: ModelDims) -> Result<ModelParams> {
    ModelParams::init(dims, config.seed)
}

/// [`train_with_clock`] without timing (every `seconds` field is zero).
pub fn train(
    source: &DomainDataset,
    target_train: &DomainDataset,
    target_test: &DomainDataset,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    train_with_clock(source, target_train, target_test, config, &mut || 0.0)
}

/// Trains from seeded initial parameters. `clock` returns seconds from an
/// arbitrary origin and is only used to fill the timing fields of the log.
pub fn train_with_clock(
    source: &DomainDataset,
    target_train: &DomainDataset,
    target_test: &DomainDataset,
    config: &TrainConfig,
    clock: &mut dyn FnMut() -> f64,
) -> Result<(ModelParams, TrainLog)> {
    let dims = config.check_data(source, target_train)?;
    if target_test.feature_dim != dims.frame_dim || target_test.num_classes != dims.classes {
        bail!(Config, "target test set does not match the training data shape");
    }
    let mut params = initial_params(config, dims)?;
    let mut opt = OptimizerState::new(&params);
    let mut protos = Prototypes::new(dims.classes, dims.embed, config.lambda_p)?;
    let mut acc = PrototypeAccumulator::new(dims.classes, dims.embed);
    let mut sampling = EpochSamplingState::new();
    let mut sample_rng = stream_rng(config.seed, SAMPLING_STREAM);
    let mut objective_rng = stream_rng(config.seed, OBJECTIVE_STREAM);
    let objective = config.objective();
    let mut log = TrainLog::default();

    for epoch in 1..=config.epochs {
        let started = clock();
        let plans = plan_epoch(
            source.len(),
            target_train.len(),
            config.batch_source,
            config.batch_target,
            &mut sample_rng,
        )?;
        let proto_active = config.enable_proto && epoch > config.e_warmup && protos.is_initialized();
        let weights = TermWeights::from_config(&objective, proto_active);
        let mut sums = [0.0f64; 6];
        for (step, plan) in plans.iter().enumerate() {
            let batch = assemble_batch(source, target_train, plan, config, &mut sampling, &mut sample_rng)?;
            let fwd = forward_batch(&params, &batch.input)?;
            let snippets =
                BatchSnippets::new(batch.layout.clone(), fwd.features.clone(), fwd.probs.clone())?;
            let detached = Detached::compute(&snippets, &objective, &weights, &mut objective_rng)?;
            let report = evaluate(&params, &fwd, &batch.layout, &protos, &detached, &weights)?;
            if !report.total.is_finite() {
                bail!(
                    NonFinite,
                    "loss became {} at epoch {epoch}, step {}",
                    report.total,
                    step + 1
                );
            }
            if config.enable_proto {
                let weighted = detached.weighted_targets(&snippets)?;
                for (j, &label) in batch.layout.target_labels.iter().enumerate() {
                    for l in 0..config.r {
                        acc.add(label, weighted.row(j * config.r + l))?;
                    }
                }
            }
            sgd_step(
                &mut params,
                &report.grads,
                &mut opt,
                config.lr,
                config.momentum,
                config.weight_decay,
            )
            .map_err(|e| match e {
                crate::Error::NonFinite(msg) => crate::Error::NonFinite(alloc::format!(
                    "{msg} at epoch {epoch}, step {}",
                    step + 1
                )),
                other => other,
            })?;
            for (s, v) in sums.iter_mut().zip([
                report.l_pred,
                report.l_proto,
                report.l_cross,
                report.l_sn_dist,
                report.l_sn_stat,
                report.total,
            ]) {
                *s += v;
            }
        }
        if config.enable_proto && epoch >= config.e_warmup && acc.total() > 0 {
            let current = acc.means();
            if protos.is_initialized() {
                protos.update(&current)?;
            } else {
                protos.initialize(&current)?;
            }
        }
        acc.clear();
        sampling.reset_epoch();
        let test_accuracy = top1_accuracy(&params, target_test)?;
        let n = plans.len().max(1) as f64;
        log.epochs.push(EpochRecord {
            epoch,
            l_pred: sums[0] / n,
            l_proto: sums[1] / n,
            l_cross: sums[2] / n,
            l_sn_dist: sums[3] / n,
            l_sn_stat: sums[4] / n,
            total: sums[5] / n,
            test_accuracy,
            seconds: clock() - started,
        });
    }
    Ok((params, log))
}

/// One row of an ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

/// The four canonical rows derived from `base`: the full method, no SSA,
/// prediction loss only, and no attention.
pub fn canonical_variants(base: &TrainConfig) -> Vec<AblationVariant> {
    let variant = |name: &str, config: TrainConfig| AblationVariant {
        name: String::from(name),
        config,
    };
    let lpred_only = TrainConfig {
        enable_proto: false,
        enable_cross: false,
        enable_sn_dist: false,
        enable_attention: false,
        enable_ssa: false,
        stat_metric: None,
        ..*base
    };
    alloc::vec![
        variant("full", *base),
        variant("no-ssa", TrainConfig { enable_ssa: false, ..*base }),
        variant("lpred-only", lpred_only),
        variant("no-attention", TrainConfig { enable_attention: false, ..*base }),
    ]
}

/// Trains every variant once per seed and reports final test accuracies.
pub fn run_ablation(
    variants: &[AblationVariant],
    seeds: &[u64],
    source: &DomainDataset,
    target_train: &DomainDataset,
    target_test: &DomainDataset,
) -> Result<Vec<AblationResult>> {
    if seeds.is_empty() {
        bail!(Argument, "ablation needs at least one seed");
    }
    variants
        .iter()
        .map(|v| {
            let accuracies = seeds
                .iter()
                .map(|&seed| {
                    let config = TrainConfig { seed, ..v.config };
                    let (_, log) = train(source, target_train, target_test, &config)?;
                    Ok(log.final_accuracy().unwrap_or(0.0))
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean_accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
            Ok(AblationResult {
                name: v.name.clone(),
                seeds: seeds.to_vec(),
                accuracies,
                mean_accuracy,
            })
        })
        .collect()
}
