//! Weighted combination of all alignment terms and its parameter gradients.
//!
//! Everything the objective treats as a constant (attention weights, key
//! snippets and their predictions, interpolation pairs and targets, the MMD
//! bandwidth) is drawn once into a [`Detached`] value. [`evaluate`] is then a
//! deterministic function of the parameters, so its gradients can be checked
//! against finite differences.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    apply_attention, attention_weights, draw_ict_plan, median_bandwidth, prediction_loss,
    prototype_alignment_loss, snippet_distribution_loss_with, statistical_loss,
    AttentionWeights, BatchLayout, BatchSnippets, CrossTeachers, IctPlan, Prototypes, StatMetric,
};
use crate::error::{bail, Result};
use crate::model::{backward_batch, forward_batch, BatchForward, ModelParams, BC, WC};
use crate::tensor::Tensor2;

/// Which alignment terms are active and how they are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda_sem: f64,
    pub lambda_stat: f64,
    pub enable_proto: bool,
    pub enable_cross: bool,
    pub enable_sn_dist: bool,
    /// `None` disables the statistical term.
    pub stat_metric: Option<StatMetric>,
    pub enable_attention: bool,
    pub alpha_v: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_sem: 1.0,
            lambda_stat: 1.0,
            enable_proto: true,
            enable_cross: true,
            enable_sn_dist: true,
            stat_metric: Some(StatMetric::Mmd),
            enable_attention: true,
            alpha_v: 0.3,
        }
    }
}

impl ObjectiveConfig {
    /// Prediction loss only, no attention.
    pub fn prediction_only() -> Self {
        Self {
            enable_proto: false,
            enable_cross: false,
            enable_sn_dist: false,
            stat_metric: None,
            enable_attention: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Pred,
    Proto,
    Cross,
    SnDist,
    SnStat,
}

/// Coefficient of each term in the total. A zero coefficient skips the term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub pred: f64,
    pub proto: f64,
    pub cross: f64,
    pub sn_dist: f64,
    pub sn_stat: f64,
}

impl TermWeights {
    /// Weights of the full objective; the prototype term only counts when
    /// `proto_active` (prototypes exist and warm-up is over).
    pub fn from_config(cfg: &ObjectiveConfig, proto_active: bool) -> Self {
        let on = |flag: bool, w: f64| if flag { w } else { 0.0 };
        Self {
            pred: 1.0,
            proto: on(cfg.enable_proto && proto_active, cfg.lambda_sem),
            cross: on(cfg.enable_cross, cfg.lambda_sem),
            sn_dist: on(cfg.enable_sn_dist, cfg.lambda_sem),
            sn_stat: on(cfg.stat_metric.is_some(), cfg.lambda_stat),
        }
    }

    /// Unit weight on a single term.
    pub fn only(term: Term) -> Self {
        let mut w = Self {
            pred: 0.0,
            proto: 0.0,
            cross: 0.0,
            sn_dist: 0.0,
            sn_stat: 0.0,
        };
        *w.get_mut(term) = 1.0;
        w
    }

    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Pred => self.pred,
            Term::Proto => self.proto,
            Term::Cross => self.cross,
            Term::SnDist => self.sn_dist,
            Term::SnStat => self.sn_stat,
        }
    }

    fn get_mut(&mut self, term: Term) -> &mut f64 {
        match term {
            Term::Pred => &mut self.pred,
            Term::Proto => &mut self.proto,
            Term::Cross => &mut self.cross,
            Term::SnDist => &mut self.sn_dist,
            Term::SnStat => &mut self.sn_stat,
        }
    }
}

/// Quantities held constant during differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct Detached {
    pub attention: AttentionWeights,
    pub teachers: Option<CrossTeachers>,
    pub ict: Option<IctPlan>,
    pub stat_metric: Option<StatMetric>,
    pub bandwidth: Option<f64>,
}

impl Detached {
    /// Draws every constant the active terms need from the current batch.
    pub fn compute<R: Rng + ?Sized>(
        batch: &BatchSnippets,
        cfg: &ObjectiveConfig,
        weights: &TermWeights,
        rng: &mut R,
    ) -> Result<Self> {
        let layout = &batch.layout;
        let attention = if cfg.enable_attention {
            attention_weights(batch)?
        } else {
            AttentionWeights::uniform(layout.num_groups(), layout.r)
        };
        let teachers = (weights.cross != 0.0).then(|| CrossTeachers::select(batch));
        let ict = if weights.sn_dist != 0.0 {
            Some(draw_ict_plan(batch, cfg.alpha_v, rng)?)
        } else {
            None
        };
        let stat_metric = if weights.sn_stat != 0.0 {
            match cfg.stat_metric {
                Some(m) => Some(m),
                None => bail!(Config, "statistical term weighted but no metric selected"),
            }
        } else {
            None
        };
        let bandwidth = match stat_metric {
            Some(StatMetric::Mmd) => {
                let weighted = apply_attention(&batch.target_features(), &attention)?;
                Some(median_bandwidth(&batch.source_features(), &weighted))
            }
            _ => None,
        };
        Ok(Self {
            attention,
            teachers,
            ict,
            stat_metric,
            bandwidth,
        })
    }

    /// Attention-weighted target features `f'` of a batch.
    pub fn weighted_targets(&self, batch: &BatchSnippets) -> Result<Tensor2> {
        apply_attention(&batch.target_features(), &self.attention)
    }
}

/// Term values (unweighted), their weighted total, and one gradient per
/// parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_pred: f64,
    pub l_proto: f64,
    pub l_cross: f64,
    pub l_sn_dist: f64,
    pub l_sn_stat: f64,
    pub total: f64,
    #[serde(skip)]
    pub grads: Vec<Tensor2>,
}

impl LossReport {
    pub fn value(&self, term: Term) -> f64 {
        match term {
            Term::Pred => self.l_pred,
            Term::Proto => self.l_proto,
            Term::Cross => self.l_cross,
            Term::SnDist => self.l_sn_dist,
            Term::SnStat => self.l_sn_stat,
        }
    }
}

/// Scales the target rows of `d_weighted` by the attention weights, giving
/// the gradient on the unweighted features.
fn through_attention(d_weighted: &mut Tensor2, ns: usize, attention: &AttentionWeights) {
    for (i, &w) in attention.normalized.iter().enumerate() {
        for v in d_weighted.row_mut(ns + i) {
            *v *= w;
        }
    }
}

/// Evaluates the weighted objective on a forward pass with all stochastic
/// and detached quantities fixed by `detached`.
pub fn evaluate(
    params: &ModelParams,
    fwd: &BatchForward,
    layout: &BatchLayout,
    protos: &Prototypes,
    detached: &Detached,
    weights: &TermWeights,
) -> Result<LossReport> {
    let batch = BatchSnippets::new(layout.clone(), fwd.features.clone(), fwd.probs.clone())?;
    let ns = layout.num_source();
    if detached.attention.normalized.len() != layout.num_target() {
        bail!(Dimension, "attention weights do not match the batch");
    }
    let mut d_features = Tensor2::zeros(batch.features.rows(), batch.features.cols());
    let mut d_logits = Tensor2::zeros(batch.probs.rows(), batch.probs.cols());
    let mut d_classifier: Option<(Tensor2, Tensor2)> = None;
    let mut report = LossReport {
        l_pred: 0.0,
        l_proto: 0.0,
        l_cross: 0.0,
        l_sn_dist: 0.0,
        l_sn_stat: 0.0,
        total: 0.0,
        grads: Vec::new(),
    };

    if weights.pred != 0.0 {
        let out = prediction_loss(&batch)?;
        report.l_pred = out.value;
        d_logits.add_scaled(&out.d_logits, weights.pred)?;
    }
    if weights.proto != 0.0 {
        let out = prototype_alignment_loss(&batch, protos)?;
        report.l_proto = out.value;
        d_features.add_scaled(&out.d_features, weights.proto)?;
    }
    if weights.cross != 0.0 {
        let Some(teachers) = &detached.teachers else {
            bail!(Sequencing, "cross-snippet term requested without key snippets");
        };
        let out = super::cross_snippet_loss_with(&batch, teachers)?;
        report.l_cross = out.value;
        d_logits.add_scaled(&out.d_logits, weights.cross)?;
    }
    let needs_weighted = weights.sn_dist != 0.0 || weights.sn_stat != 0.0;
    let weighted = if needs_weighted {
        Some(batch.with_target_features(&detached.weighted_targets(&batch)?)?)
    } else {
        None
    };
    if let (true, Some(wb)) = (weights.sn_dist != 0.0, &weighted) {
        let Some(plan) = &detached.ict else {
            bail!(Sequencing, "interpolation term requested without a pair plan");
        };
        let mut out = snippet_distribution_loss_with(wb, plan, params)?;
        report.l_sn_dist = out.value;
        through_attention(&mut out.d_features, ns, &detached.attention);
        d_features.add_scaled(&out.d_features, weights.sn_dist)?;
        if let Some((mut dw, mut db)) = out.d_classifier {
            dw.scale(weights.sn_dist);
            db.scale(weights.sn_dist);
            d_classifier = Some((dw, db));
        }
    }
    if let (true, Some(wb)) = (weights.sn_stat != 0.0, &weighted) {
        let Some(metric) = detached.stat_metric else {
            bail!(Sequencing, "statistical term requested without a metric");
        };
        let out = statistical_loss(
            &wb.source_features(),
            &wb.target_features(),
            metric,
            detached.bandwidth,
        )?;
        report.l_sn_stat = out.value;
        for i in 0..ns {
            for (o, g) in d_features.row_mut(i).iter_mut().zip(out.d_source.row(i)) {
                *o += weights.sn_stat * g;
            }
        }
        for (i, &w) in detached.attention.normalized.iter().enumerate() {
            for (o, g) in d_features.row_mut(ns + i).iter_mut().zip(out.d_target.row(i)) {
                *o += weights.sn_stat * w * g;
            }
        }
    }

    report.total = weights.pred * report.l_pred
        + weights.proto * report.l_proto
        + weights.cross * report.l_cross
        + weights.sn_dist * report.l_sn_dist
        + weights.sn_stat * report.l_sn_stat;
    let mut grads = backward_batch(params, fwd, &d_features, &d_logits)?;
    if let Some((dw, db)) = d_classifier {
        grads[WC].add_scaled(&dw, 1.0)?;
        grads[BC].add_scaled(&db, 1.0)?;
    }
    report.grads = grads;
    Ok(report)
}

/// Forward pass, constant draws and evaluation in one call.
pub fn total_loss<R: Rng + ?Sized>(
    params: &ModelParams,
    input: &Tensor2,
    layout: &BatchLayout,
    protos: &Prototypes,
    cfg: &ObjectiveConfig,
    proto_active: bool,
    rng: &mut R,
) -> Result<LossReport> {
    let fwd = forward_batch(params, input)?;
    let batch = BatchSnippets::new(layout.clone(), fwd.features.clone(), fwd.probs.clone())?;
    let weights = TermWeights::from_config(cfg, proto_active && protos.is_initialized());
    let detached = Detached::compute(&batch, cfg, &weights, rng)?;
    evaluate(params, &fwd, layout, protos, &detached, &weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{compute_prototypes, cross_snippet_loss_with};
    use crate::diffkernel::{check_gradients, DualValue};
    use crate::model::ModelDims;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    struct Toy {
        params: ModelParams,
        input: Tensor2,
        layout: BatchLayout,
    }

    fn toy(seed: u64) -> Toy {
        let dims = ModelDims {
            snippet_len: 2,
            frame_dim: 3,
            hidden: 6,
            embed: 4,
            classes: 3,
        };
        let params = ModelParams::init(dims, seed).unwrap();
        let layout = BatchLayout {
            source_labels: vec![0, 1, 2],
            target_labels: vec![1, 0],
            r: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let data = (0..layout.len() * dims.input_dim())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let input = Tensor2::new(layout.len(), dims.input_dim(), data).unwrap();
        Toy {
            params,
            input,
            layout,
        }
    }

    fn protos_for(t: &Toy) -> Prototypes {
        let fwd = forward_batch(&t.params, &t.input).unwrap();
        let labels: Vec<usize> = (0..t.layout.len()).map(|i| t.layout.label(i)).collect();
        let mut means = compute_prototypes(&fwd.features, &labels, 3).unwrap();
        // shift so source features are never exactly at a prototype
        means.means.scale(0.5);
        let mut p = Prototypes::new(3, 4, 0.6).unwrap();
        p.initialize(&means).unwrap();
        p
    }

    #[test]
    fn zero_lambdas_reduce_to_prediction_loss() {
        let t = toy(3);
        let protos = protos_for(&t);
        let cfg = ObjectiveConfig {
            lambda_sem: 0.0,
            lambda_stat: 0.0,
            ..ObjectiveConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = total_loss(&t.params, &t.input, &t.layout, &protos, &cfg, true, &mut rng).unwrap();
        let base = total_loss(
            &t.params,
            &t.input,
            &t.layout,
            &protos,
            &ObjectiveConfig::prediction_only(),
            true,
            &mut rng,
        )
        .unwrap();
        assert_eq!(full.total, full.l_pred);
        assert_eq!(full.grads, base.grads);
    }

    #[test]
    fn warmup_gates_prototype_term() {
        let t = toy(4);
        let protos = protos_for(&t);
        let cfg = ObjectiveConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = total_loss(&t.params, &t.input, &t.layout, &protos, &cfg, false, &mut rng).unwrap();
        assert_eq!(r.l_proto, 0.0);
        let expected = r.l_pred + r.l_cross + r.l_sn_dist + r.l_sn_stat;
        assert!((r.total - expected).abs() < 1e-12);
    }

    #[test]
    fn total_is_sum_of_components() {
        let t = toy(5);
        let protos = protos_for(&t);
        let cfg = ObjectiveConfig {
            lambda_sem: 0.7,
            lambda_stat: 1.3,
            ..ObjectiveConfig::default()
        };
        let fwd = forward_batch(&t.params, &t.input).unwrap();
        let batch = BatchSnippets::new(t.layout.clone(), fwd.features.clone(), fwd.probs.clone()).unwrap();
        let weights = TermWeights::from_config(&cfg, true);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let det = Detached::compute(&batch, &cfg, &weights, &mut rng).unwrap();
        let all = evaluate(&t.params, &fwd, &t.layout, &protos, &det, &weights).unwrap();
        let mut sum_grads = t.params.zero_grads();
        let mut sum = 0.0;
        for term in [Term::Pred, Term::Proto, Term::Cross, Term::SnDist, Term::SnStat] {
            let one = evaluate(&t.params, &fwd, &t.layout, &protos, &det, &TermWeights::only(term)).unwrap();
            sum += weights.get(term) * one.value(term);
            for (s, g) in sum_grads.iter_mut().zip(&one.grads) {
                s.add_scaled(g, weights.get(term)).unwrap();
            }
            assert_eq!(one.value(term), all.value(term));
        }
        assert!((all.total - sum).abs() < 1e-12);
        for (a, b) in all.grads.iter().zip(&sum_grads) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        // cross term oracle on the selected keys
        let direct = cross_snippet_loss_with(&batch, det.teachers.as_ref().unwrap()).unwrap();
        assert_eq!(direct.value, all.l_cross);
    }

    #[test]
    fn every_term_matches_finite_differences() {
        for seed in 0..3 {
            let t = toy(20 + seed);
            let protos = protos_for(&t);
            for metric in [StatMetric::Mmd, StatMetric::Coral] {
                let cfg = ObjectiveConfig {
                    stat_metric: Some(metric),
                    ..ObjectiveConfig::default()
                };
                let fwd = forward_batch(&t.params, &t.input).unwrap();
                let batch =
                    BatchSnippets::new(t.layout.clone(), fwd.features.clone(), fwd.probs.clone()).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let full = TermWeights::from_config(&cfg, true);
                let det = Detached::compute(&batch, &cfg, &full, &mut rng).unwrap();
                let mut cases: Vec<TermWeights> = [Term::Pred, Term::Proto, Term::Cross, Term::SnDist, Term::SnStat]
                    .into_iter()
                    .map(TermWeights::only)
                    .collect();
                cases.push(full);
                for w in cases {
                    let report = check_gradients(
                        |blocks| {
                            let p = ModelParams::from_blocks(t.params.dims(), blocks.to_vec())?;
                            let fwd = forward_batch(&p, &t.input)?;
                            let r = evaluate(&p, &fwd, &t.layout, &protos, &det, &w)?;
                            Ok(DualValue {
                                value: r.total,
                                grads: r.grads,
                            })
                        },
                        t.params.blocks(),
                        1e-6,
                        1e-4,
                    )
                    .unwrap();
                    assert!(report.passed(), "seed {seed} {metric} {w:?}: {:?}", report.flagged);
                }
            }
        }
    }
}
