//! Deterministic mini-batch training and toy hallucination metrics.
//!
//! The reference policy is fixed for the whole run and the trainable policy
//! starts from it. Each epoch visits the training split in a permutation drawn
//! from `stream_rng(shuffle_seed, epoch)`; the final batch of an epoch may be
//! short. Loss and gradient for a batch are batch means.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use log::debug;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{preferred_response, Dataset};
use crate::digest::config_hash;
use crate::domain::{HyperParams, SymmetricSample};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::objectives::{bt_probability, weighted_loss, Component, LossValue, LossWeights};
use crate::partition::{GroundTruthReward, Reward};
use crate::policy::{argmax_response, evaluate, FeatureMap, PolicyLayout, PolicyParams};
use crate::rng::stream_rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Dpo,
    /// `dpo_m + vco`.
    Vco,
    /// `dpo_m + vco_star`.
    VcoStar,
    #[default]
    Symmpo,
    SymmpoWoPair,
    SymmpoWoMargin,
    SymmpoWoAncpo,
}

impl Objective {
    pub const ALL: [Objective; 7] = [
        Objective::Dpo,
        Objective::Vco,
        Objective::VcoStar,
        Objective::Symmpo,
        Objective::SymmpoWoPair,
        Objective::SymmpoWoMargin,
        Objective::SymmpoWoAncpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Dpo => "dpo",
            Objective::Vco => "vco",
            Objective::VcoStar => "vco_star",
            Objective::Symmpo => "symmpo",
            Objective::SymmpoWoPair => "symmpo_wo_pair",
            Objective::SymmpoWoMargin => "symmpo_wo_margin",
            Objective::SymmpoWoAncpo => "symmpo_wo_ancpo",
        }
    }

    /// The symmpo variant with one regularizer removed.
    pub fn ablating(component: Component) -> Result<Self> {
        match component {
            Component::Pair => Ok(Objective::SymmpoWoPair),
            Component::Margin => Ok(Objective::SymmpoWoMargin),
            Component::Ancpo => Ok(Objective::SymmpoWoAncpo),
            other => Err(Error::Usage(format!(
                "cannot ablate '{}'; choose pair, margin or ancpo",
                other.name()
            ))),
        }
    }

    pub fn weights(self, hp: &HyperParams) -> LossWeights {
        let mut w = match self {
            Objective::Dpo => LossWeights::only(Component::DpoM),
            Objective::Vco => LossWeights {
                vco: 1.0,
                ..LossWeights::only(Component::DpoM)
            },
            Objective::VcoStar => LossWeights {
                vco_star: 1.0,
                ..LossWeights::only(Component::DpoM)
            },
            _ => LossWeights::symmpo(hp),
        };
        match self {
            Objective::SymmpoWoPair => w.pair = 0.0,
            Objective::SymmpoWoMargin => w.margin = 0.0,
            Objective::SymmpoWoAncpo => w.ancpo = 0.0,
            _ => {}
        }
        w
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub hyper: HyperParams,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub shuffle_seed: u64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Scale of the ground-truth reward inside the vco_star partition function.
    pub reward_scale: f64,
    pub feature_map: FeatureMap,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Symmpo,
            hyper: HyperParams::toy(),
            optimizer: OptimizerKind::Sgd,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            shuffle_seed: 0,
            eval_every: 0,
            reward_scale: 1.0,
            feature_map: FeatureMap::default(),
        }
    }
}

/// The part of a [`TrainConfig`] that influences results. Components with
/// zero weight and the knobs only they read are dropped, so configurations
/// that train identically hash identically.
#[derive(Serialize)]
struct CanonicalTrain {
    weights: Vec<(Component, f64)>,
    beta: f64,
    delta: Option<f64>,
    margin_uses_beta: Option<bool>,
    reward_scale: Option<f64>,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    adam: Option<(f64, f64, f64)>,
    shuffle_seed: u64,
    eval_every: usize,
    feature_map: FeatureMap,
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        self.objective.weights(&self.hyper)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.optimizer == OptimizerKind::Adam {
            let ok = (0.0..1.0).contains(&self.adam_beta1)
                && (0.0..1.0).contains(&self.adam_beta2)
                && self.adam_eps > 0.0
                && self.adam_eps.is_finite();
            if !ok {
                return Err(Error::Config(
                    "adam betas must lie in [0, 1) and eps must be positive".into(),
                ));
            }
        }
        GroundTruthReward::new(self.reward_scale)?;
        Ok(())
    }

    pub fn canonical_hash(&self) -> String {
        let w = self.weights();
        let hp = &self.hyper;
        config_hash(&CanonicalTrain {
            weights: w.active(),
            beta: hp.beta,
            delta: (w.ancpo != 0.0).then_some(hp.delta),
            margin_uses_beta: (w.margin != 0.0).then_some(hp.margin_uses_beta),
            reward_scale: (w.vco_star != 0.0).then_some(self.reward_scale),
            lr: hp.lr,
            epochs: hp.epochs,
            batch_size: hp.batch_size,
            adam: (self.optimizer == OptimizerKind::Adam).then_some((self.adam_beta1, self.adam_beta2, self.adam_eps)),
            shuffle_seed: self.shuffle_seed,
            eval_every: self.eval_every,
            feature_map: self.feature_map,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    /// Loss at the parameters before the update of step `step`, and the norm
    /// of the gradient that update applied.
    Step {
        step: usize,
        epoch: usize,
        loss_total: f64,
        components: BTreeMap<Component, f64>,
        grad_norm: f64,
    },
    /// Held-out metrics after `step` updates.
    Eval {
        step: usize,
        hallucination_rate: f64,
        mention_hallucination_rate: f64,
        contrastive_accuracy: f64,
    },
    Abort {
        step: usize,
        reason: String,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn steps(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.records.iter().filter_map(|r| match r {
            MetricsRecord::Step {
                step,
                loss_total,
                grad_norm,
                ..
            } => Some((*step, *loss_total, *grad_norm)),
            _ => None,
        })
    }

    pub fn last_eval(&self) -> Option<&MetricsRecord> {
        self.records
            .iter()
            .rev()
            .find(|r| matches!(r, MetricsRecord::Eval { .. }))
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub log: MetricsLog,
}

/// Summary written next to a training run's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub final_loss: f64,
    pub hallucination_rate: f64,
    pub contrastive_accuracy: f64,
    pub config_hash: String,
}

enum Optimizer {
    Sgd,
    Adam {
        m: Matrix,
        v: Matrix,
        t: i32,
        b1: f64,
        b2: f64,
        eps: f64,
    },
}

impl Optimizer {
    fn new(cfg: &TrainConfig, shape: (usize, usize)) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                m: Matrix::zeros(shape.0, shape.1),
                v: Matrix::zeros(shape.0, shape.1),
                t: 0,
                b1: cfg.adam_beta1,
                b2: cfg.adam_beta2,
                eps: cfg.adam_eps,
            },
        }
    }

    fn step(&mut self, w: &mut Matrix, grad: &Matrix, lr: f64) {
        match self {
            Optimizer::Sgd => w.add_scaled(grad, -lr),
            Optimizer::Adam { m, v, t, b1, b2, eps } => {
                *t += 1;
                let c1 = 1.0 - b1.powi(*t);
                let c2 = 1.0 - b2.powi(*t);
                let ws = w.as_mut_slice();
                let ms = m.as_mut_slice();
                let vs = v.as_mut_slice();
                for (k, &g) in grad.as_slice().iter().enumerate() {
                    ms[k] = *b1 * ms[k] + (1.0 - *b1) * g;
                    vs[k] = *b2 * vs[k] + (1.0 - *b2) * g * g;
                    ws[k] -= lr * (ms[k] / c1) / ((vs[k] / c2).sqrt() + *eps);
                }
            }
        }
    }
}

/// The split used for evaluation: held-out samples, or the training split
/// when nothing was held out.
pub fn eval_split(dataset: &Dataset) -> &[SymmetricSample] {
    if dataset.heldout.is_empty() {
        &dataset.train
    } else {
        &dataset.heldout
    }
}

/// A zero-weight (uniform) reference for the dataset's world.
pub fn uniform_reference(dataset: &Dataset, feature_map: FeatureMap) -> PolicyParams {
    PolicyParams::zeros(PolicyLayout::new(dataset.shape(), feature_map))
}

fn eval_record(
    step: usize,
    params: &PolicyParams,
    reference: &PolicyParams,
    split: &[SymmetricSample],
    hp: &HyperParams,
) -> Result<MetricsRecord> {
    let h = evaluate_hallucination_rate(params, split)?;
    Ok(MetricsRecord::Eval {
        step,
        hallucination_rate: h.response_level,
        mention_hallucination_rate: h.mention_level,
        contrastive_accuracy: evaluate_contrastive_accuracy(params, reference, split, hp)?,
    })
}

fn abort(step: usize, value: f64, reason: String, mut log: MetricsLog) -> Error {
    log.records.push(MetricsRecord::Abort { step, reason });
    Error::NonFiniteLoss {
        step,
        value,
        log: Box::new(log),
    }
}

/// Trains a policy initialized at `reference`, which also serves as the
/// fixed reference policy of every objective.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, reference: &PolicyParams) -> Result<TrainOutcome> {
    cfg.validate()?;
    let hp = &cfg.hyper;
    let n = dataset.train.len();
    if hp.epochs > 0 && hp.batch_size > n {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} training samples",
            hp.batch_size, n
        )));
    }
    if reference.layout().world != dataset.shape() {
        return Err(Error::Config("reference policy was built for a different world".into()));
    }
    let weights = cfg.weights();
    let reward = GroundTruthReward::new(cfg.reward_scale)?;
    let reward_ref: Option<&dyn Reward> = (weights.vco_star != 0.0).then_some(&reward as &dyn Reward);
    let split = eval_split(dataset);

    let mut params = reference.clone();
    let mut optimizer = Optimizer::new(cfg, params.weights().shape());
    let mut log = MetricsLog::default();
    let mut step = 0usize;
    if cfg.eval_every > 0 && !split.is_empty() {
        log.records.push(eval_record(0, &params, reference, split, hp)?);
    }

    for epoch in 0..hp.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(cfg.shuffle_seed, epoch as u64));
        for chunk in order.chunks(hp.batch_size) {
            let batch: Vec<SymmetricSample> = chunk.iter().map(|&i| dataset.train[i].clone()).collect();
            let (loss, grad) = match weighted_loss(&batch, &params, reference, hp, &weights, reward_ref) {
                Ok(v) => v,
                Err(Error::Numeric(reason)) => return Err(abort(step, f64::NAN, reason, log)),
                Err(e) => return Err(e),
            };
            let grad_norm = grad.frobenius_norm();
            if !grad_norm.is_finite() {
                return Err(abort(step, loss.total, "non-finite gradient".into(), log));
            }
            optimizer.step(params.weights_mut(), &grad, hp.lr);
            if !params.weights().is_finite() {
                return Err(abort(step, loss.total, "parameters diverged".into(), log));
            }
            debug!("step {step} epoch {epoch} loss {:.6} |g| {grad_norm:.3e}", loss.total);
            log.records.push(MetricsRecord::Step {
                step,
                epoch,
                loss_total: loss.total,
                components: loss.components,
                grad_norm,
            });
            step += 1;
            if cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every) && !split.is_empty() {
                log.records.push(eval_record(step, &params, reference, split, hp)?);
            }
        }
    }
    let evaluated_last = matches!(log.records.last(), Some(MetricsRecord::Eval { step: s, .. }) if *s == step);
    if !evaluated_last && !split.is_empty() {
        log.records.push(eval_record(step, &params, reference, split, hp)?);
    }
    Ok(TrainOutcome { params, log })
}

/// The configured objective over the whole training split.
pub fn full_loss(
    dataset: &Dataset,
    cfg: &TrainConfig,
    params: &PolicyParams,
    reference: &PolicyParams,
) -> Result<LossValue> {
    let reward = GroundTruthReward::new(cfg.reward_scale)?;
    let weights = cfg.weights();
    let reward_ref: Option<&dyn Reward> = (weights.vco_star != 0.0).then_some(&reward as &dyn Reward);
    Ok(weighted_loss(&dataset.train, params, reference, &cfg.hyper, &weights, reward_ref)?.0)
}

pub fn summarize(
    dataset: &Dataset,
    cfg: &TrainConfig,
    outcome: &TrainOutcome,
    reference: &PolicyParams,
    config_hash: String,
) -> Result<TrainSummary> {
    let split = eval_split(dataset);
    Ok(TrainSummary {
        final_loss: full_loss(dataset, cfg, &outcome.params, reference)?.total,
        hallucination_rate: evaluate_hallucination_rate(&outcome.params, split)?.response_level,
        contrastive_accuracy: evaluate_contrastive_accuracy(&outcome.params, reference, split, &cfg.hyper)?,
        config_hash,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    /// Fraction of pairs whose argmax response has at least one wrong assertion.
    pub response_level: f64,
    /// Mean fraction of wrong assertions per argmax response.
    pub mention_level: f64,
}

pub fn evaluate_hallucination_rate(params: &PolicyParams, split: &[SymmetricSample]) -> Result<HallucinationReport> {
    if split.is_empty() {
        return Err(Error::Usage("hallucination rate of an empty split".into()));
    }
    let per_sample: Vec<(bool, f64)> = split
        .par_iter()
        .map(|s| {
            let truth = preferred_response(&s.image, &s.prompt);
            let answer = argmax_response(params, &s.image, &s.prompt)?;
            let wrong = answer.hamming(truth);
            Ok((wrong > 0, wrong as f64 / s.prompt.q() as f64))
        })
        .collect::<Result<_>>()?;
    let n = per_sample.len() as f64;
    Ok(HallucinationReport {
        response_level: per_sample.iter().filter(|(h, _)| *h).count() as f64 / n,
        mention_level: per_sample.iter().map(|(_, m)| m).sum::<f64>() / n,
    })
}

/// Fraction of samples where the policy's implicit reward ranks the matching
/// preferred response strictly above the other arm's, under both images.
pub fn evaluate_contrastive_accuracy(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    split: &[SymmetricSample],
    hp: &HyperParams,
) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Usage("contrastive accuracy of an empty split".into()));
    }
    let hits: Vec<bool> = split
        .par_iter()
        .map(|s| {
            let ranks_first = |image, own, other| -> Result<bool> {
                let pol = evaluate(params, image, &s.prompt)?;
                let rf = evaluate(ref_params, image, &s.prompt)?;
                let reward = |y| hp.beta * (pol.log_prob(y) - rf.log_prob(y));
                Ok(bt_probability(reward(own), reward(other)) > 0.5)
            };
            Ok(ranks_first(&s.image, s.y_w, s.y_w_c)? && ranks_first(&s.image_c, s.y_w_c, s.y_w)?)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}
