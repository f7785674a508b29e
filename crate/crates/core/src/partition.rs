//! Exact partition functions and the contrastive-objective offset.
//!
//! With an enumerable catalog the partition function
//! `Z(m,x) = Σ_y π_ref(y│m,x) exp(r*(m,x,y)/β)` is a finite sum. Two images
//! with the same prompt generally have different `Z`, so the
//! vision-oriented contrastive loss picks up the offset
//! `c = β(ln Z(m,x) − ln Z(m′,x))`, which does not depend on the policy
//! weights. This module computes `Z`, `c`, the corrected loss and the
//! per-sample comparison of the two gradient coefficients `σ(−(u+c))` and
//! `σ(−u)`.

use serde::{Deserialize, Serialize};

use crate::domain::{HyperParams, ImageFeat, Prompt, ResponseId, SymmetricSample};
use crate::error::{Error, Result};
use crate::matrix::GradMatrix;
use crate::numerics::{log_sigmoid, logsumexp, relative_error, sigmoid, REL_ERR_FLOOR};
use crate::objectives::{self, weighted_loss, Component, LossValue, LossWeights};
use crate::policy::{evaluate, PolicyParams};

/// Assertion-accuracy reward: `scale · (#correct − #incorrect)` over the
/// prompt's queried attributes, with image attributes thresholded at 0.5.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthReward {
    pub scale: f64,
}

impl Default for GroundTruthReward {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

/// A fixed reward `r*(m, x, y)` used inside the partition function.
pub trait Reward: Sync {
    fn reward(&self, image: &ImageFeat, prompt: &Prompt, y: ResponseId) -> f64;
}

/// `r* ≡ κ`. Its partition function is `exp(κ/β)` for every conditioning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantReward(pub f64);

impl Reward for ConstantReward {
    fn reward(&self, _: &ImageFeat, _: &Prompt, _: ResponseId) -> f64 {
        self.0
    }
}

impl GroundTruthReward {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::Config(format!(
                "reward scale must be finite and nonnegative, got {scale}"
            )));
        }
        Ok(Self { scale })
    }

    /// Upper bound on `|r*|`.
    pub fn bound(&self, q: usize) -> f64 {
        self.scale * q as f64
    }
}

impl Reward for GroundTruthReward {
    fn reward(&self, image: &ImageFeat, prompt: &Prompt, y: ResponseId) -> f64 {
        let correct = prompt
            .queried
            .iter()
            .enumerate()
            .filter(|&(t, &pos)| y.asserts(t) == image.bit(pos))
            .count() as f64;
        let incorrect = prompt.q() as f64 - correct;
        self.scale * (correct - incorrect)
    }
}

/// `ln Z(m,x)`, by log-sum-exp over the whole catalog.
pub fn log_partition_z(
    ref_params: &PolicyParams,
    reward: &dyn Reward,
    image: &ImageFeat,
    prompt: &Prompt,
    hp: &HyperParams,
) -> Result<f64> {
    if !(hp.beta.is_finite() && hp.beta > 0.0) {
        return Err(Error::Config(format!(
            "beta must be finite and positive, got {}",
            hp.beta
        )));
    }
    // ln Z = lse(logits + r/β) − lse(logits); identical paths when r ≡ 0, so
    // a zero reward yields exactly ln Z = 0.
    let eval = evaluate(ref_params, image, prompt)?;
    let shifted: Vec<f64> = eval
        .logits
        .iter()
        .enumerate()
        .map(|(y, l)| l + reward.reward(image, prompt, ResponseId(y as u32)) / hp.beta)
        .collect();
    Ok(logsumexp(&shifted) - logsumexp(&eval.logits))
}

pub fn partition_z(
    ref_params: &PolicyParams,
    reward: &dyn Reward,
    image: &ImageFeat,
    prompt: &Prompt,
    hp: &HyperParams,
) -> Result<f64> {
    Ok(log_partition_z(ref_params, reward, image, prompt, hp)?.exp())
}

/// `c = β(ln Z(m,x) − ln Z(m′,x))`.
pub fn offset_c(
    ref_params: &PolicyParams,
    reward: &dyn Reward,
    image: &ImageFeat,
    image_c: &ImageFeat,
    prompt: &Prompt,
    hp: &HyperParams,
) -> Result<f64> {
    let log_z_w = log_partition_z(ref_params, reward, image, prompt, hp)?;
    let log_z_l = log_partition_z(ref_params, reward, image_c, prompt, hp)?;
    Ok(hp.beta * (log_z_w - log_z_l))
}

/// Contrastive loss with the partition offset kept: mean of `−log σ(u + c)`.
/// `c` carries no gradient.
pub fn loss_vco_star(
    batch: &[SymmetricSample],
    params: &PolicyParams,
    ref_params: &PolicyParams,
    reward: &dyn Reward,
    hp: &HyperParams,
) -> Result<(LossValue, GradMatrix)> {
    weighted_loss(
        batch,
        params,
        ref_params,
        hp,
        &LossWeights::only(Component::VcoStar),
        Some(reward),
    )
}

/// `(σ(−(u+c)), σ(−u))`: the factors multiplying `−∂u/∂θ` in the corrected
/// and the plain contrastive gradients.
pub fn gradient_coefficients(u: f64, c: f64) -> (f64, f64) {
    (sigmoid(-(u + c)), sigmoid(-u))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub z_w: f64,
    pub z_l: f64,
    pub u: f64,
    pub c: f64,
    pub coef_star: f64,
    pub coef_plain: f64,
    pub loss_vco: f64,
    pub loss_vco_star: f64,
}

/// The JSONL record emitted by the `partition-report` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionRecord {
    pub u: f64,
    pub c: f64,
    pub coef_star: f64,
    pub coef_plain: f64,
    pub loss_vco: f64,
    pub loss_vco_star: f64,
}

impl From<&PartitionReport> for PartitionRecord {
    fn from(r: &PartitionReport) -> Self {
        Self {
            u: r.u,
            c: r.c,
            coef_star: r.coef_star,
            coef_plain: r.coef_plain,
            loss_vco: r.loss_vco,
            loss_vco_star: r.loss_vco_star,
        }
    }
}

/// Tolerance of the per-sample identity `∇L_VCO* = σ(−(u+c))/σ(−u) · ∇L_VCO`,
/// as an elementwise relative error with the usual `1e-8` floor. Entries are
/// differences of two arms' terms, so a floorless ratio would measure
/// cancellation noise rather than the identity.
pub const GRADIENT_IDENTITY_TOL: f64 = 1e-10;

fn check_proportional(sample: usize, grad_star: &[f64], grad_plain: &[f64], ratio: f64) -> Result<()> {
    for (idx, (gs, gp)) in grad_star.iter().zip(grad_plain).enumerate() {
        let predicted = ratio * gp;
        let rel = relative_error(*gs, predicted, REL_ERR_FLOOR);
        if rel.is_nan() || rel > GRADIENT_IDENTITY_TOL {
            return Err(Error::IdentityViolation(format!(
                "sample {sample}, entry {idx}: corrected gradient {gs} vs predicted {predicted} (rel {rel:e})"
            )));
        }
    }
    Ok(())
}

/// Per-sample comparison of the plain and corrected contrastive objectives.
///
/// Fails with [`Error::IdentityViolation`] if the two gradients are not
/// proportional with ratio `coef_star / coef_plain`.
pub fn compare_vco_gradients(
    batch: &[SymmetricSample],
    params: &PolicyParams,
    ref_params: &PolicyParams,
    reward: &dyn Reward,
    hp: &HyperParams,
) -> Result<Vec<PartitionReport>> {
    if batch.is_empty() {
        return Err(Error::Usage("partition comparison on an empty batch".into()));
    }
    batch
        .iter()
        .enumerate()
        .map(|(i, sample)| {
            let single = std::slice::from_ref(sample);
            let log_z_w = log_partition_z(ref_params, reward, &sample.image, &sample.prompt, hp)?;
            let log_z_l = log_partition_z(ref_params, reward, &sample.image_c, &sample.prompt, hp)?;
            let c = hp.beta * (log_z_w - log_z_l);
            let u = hp.beta
                * (objectives::log_ratio(params, ref_params, &sample.image, &sample.prompt, sample.y_w)?
                    - objectives::log_ratio(params, ref_params, &sample.image_c, &sample.prompt, sample.y_w)?);
            let (coef_star, coef_plain) = gradient_coefficients(u, c);

            let (_, grad_plain) = objectives::loss_vco(single, params, ref_params, hp)?;
            let (_, grad_star) = loss_vco_star(single, params, ref_params, reward, hp)?;
            check_proportional(i, grad_star.as_slice(), grad_plain.as_slice(), coef_star / coef_plain)?;

            Ok(PartitionReport {
                z_w: log_z_w.exp(),
                z_l: log_z_l.exp(),
                u,
                c,
                coef_star,
                coef_plain,
                loss_vco: -log_sigmoid(u),
                loss_vco_star: -log_sigmoid(u + c),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::tests::random_instance;
    use crate::policy::context_features;
    use crate::rng::stream_rng;
    use rand::Rng;

    #[test]
    fn proportionality_check_rejects_a_wrong_ratio() {
        let plain = [0.3, -1.2, 0.0, 4e-9];
        let star: Vec<f64> = plain.iter().map(|g| 0.7 * g).collect();
        assert!(check_proportional(0, &star, &plain, 0.7).is_ok());
        let err = check_proportional(3, &star, &plain, 0.7 * (1.0 + 1e-9)).unwrap_err();
        assert!(matches!(err, Error::IdentityViolation(ref m) if m.contains("sample 3")));
    }

    /// Brute-force `Z` with a naive softmax and a hand-rolled reward.
    fn brute_force_z(ref_params: &PolicyParams, scale: f64, image: &ImageFeat, prompt: &Prompt, beta: f64) -> f64 {
        let f = context_features(image, prompt, ref_params.layout()).unwrap();
        let w = ref_params.weights();
        let k = w.cols();
        let logits: Vec<f64> = (0..k)
            .map(|j| (0..w.rows()).map(|i| f.0[i] * w.get(i, j)).sum())
            .collect();
        let norm: f64 = logits.iter().map(|l| l.exp()).sum();
        (0..k)
            .map(|y| {
                let mut r = 0.0;
                for (t, &pos) in prompt.queried.iter().enumerate() {
                    let asserted = (y >> t) & 1 == 1;
                    let truth = image.0[pos] >= 0.5;
                    r += if asserted == truth { scale } else { -scale };
                }
                logits[y].exp() / norm * (r / beta).exp()
            })
            .sum()
    }

    #[test]
    fn reward_counts_assertions() {
        let prompt = Prompt {
            id: 0,
            queried: vec![0, 2, 3],
        };
        let image = ImageFeat(vec![1.0, 0.0, 0.0, 0.7]);
        let r = GroundTruthReward { scale: 2.0 };
        // truth bits (1, 0, 1) -> id 0b101 = 5.
        assert_eq!(r.reward(&image, &prompt, ResponseId(5)), 6.0);
        assert_eq!(r.reward(&image, &prompt, ResponseId(2)), -6.0);
        assert_eq!(r.reward(&image, &prompt, ResponseId(4)), 2.0);
    }

    #[test]
    fn zero_and_constant_rewards() {
        let (_, r, batch) = random_instance(21, 2);
        let hp = HyperParams::paper();
        let zero = GroundTruthReward { scale: 0.0 };
        for s in &batch {
            assert!((partition_z(&r, &zero, &s.image, &s.prompt, &hp).unwrap() - 1.0).abs() < 1e-14);
            assert_eq!(offset_c(&r, &zero, &s.image, &s.image_c, &s.prompt, &hp).unwrap(), 0.0);
            assert_eq!(
                offset_c(&r, &GroundTruthReward::default(), &s.image, &s.image, &s.prompt, &hp).unwrap(),
                0.0
            );
        }
        let kappa = 0.3;
        let reports = compare_vco_gradients(&batch, &r, &r, &ConstantReward(kappa), &hp).unwrap();
        for (s, rep) in batch.iter().zip(&reports) {
            let z = partition_z(&r, &ConstantReward(kappa), &s.image, &s.prompt, &hp).unwrap();
            assert!((z / (kappa / hp.beta).exp() - 1.0).abs() < 1e-12);
            assert!(rep.c.abs() < 1e-12);
        }
    }

    #[test]
    fn partition_matches_brute_force_enumeration() {
        let hp = HyperParams::paper();
        let reward = GroundTruthReward::default();
        for seed in 0..100 {
            let (_, r, batch) = random_instance(600 + seed, 1);
            let s = &batch[0];
            let z = partition_z(&r, &reward, &s.image, &s.prompt, &hp).unwrap();
            let oracle = brute_force_z(&r, reward.scale, &s.image, &s.prompt, hp.beta);
            assert!(((z - oracle) / oracle).abs() <= 1e-12, "{z} vs {oracle}");
        }
    }

    #[test]
    fn offset_is_independent_of_policy_weights() {
        let hp = HyperParams::paper();
        let reward = GroundTruthReward::default();
        let (p, r, batch) = random_instance(22, 3);
        let mut rng = stream_rng(22, 0);
        for s in &batch {
            let c0 = offset_c(&r, &reward, &s.image, &s.image_c, &s.prompt, &hp).unwrap();
            let direct = hp.beta
                * (partition_z(&r, &reward, &s.image, &s.prompt, &hp).unwrap().ln()
                    - partition_z(&r, &reward, &s.image_c, &s.prompt, &hp).unwrap().ln());
            assert!((c0 - direct).abs() < 1e-12);
            for _ in 0..5 {
                let mut w = p.weights().clone();
                w.as_mut_slice()
                    .iter_mut()
                    .for_each(|x| *x += rng.random_range(-1.0..1.0));
                let perturbed = p.with_weights(w);
                let report = compare_vco_gradients(std::slice::from_ref(s), &perturbed, &r, &reward, &hp).unwrap();
                assert_eq!(report[0].c.to_bits(), c0.to_bits());
            }
        }
    }

    #[test]
    fn vco_star_reduces_to_vco_without_offset() {
        let hp = HyperParams::paper();
        let (p, r, batch) = random_instance(23, 4);
        let zero = GroundTruthReward { scale: 0.0 };
        let (a, ga) = loss_vco_star(&batch, &p, &r, &zero, &hp).unwrap();
        let (b, gb) = objectives::loss_vco(&batch, &p, &r, &hp).unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(ga, gb);
    }

    #[test]
    fn vco_star_at_reference_is_minus_log_sigmoid_of_offset() {
        let hp = HyperParams::paper();
        let reward = GroundTruthReward::default();
        let (_, r, batch) = random_instance(24, 1);
        let s = &batch[0];
        let c = offset_c(&r, &reward, &s.image, &s.image_c, &s.prompt, &hp).unwrap();
        let loss = loss_vco_star(&batch, &r, &r, &reward, &hp).unwrap().0.total;
        assert!((loss - (1.0 + (-c).exp()).ln()).abs() < 1e-12);
        let mut same = batch.clone();
        same[0].image_c = same[0].image.clone();
        let loss = loss_vco_star(&same, &r, &r, &reward, &hp).unwrap().0.total;
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gradient_coefficient_values() {
        assert_eq!(gradient_coefficients(0.0, 0.0), (0.5, 0.5));
        let (star, plain) = gradient_coefficients(0.0, 0.5);
        assert!((star - 0.377_540_668_798_145_4).abs() < 1e-12);
        assert_eq!(plain, 0.5);
        let (star, plain) = gradient_coefficients(0.0, 30.0);
        assert!(star <= 1e-12);
        assert_eq!(plain, 0.5);
    }

    #[test]
    fn corrected_gradient_is_scaled_plain_gradient() {
        let hp = HyperParams::paper();
        let reward = GroundTruthReward::default();
        for seed in 0..30 {
            let (p, r, batch) = random_instance(700 + seed, 3);
            let reports = compare_vco_gradients(&batch, &p, &r, &reward, &hp).unwrap();
            for (s, rep) in batch.iter().zip(&reports) {
                // Independent assembly: -σ(-(u+c)) ∂u/∂θ with ∂u/∂θ from log_prob_grad.
                let gw = crate::policy::log_prob_grad(&p, &s.image, &s.prompt, s.y_w).unwrap();
                let gc = crate::policy::log_prob_grad(&p, &s.image_c, &s.prompt, s.y_w).unwrap();
                let mut expected = gw.clone();
                expected.add_scaled(&gc, -1.0);
                expected.scale(-rep.coef_star * hp.beta);
                let (_, g) = loss_vco_star(std::slice::from_ref(s), &p, &r, &reward, &hp).unwrap();
                assert!(g.max_abs_diff(&expected) <= 1e-10);
                assert!((rep.c - hp.beta * (rep.z_w.ln() - rep.z_l.ln())).abs() < 1e-12);
                if rep.c.abs() > 1e-6 {
                    assert!((rep.loss_vco - rep.loss_vco_star).abs() > 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_reward_batch_has_matching_coefficients() {
        let hp = HyperParams::paper();
        let (p, r, batch) = random_instance(25, 5);
        for rep in compare_vco_gradients(&batch, &p, &r, &GroundTruthReward { scale: 0.0 }, &hp).unwrap() {
            assert_eq!(rep.c, 0.0);
            assert_eq!(rep.coef_star, rep.coef_plain);
            assert_eq!(rep.loss_vco, rep.loss_vco_star);
        }
    }

    #[test]
    fn missing_reward_is_a_usage_error() {
        let (p, r, batch) = random_instance(26, 1);
        let err = weighted_loss(
            &batch,
            &p,
            &r,
            &HyperParams::paper(),
            &LossWeights::only(Component::VcoStar),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }
}
