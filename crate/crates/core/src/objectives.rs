//! Preference-optimization losses with analytic gradients.
//!
//! Every loss is a batch mean of per-sample terms built from log-ratios
//! `ρ(y | m) = log π_θ(y | m, x) − log π_ref(y | m, x)`:
//!
//! | component | per-sample term |
//! |-----------|-----------------|
//! | `dpo_m`   | `−log σ(β[ρ(y_w│m) − ρ(y_l│m)])` |
//! | `vco`     | `−log σ(β[ρ(y_w│m) − ρ(y_w│m′)])` |
//! | `vco_star`| `−log σ(β[ρ(y_w│m) − ρ(y_w│m′)] + c)` |
//! | `pair`    | `−log σ(β[ρ(y_w│m) − ρ(y_w′│m)]) − log σ(β[ρ(y_w′│m′) − ρ(y_w│m′)])` |
//! | `margin`  | `(Δ(m, y_w, y_w′) − Δ(m′, y_w′, y_w))²` with `Δ(m, a, b) = ρ(a│m) − ρ(b│m)` |
//! | `ancpo`   | `−log σ(βρ(y_w│m) − δ) − log σ(βρ(y_w′│m′) − δ)` |
//!
//! `c` is the partition-function offset from [`crate::partition::offset_c`].
//! The symmetric objective is `dpo_m + λ·pair + γ·margin + η·ancpo`.
//!
//! Per-sample terms may be evaluated on the rayon pool; accumulation always
//! runs in ascending sample order so results do not depend on thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{HyperParams, ImageFeat, Prompt, ResponseId, SymmetricSample};
use crate::error::{Error, Result};
use crate::matrix::{GradMatrix, Matrix};
use crate::numerics::{log_sigmoid, sigmoid};
use crate::partition::{self, Reward};
use crate::policy::{evaluate, ContextEval, PolicyParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    DpoM,
    Pair,
    Margin,
    Ancpo,
    Vco,
    VcoStar,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::DpoM,
        Component::Pair,
        Component::Margin,
        Component::Ancpo,
        Component::Vco,
        Component::VcoStar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::DpoM => "dpo_m",
            Component::Pair => "pair",
            Component::Margin => "margin",
            Component::Ancpo => "ancpo",
            Component::Vco => "vco",
            Component::VcoStar => "vco_star",
        }
    }
}

/// Total loss and the batch-mean value of each evaluated component.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub components: BTreeMap<Component, f64>,
}

impl LossValue {
    pub fn component(&self, c: Component) -> Option<f64> {
        self.components.get(&c).copied()
    }
}

/// Weight of each component in a combined objective. Components with weight
/// exactly zero are not evaluated and do not appear in [`LossValue`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dpo_m: f64,
    pub pair: f64,
    pub margin: f64,
    pub ancpo: f64,
    pub vco: f64,
    pub vco_star: f64,
}

impl LossWeights {
    pub fn only(component: Component) -> Self {
        let mut w = Self::default();
        w.set(component, 1.0);
        w
    }

    /// `dpo_m + λ·pair + γ·margin + η·ancpo`.
    pub fn symmpo(hp: &HyperParams) -> Self {
        Self {
            dpo_m: 1.0,
            pair: hp.lambda,
            margin: hp.gamma,
            ancpo: hp.eta,
            ..Self::default()
        }
    }

    pub fn get(&self, c: Component) -> f64 {
        match c {
            Component::DpoM => self.dpo_m,
            Component::Pair => self.pair,
            Component::Margin => self.margin,
            Component::Ancpo => self.ancpo,
            Component::Vco => self.vco,
            Component::VcoStar => self.vco_star,
        }
    }

    pub fn set(&mut self, c: Component, w: f64) {
        match c {
            Component::DpoM => self.dpo_m = w,
            Component::Pair => self.pair = w,
            Component::Margin => self.margin = w,
            Component::Ancpo => self.ancpo = w,
            Component::Vco => self.vco = w,
            Component::VcoStar => self.vco_star = w,
        }
    }

    /// Components with nonzero weight, in canonical order.
    pub fn active(&self) -> Vec<(Component, f64)> {
        Component::ALL
            .iter()
            .map(|&c| (c, self.get(c)))
            .filter(|&(_, w)| w != 0.0)
            .collect()
    }

    fn needs_contrastive_arm(&self) -> bool {
        self.pair != 0.0 || self.margin != 0.0 || self.ancpo != 0.0 || self.vco != 0.0 || self.vco_star != 0.0
    }
}

/// `log π_θ(y│m,x) − log π_ref(y│m,x)`, unscaled.
pub fn log_ratio(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    image: &ImageFeat,
    prompt: &Prompt,
    y: ResponseId,
) -> Result<f64> {
    check_layouts(params, ref_params)?;
    check_ids(params, &[y])?;
    let pol = evaluate(params, image, prompt)?;
    let rf = evaluate(ref_params, image, prompt)?;
    Ok(pol.log_prob(y) - rf.log_prob(y))
}

/// Bradley–Terry probability that a response with reward `r_w` beats one with
/// reward `r_l`.
pub fn bt_probability(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

/// Preference margin `Δ = ρ(y_a│m) − ρ(y_b│m)`.
pub fn margin_delta(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    image: &ImageFeat,
    prompt: &Prompt,
    y_a: ResponseId,
    y_b: ResponseId,
) -> Result<f64> {
    check_layouts(params, ref_params)?;
    check_ids(params, &[y_a, y_b])?;
    let arm = Arm::evaluate(params, ref_params, image, prompt)?;
    Ok(arm.rho_gap(y_a, y_b))
}

pub fn loss_dpo_m(
    batch: &[SymmetricSample],
    params: &PolicyParams,
    ref_params: &PolicyParams,
    hp: &HyperParams,
) -> Result<(LossValue, GradMatrix)> {
    weighted_loss(batch, params, ref_params, hp, &LossWeights::only(Component::DpoM), None)
}

pub fn loss_vco(
    batch: &[SymmetricSample],
    params: &PolicyParams,
    ref_params: &PolicyParams,
    hp: &HyperParams,
) -> Result<(LossValue, GradMatrix)> {
    weighted_loss(batch, params, ref_params, hp, &LossWeights::only(Component::Vco), None)
}

pub fn loss_pair(
    batch: &[SymmetricSample],
    params: &PolicyParams,
    ref_params: &PolicyParams,
    hp: &HyperParams,
) -> Result<(LossValue, GradMatrix)> {
    weighted_loss(batch, params, ref_params, hp, &LossWeights::only(Component::Pair), None)
}

pub fn loss_margin(
    batch: &[SymmetricSample],
    params: &PolicyParams,
    ref_params: &PolicyParams,
    hp: &HyperParams,
) -> Result<(LossValue, GradMatrix)> {
    weighted_loss(
        batch,
        params,
        ref_params,
        hp,
        &LossWeights::only(Component::Margin),
        None,
    )
}

pub fn loss_ancpo(
    batch: &[SymmetricSample],
    params: &PolicyParams,
    ref_params: &PolicyParams,
    hp: &HyperParams,
) -> Result<(LossValue, GradMatrix)> {
    weighted_loss(
        batch,
        params,
        ref_params,
        hp,
        &LossWeights::only(Component::Ancpo),
        None,
    )
}

pub fn loss_symmpo(
    batch: &[SymmetricSample],
    params: &PolicyParams,
    ref_params: &PolicyParams,
    hp: &HyperParams,
) -> Result<(LossValue, GradMatrix)> {
    weighted_loss(batch, params, ref_params, hp, &LossWeights::symmpo(hp), None)
}

/// Policy and reference evaluated at one conditioning.
struct Arm {
    policy: ContextEval,
    reference: ContextEval,
}

impl Arm {
    fn evaluate(params: &PolicyParams, ref_params: &PolicyParams, image: &ImageFeat, prompt: &Prompt) -> Result<Self> {
        Ok(Self {
            policy: evaluate(params, image, prompt)?,
            reference: evaluate(ref_params, image, prompt)?,
        })
    }

    fn rho(&self, y: ResponseId) -> f64 {
        self.policy.log_prob(y) - self.reference.log_prob(y)
    }

    /// `ρ(a) − ρ(b)` from logits alone: the normalizers cancel exactly, so
    /// the result does not depend on weights of other responses at all.
    fn rho_gap(&self, a: ResponseId, b: ResponseId) -> f64 {
        let (p, r) = (&self.policy.logits, &self.reference.logits);
        (p[a.index()] - p[b.index()]) - (r[a.index()] - r[b.index()])
    }
}

/// `ρ(a│m) − ρ(b│m) + ρ(a│m′) − ρ(b│m′)` summed row by row over the
/// combined features `φ(m) + φ(m′)`. Rows where the two contexts cancel
/// contribute exactly zero, so the value is bit-for-bit insensitive to the
/// weights the margin gradient does not depend on.
fn margin_argument(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    arm_m: &Arm,
    arm_c: &Arm,
    a: usize,
    b: usize,
) -> f64 {
    let (wp, wr) = (params.weights(), ref_params.weights());
    arm_m
        .policy
        .features
        .values()
        .iter()
        .zip(arm_c.policy.features.values())
        .enumerate()
        .map(|(r, (fm, fc))| {
            let gap = (wp.get(r, a) - wp.get(r, b)) - (wr.get(r, a) - wr.get(r, b));
            (fm + fc) * gap
        })
        .sum()
}

/// Per-sample contribution: component values, and coefficients `a_y` such
/// that the sample's gradient is `Σ_y a_y ∇log π_θ(y│m) + Σ_y a′_y ∇log π_θ(y│m′)`.
struct SampleTerm {
    values: Vec<(Component, f64)>,
    coef_m: Vec<f64>,
    coef_c: Vec<f64>,
    arm_m: Arm,
    arm_c: Option<Arm>,
}

fn sample_term(
    index: usize,
    sample: &SymmetricSample,
    params: &PolicyParams,
    ref_params: &PolicyParams,
    hp: &HyperParams,
    weights: &LossWeights,
    reward: Option<&dyn Reward>,
) -> Result<SampleTerm> {
    let active = weights.active();
    if weights.pair != 0.0 && sample.y_w == sample.y_w_c {
        return Err(Error::DegenerateSample {
            index,
            reason: "y_w == y_w_c makes the pairwise loss degenerate".into(),
        });
    }
    check_ids(params, &[sample.y_w, sample.y_l, sample.y_w_c])?;

    let k = params.layout().catalog_size();
    let beta = hp.beta;
    let (w, l, wc) = (sample.y_w.index(), sample.y_l.index(), sample.y_w_c.index());

    let arm_m = Arm::evaluate(params, ref_params, &sample.image, &sample.prompt)?;
    let arm_c = if weights.needs_contrastive_arm() {
        Some(Arm::evaluate(params, ref_params, &sample.image_c, &sample.prompt)?)
    } else {
        None
    };

    let mut coef_m = vec![0.0; k];
    let mut coef_c = vec![0.0; k];
    let mut values = Vec::with_capacity(active.len());

    for (component, weight) in active {
        // Coefficients for this component alone, scaled by `weight` when merged.
        let mut cm = vec![0.0; k];
        let mut cc = vec![0.0; k];
        let value = match component {
            Component::DpoM => {
                let z = beta * arm_m.rho_gap(sample.y_w, sample.y_l);
                let g = -sigmoid(-z) * beta;
                cm[w] += g;
                cm[l] -= g;
                -log_sigmoid(z)
            }
            Component::Vco | Component::VcoStar => {
                let ac = arm_c.as_ref().expect("contrastive arm evaluated");
                let c = if component == Component::VcoStar {
                    let reward = reward.ok_or_else(|| {
                        Error::Usage("the partition-corrected contrastive loss needs a ground-truth reward".into())
                    })?;
                    partition::offset_c(ref_params, reward, &sample.image, &sample.image_c, &sample.prompt, hp)?
                } else {
                    0.0
                };
                let z = beta * (arm_m.rho(sample.y_w) - ac.rho(sample.y_w)) + c;
                let g = -sigmoid(-z) * beta;
                cm[w] += g;
                cc[w] -= g;
                -log_sigmoid(z)
            }
            Component::Pair => {
                let ac = arm_c.as_ref().expect("contrastive arm evaluated");
                let z1 = beta * arm_m.rho_gap(sample.y_w, sample.y_w_c);
                let z2 = beta * ac.rho_gap(sample.y_w_c, sample.y_w);
                let g1 = -sigmoid(-z1) * beta;
                let g2 = -sigmoid(-z2) * beta;
                cm[w] += g1;
                cm[wc] -= g1;
                cc[wc] += g2;
                cc[w] -= g2;
                -log_sigmoid(z1) - log_sigmoid(z2)
            }
            Component::Margin => {
                let ac = arm_c.as_ref().expect("contrastive arm evaluated");
                let s = if hp.margin_uses_beta { beta } else { 1.0 };
                let diff = s * margin_argument(params, ref_params, &arm_m, ac, w, wc);
                let g = 2.0 * diff * s;
                cm[w] += g;
                cm[wc] -= g;
                cc[wc] -= g;
                cc[w] += g;
                diff * diff
            }
            Component::Ancpo => {
                let ac = arm_c.as_ref().expect("contrastive arm evaluated");
                let a1 = beta * arm_m.rho(sample.y_w) - hp.delta;
                let a2 = beta * ac.rho(sample.y_w_c) - hp.delta;
                let g1 = -sigmoid(-a1) * beta;
                let g2 = -sigmoid(-a2) * beta;
                cm[w] += g1;
                cc[wc] += g2;
                -log_sigmoid(a1) - log_sigmoid(a2)
            }
        };
        for (acc, x) in coef_m.iter_mut().zip(&cm) {
            *acc += weight * x;
        }
        for (acc, x) in coef_c.iter_mut().zip(&cc) {
            *acc += weight * x;
        }
        values.push((component, value));
    }

    Ok(SampleTerm {
        values,
        coef_m,
        coef_c,
        arm_m,
        arm_c,
    })
}

/// Batch-mean of the weighted objective and its gradient with respect to the
/// policy weights. `reward` is required only when `vco_star` is active.
pub fn weighted_loss(
    batch: &[SymmetricSample],
    params: &PolicyParams,
    ref_params: &PolicyParams,
    hp: &HyperParams,
    weights: &LossWeights,
    reward: Option<&dyn Reward>,
) -> Result<(LossValue, GradMatrix)> {
    if batch.is_empty() {
        return Err(Error::Usage("loss evaluated on an empty batch".into()));
    }
    check_layouts(params, ref_params)?;

    let terms: Vec<SampleTerm> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| sample_term(i, s, params, ref_params, hp, weights, reward))
        .collect::<Result<_>>()?;

    let (rows, cols) = params.weights().shape();
    let mut grad = Matrix::zeros(rows, cols);
    let mut sums: BTreeMap<Component, f64> = BTreeMap::new();
    for term in &terms {
        for &(c, v) in &term.values {
            *sums.entry(c).or_insert(0.0) += v;
        }
        term.arm_m.policy.accumulate_grad(&mut grad, &term.coef_m);
        if let Some(arm_c) = &term.arm_c {
            arm_c.policy.accumulate_grad(&mut grad, &term.coef_c);
        }
    }

    let n = batch.len() as f64;
    grad.scale(1.0 / n);
    let components: BTreeMap<Component, f64> = sums.into_iter().map(|(c, s)| (c, s / n)).collect();
    let total = weights
        .active()
        .iter()
        .fold(0.0, |acc, &(c, w)| acc + w * components[&c]);

    if !total.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {total}")));
    }
    Ok((LossValue { total, components }, grad))
}

fn check_layouts(params: &PolicyParams, ref_params: &PolicyParams) -> Result<()> {
    if params.layout() != ref_params.layout() {
        return Err(Error::Config("policy and reference layouts differ".into()));
    }
    Ok(())
}

fn check_ids(params: &PolicyParams, ids: &[ResponseId]) -> Result<()> {
    let k = params.layout().catalog_size();
    match ids.iter().find(|y| y.index() >= k) {
        Some(y) => Err(Error::Config(format!("response {y} out of catalog of size {k}"))),
        None => Ok(()),
    }
}
