//! Independent numerical oracles: central finite differences over the
//! policy weights, explicit-partition-function recomputation of the
//! preference losses, and arm-swap symmetry.

use std::fmt;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{HyperParams, ImageFeat, Prompt, ResponseId, SymmetricSample, WorldShape};
use crate::error::{Error, Result};
use crate::extended::Dd;
use crate::matrix::{GradMatrix, Matrix};
use crate::numerics::{log_sigmoid, relative_error};
use crate::objectives::{self, log_ratio, LossValue};
use crate::partition::{self, log_partition_z, GroundTruthReward, Reward};
use crate::policy::{context_features, FeatureMap, PolicyLayout, PolicyParams};
use crate::rng::{stream_rng, LabRng};

pub use crate::numerics::REL_ERR_FLOOR;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_STEP: f64 = 1e-5;
/// Largest feature dimension and catalog size drawn by the battery.
pub const MAX_DIM: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossId {
    DpoM,
    Vco,
    VcoStar,
    Pair,
    Margin,
    Ancpo,
    Symmpo,
}

impl LossId {
    pub const ALL: [LossId; 7] = [
        LossId::DpoM,
        LossId::Vco,
        LossId::VcoStar,
        LossId::Pair,
        LossId::Margin,
        LossId::Ancpo,
        LossId::Symmpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossId::DpoM => "dpo_m",
            LossId::Vco => "vco",
            LossId::VcoStar => "vco_star",
            LossId::Pair => "pair",
            LossId::Margin => "margin",
            LossId::Ancpo => "ancpo",
            LossId::Symmpo => "symmpo",
        }
    }
}

impl fmt::Display for LossId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossId::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss_id: LossId,
    pub instance: usize,
    pub max_rel_err: f64,
    pub worst_coordinate: (usize, usize),
    pub tolerance: f64,
    pub passed: bool,
}

/// Loss values the central-difference oracle can difference.
pub trait FdValue: Copy {
    /// `(plus − minus) / step`, subtracting at the value's own precision.
    fn slope(plus: Self, minus: Self, step: Dd) -> f64;
}

impl FdValue for f64 {
    fn slope(plus: f64, minus: f64, step: Dd) -> f64 {
        (plus - minus) / step.to_f64()
    }
}

impl FdValue for Dd {
    fn slope(plus: Dd, minus: Dd, step: Dd) -> f64 {
        ((plus - minus) / step).to_f64()
    }
}

/// Central differences `(L(θ+h·e) − L(θ−h·e)) / 2h` for every coordinate.
pub fn finite_diff_grad(loss: impl Fn(&Matrix) -> f64, at: &Matrix, h: f64) -> GradMatrix {
    finite_diff_grad_with(loss, at, h)
}

/// [`finite_diff_grad`] for any [`FdValue`]. The divisor is the step actually
/// taken after rounding `θ ± h`.
pub fn finite_diff_grad_with<T: FdValue>(loss: impl Fn(&Matrix) -> T, at: &Matrix, h: f64) -> GradMatrix {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = at.clone();
    let mut out = Matrix::zeros(at.rows(), at.cols());
    for r in 0..at.rows() {
        for c in 0..at.cols() {
            let x = at.get(r, c);
            let (up, down) = (x + h, x - h);
            probe.set(r, c, up);
            let plus = loss(&probe);
            probe.set(r, c, down);
            let minus = loss(&probe);
            probe.set(r, c, x);
            out.set(r, c, T::slope(plus, minus, Dd::sum(up, -down)));
        }
    }
    out
}

/// Log-probabilities of every response under `weights`, in double-double.
fn extended_log_probs(weights: &Matrix, features: &[f64]) -> Vec<Dd> {
    let logits: Vec<Dd> = (0..weights.cols())
        .map(|y| {
            features
                .iter()
                .enumerate()
                .fold(Dd::ZERO, |acc, (r, &f)| acc + Dd::product(f, weights.get(r, y)))
        })
        .collect();
    let lse = Dd::logsumexp(&logits);
    logits.into_iter().map(|l| l - lse).collect()
}

/// `ρ(y) = log π_θ(y) − log π_ref(y)` at one conditioning.
struct ExtendedArm {
    policy: Vec<Dd>,
    reference: Vec<Dd>,
}

impl ExtendedArm {
    fn new(inst: &Instance, weights: &Matrix, image: &ImageFeat, prompt: &Prompt) -> Result<Self> {
        let phi = context_features(image, prompt, inst.params.layout())?;
        Ok(Self {
            policy: extended_log_probs(weights, phi.values()),
            reference: extended_log_probs(inst.ref_params.weights(), phi.values()),
        })
    }

    fn rho(&self, y: ResponseId) -> Dd {
        self.policy[y.index()] - self.reference[y.index()]
    }

    /// `ln Σ_y π_ref(y) e^{r(y)/β}`.
    fn log_z(&self, inst: &Instance, image: &ImageFeat, prompt: &Prompt) -> Dd {
        let shifted: Vec<Dd> = self
            .reference
            .iter()
            .enumerate()
            .map(|(y, &l)| l + Dd::from(inst.reward.reward(image, prompt, ResponseId(y as u32))) / inst.hp.beta)
            .collect();
        Dd::logsumexp(&shifted)
    }
}

/// Loss `id` at `weights`, rebuilt from the defining formulas in
/// double-double arithmetic. Shares only the feature map and the reward with
/// the production path, and resolves loss differences far below f64 roundoff,
/// so central differences of it are limited by truncation alone.
pub fn extended_loss(id: LossId, inst: &Instance, weights: &Matrix) -> Result<Dd> {
    let hp = &inst.hp;
    let beta = Dd::from(hp.beta);
    let s = if hp.margin_uses_beta { beta } else { Dd::ONE };
    let mut total = Dd::ZERO;
    for sample in &inst.batch {
        let (w, l, wc) = (sample.y_w, sample.y_l, sample.y_w_c);
        let m = ExtendedArm::new(inst, weights, &sample.image, &sample.prompt)?;
        let c = ExtendedArm::new(inst, weights, &sample.image_c, &sample.prompt)?;
        let dpo = || -(beta * (m.rho(w) - m.rho(l))).log_sigmoid();
        let pair = || -(beta * (m.rho(w) - m.rho(wc))).log_sigmoid() - (beta * (c.rho(wc) - c.rho(w))).log_sigmoid();
        let margin = || {
            let d = s * (m.rho(w) - m.rho(wc)) - s * (c.rho(wc) - c.rho(w));
            d * d
        };
        let ancpo = || -(beta * m.rho(w) - hp.delta).log_sigmoid() - (beta * c.rho(wc) - hp.delta).log_sigmoid();
        let u = beta * (m.rho(w) - c.rho(w));
        total = total
            + match id {
                LossId::DpoM => dpo(),
                LossId::Vco => -u.log_sigmoid(),
                LossId::VcoStar => {
                    let offset = beta
                        * (m.log_z(inst, &sample.image, &sample.prompt)
                            - c.log_z(inst, &sample.image_c, &sample.prompt));
                    -(u + offset).log_sigmoid()
                }
                LossId::Pair => pair(),
                LossId::Margin => margin(),
                LossId::Ancpo => ancpo(),
                LossId::Symmpo => dpo() + pair() * hp.lambda + margin() * hp.gamma + ancpo() * hp.eta,
            };
    }
    if inst.batch.is_empty() {
        return Err(Error::Usage("loss evaluated on an empty batch".into()));
    }
    Ok(total / inst.batch.len() as f64)
}

/// Max elementwise relative error and where it occurs.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix) -> (f64, (usize, usize)) {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut worst = (0.0, (0, 0));
    for r in 0..analytic.rows() {
        for c in 0..analytic.cols() {
            let e = relative_error(analytic.get(r, c), numeric.get(r, c), REL_ERR_FLOOR);
            if e > worst.0 || e.is_nan() {
                worst = (e, (r, c));
            }
        }
    }
    worst
}

/// A random loss-evaluation problem for the gradient battery.
#[derive(Clone, Debug)]
pub struct Instance {
    pub params: PolicyParams,
    pub ref_params: PolicyParams,
    pub batch: Vec<SymmetricSample>,
    pub hp: HyperParams,
    pub reward: GroundTruthReward,
}

fn random_layout(rng: &mut LabRng) -> PolicyLayout {
    loop {
        let q = rng.random_range(1..=4usize);
        let map = if rng.random_bool(0.5) {
            FeatureMap::Concat
        } else {
            FeatureMap::PromptGated
        };
        let n_prompts = rng.random_range(1..=3usize);
        let max_d_img = match map {
            FeatureMap::Concat => MAX_DIM - n_prompts - 1,
            FeatureMap::PromptGated => (MAX_DIM - n_prompts - 1) / n_prompts,
        };
        if max_d_img < q {
            continue;
        }
        let d_img = rng.random_range(q..=max_d_img);
        return PolicyLayout::new(WorldShape { d_img, n_prompts, q }, map);
    }
}

fn bernoulli_image(rng: &mut LabRng, d: usize) -> ImageFeat {
    ImageFeat((0..d).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect())
}

/// Instance `index` of the battery seeded by `seed`: weights uniform in
/// `[-1, 1]`, Bernoulli(0.5) images, one to three samples.
pub fn random_instance(seed: u64, index: usize) -> Instance {
    let mut rng = stream_rng(seed, index as u64);
    let layout = random_layout(&mut rng);
    let (d, k) = (layout.feature_dim(), layout.catalog_size());
    let weights = |rng: &mut LabRng| {
        let w = Matrix::from_fn(d, k, |_, _| rng.random_range(-1.0..=1.0));
        PolicyParams::from_weights(layout, w).expect("finite weights of the right shape")
    };
    let params = weights(&mut rng);
    let ref_params = weights(&mut rng);
    let WorldShape { d_img, n_prompts, q } = layout.world;
    let prompts: Vec<Prompt> = (0..n_prompts)
        .map(|id| {
            let mut queried = sample_indices(&mut rng, d_img, q).into_vec();
            queried.sort_unstable();
            Prompt { id, queried }
        })
        .collect();
    let k = k as u32;
    let n = rng.random_range(1..=3usize);
    let batch = (0..n)
        .map(|_| {
            let y_w = rng.random_range(0..k);
            SymmetricSample {
                prompt: prompts[rng.random_range(0..n_prompts)].clone(),
                image: bernoulli_image(&mut rng, d_img),
                image_c: bernoulli_image(&mut rng, d_img),
                y_w: ResponseId(y_w),
                y_l: ResponseId((y_w + rng.random_range(1..k)) % k),
                y_w_c: ResponseId((y_w + rng.random_range(1..k)) % k),
                neighbor_id: -1,
            }
        })
        .collect();
    let hp = HyperParams {
        delta: rng.random_range(-0.5..=0.5),
        ..HyperParams::paper()
    };
    Instance {
        params,
        ref_params,
        batch,
        hp,
        reward: GroundTruthReward::default(),
    }
}

pub fn evaluate_loss(id: LossId, inst: &Instance, params: &PolicyParams) -> Result<(LossValue, GradMatrix)> {
    let (b, r, hp) = (&inst.batch, &inst.ref_params, &inst.hp);
    match id {
        LossId::DpoM => objectives::loss_dpo_m(b, params, r, hp),
        LossId::Vco => objectives::loss_vco(b, params, r, hp),
        LossId::VcoStar => partition::loss_vco_star(b, params, r, &inst.reward, hp),
        LossId::Pair => objectives::loss_pair(b, params, r, hp),
        LossId::Margin => objectives::loss_margin(b, params, r, hp),
        LossId::Ancpo => objectives::loss_ancpo(b, params, r, hp),
        LossId::Symmpo => objectives::loss_symmpo(b, params, r, hp),
    }
}

pub fn check_gradient(id: LossId, inst: &Instance, index: usize, h: f64, tolerance: f64) -> Result<GradCheckReport> {
    let (_, analytic) = evaluate_loss(id, inst, &inst.params)?;
    let numeric = finite_diff_grad_with(
        |w| extended_loss(id, inst, w).unwrap_or(Dd::from(f64::NAN)),
        inst.params.weights(),
        h,
    );
    let (max_rel_err, worst_coordinate) = max_relative_error(&analytic, &numeric);
    Ok(GradCheckReport {
        loss_id: id,
        instance: index,
        max_rel_err,
        worst_coordinate,
        tolerance,
        passed: max_rel_err <= tolerance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryConfig {
    pub seed: u64,
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    pub losses: Vec<LossId>,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            losses: LossId::ALL.to_vec(),
        }
    }
}

/// Every configured loss on every instance; reports ordered by loss, then
/// instance, regardless of how the work was scheduled.
pub fn run_battery(cfg: &BatteryConfig) -> Result<Vec<GradCheckReport>> {
    if cfg.step.is_nan() || cfg.step <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {}",
            cfg.step
        )));
    }
    let instances: Vec<Instance> = (0..cfg.instances).map(|i| random_instance(cfg.seed, i)).collect();
    let jobs: Vec<(LossId, usize)> = cfg
        .losses
        .iter()
        .flat_map(|&l| (0..cfg.instances).map(move |i| (l, i)))
        .collect();
    jobs.par_iter()
        .map(|&(l, i)| check_gradient(l, &instances[i], i, cfg.step, cfg.tolerance))
        .collect()
}

pub const CANCELLATION_TOL: f64 = 1e-10;

/// Z-free losses against the same losses rebuilt from full implicit rewards
/// `r(m,x,y) = β ρ(y│m) + β ln Z(m,x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CancellationReport {
    pub dpo_m: f64,
    pub dpo_m_explicit: f64,
    pub pair_terms: [f64; 2],
    pub pair_terms_explicit: [f64; 2],
    /// Largest gap among the same-conditioning comparisons above.
    pub max_shared_gap: f64,
    /// True iff every same-conditioning pair cancels within [`CANCELLATION_TOL`].
    pub cancels: bool,
    pub c: f64,
    pub vco: f64,
    pub vco_explicit: f64,
    /// Corrected contrastive loss as computed by the objectives code path.
    pub vco_star: f64,
    pub vco_discrepancy: f64,
}

pub fn cancellation_check(
    sample: &SymmetricSample,
    params: &PolicyParams,
    ref_params: &PolicyParams,
    reward: &dyn Reward,
    hp: &HyperParams,
) -> Result<CancellationReport> {
    let beta = hp.beta;
    let (m, mc, x) = (&sample.image, &sample.image_c, &sample.prompt);
    let rho = |image: &ImageFeat, y| log_ratio(params, ref_params, image, x, y);
    let log_z_m = log_partition_z(ref_params, reward, m, x, hp)?;
    let log_z_c = log_partition_z(ref_params, reward, mc, x, hp)?;
    let full_m = |y| -> Result<f64> { Ok(beta * rho(m, y)? + beta * log_z_m) };
    let full_c = |y| -> Result<f64> { Ok(beta * rho(mc, y)? + beta * log_z_c) };

    let single = std::slice::from_ref(sample);
    let dpo_m = objectives::loss_dpo_m(single, params, ref_params, hp)?.0.total;
    let dpo_m_explicit = -log_sigmoid(full_m(sample.y_w)? - full_m(sample.y_l)?);

    let pair_terms = [
        -log_sigmoid(beta * (rho(m, sample.y_w)? - rho(m, sample.y_w_c)?)),
        -log_sigmoid(beta * (rho(mc, sample.y_w_c)? - rho(mc, sample.y_w)?)),
    ];
    let pair_terms_explicit = [
        -log_sigmoid(full_m(sample.y_w)? - full_m(sample.y_w_c)?),
        -log_sigmoid(full_c(sample.y_w_c)? - full_c(sample.y_w)?),
    ];
    let pair_loss = objectives::loss_pair(single, params, ref_params, hp)?.0.total;

    let max_shared_gap = [
        (dpo_m - dpo_m_explicit).abs(),
        (pair_terms[0] - pair_terms_explicit[0]).abs(),
        (pair_terms[1] - pair_terms_explicit[1]).abs(),
        (pair_loss - (pair_terms_explicit[0] + pair_terms_explicit[1])).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);

    let vco = objectives::loss_vco(single, params, ref_params, hp)?.0.total;
    let vco_explicit = -log_sigmoid(full_m(sample.y_w)? - full_c(sample.y_w)?);
    let vco_star = partition::loss_vco_star(single, params, ref_params, reward, hp)?
        .0
        .total;

    Ok(CancellationReport {
        dpo_m,
        dpo_m_explicit,
        pair_terms,
        pair_terms_explicit,
        max_shared_gap,
        cancels: max_shared_gap <= CANCELLATION_TOL,
        c: beta * (log_z_m - log_z_c),
        vco,
        vco_explicit,
        vco_star,
        vco_discrepancy: (vco - vco_explicit).abs(),
    })
}

pub type LossFn = fn(&[SymmetricSample], &PolicyParams, &PolicyParams, &HyperParams) -> Result<(LossValue, GradMatrix)>;

pub const SYMMETRY_TOL: f64 = 1e-12;

/// True iff each loss gives the same value (within [`SYMMETRY_TOL`]) on the
/// sample and on its arm-swapped copy.
pub fn symmetry_check_with(
    sample: &SymmetricSample,
    params: &PolicyParams,
    ref_params: &PolicyParams,
    hp: &HyperParams,
    losses: &[LossFn],
) -> Result<bool> {
    let original = std::slice::from_ref(sample);
    let swapped = [sample.swap_arms()];
    for loss in losses {
        let a = loss(original, params, ref_params, hp)?.0.total;
        let b = loss(&swapped, params, ref_params, hp)?.0.total;
        let gap = (a - b).abs();
        if gap.is_nan() || gap > SYMMETRY_TOL {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Arm-swap invariance of the pairwise, margin and anchored losses.
pub fn symmetry_check(
    sample: &SymmetricSample,
    params: &PolicyParams,
    ref_params: &PolicyParams,
    hp: &HyperParams,
) -> Result<bool> {
    symmetry_check_with(
        sample,
        params,
        ref_params,
        hp,
        &[objectives::loss_pair, objectives::loss_margin, objectives::loss_ancpo],
    )
}
