//! Log-linear softmax policy over an enumerated response catalog.
//!
//! `π(y | m, x) = softmax(Wᵀ φ(m, x))_y` where `φ` is a fixed feature map of
//! the image and the prompt. Everything here is exact: log-probabilities,
//! full distributions and parameter gradients are closed-form.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{ImageFeat, Prompt, ResponseId, WorldShape};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::logsumexp;

/// How an `(image, prompt)` pair is laid out as a feature vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    /// `[image ‖ one_hot(prompt) ‖ 1]`, `d = d_img + n_prompts + 1`.
    ///
    /// Prompts share every image weight, so the policy cannot condition which
    /// attributes matter on the prompt.
    Concat,
    /// `[one_hot(prompt) ⊗ (2·image − 1) ‖ one_hot(prompt) ‖ 1]`,
    /// `d = d_img·n_prompts + n_prompts + 1`. The centered image lands in the
    /// block owned by the prompt, which lets a log-linear policy represent the
    /// correct answer for every prompt at once. Centering gives an absent
    /// attribute negative evidence instead of none.
    #[default]
    PromptGated,
}

impl FeatureMap {
    pub fn name(self) -> &'static str {
        match self {
            FeatureMap::Concat => "concat",
            FeatureMap::PromptGated => "gated",
        }
    }
}

impl std::str::FromStr for FeatureMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FeatureMap::Concat),
            "gated" | "prompt_gated" => Ok(FeatureMap::PromptGated),
            other => Err(Error::Config(format!("unknown feature map '{other}'"))),
        }
    }
}

/// World shape plus feature layout; fixes the shape of the weight matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PolicyLayout {
    pub world: WorldShape,
    pub feature_map: FeatureMap,
}

impl PolicyLayout {
    pub fn new(world: WorldShape, feature_map: FeatureMap) -> Self {
        Self { world, feature_map }
    }

    pub fn concat(world: WorldShape) -> Self {
        Self::new(world, FeatureMap::Concat)
    }

    pub fn feature_dim(&self) -> usize {
        let WorldShape { d_img, n_prompts, .. } = self.world;
        match self.feature_map {
            FeatureMap::Concat => d_img + n_prompts + 1,
            FeatureMap::PromptGated => d_img * n_prompts + n_prompts + 1,
        }
    }

    pub fn catalog_size(&self) -> usize {
        self.world.catalog_size()
    }

    /// Row of the weight matrix holding the one-hot entry for `prompt`.
    fn prompt_row(&self, prompt: usize) -> usize {
        self.feature_dim() - 1 - self.world.n_prompts + prompt
    }
}

/// The conditioning `(m, x)` as a single vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

pub fn context_features(image: &ImageFeat, prompt: &Prompt, layout: &PolicyLayout) -> Result<FeatureVector> {
    let WorldShape { d_img, n_prompts, .. } = layout.world;
    if image.len() != d_img {
        return Err(Error::Config(format!(
            "image has {} attributes, world expects {d_img}",
            image.len()
        )));
    }
    if prompt.id >= n_prompts {
        return Err(Error::Config(format!(
            "prompt id {} out of range for {n_prompts} prompts",
            prompt.id
        )));
    }
    let mut f = vec![0.0; layout.feature_dim()];
    match layout.feature_map {
        FeatureMap::Concat => f[..d_img].copy_from_slice(image.values()),
        FeatureMap::PromptGated => {
            let block = &mut f[prompt.id * d_img..(prompt.id + 1) * d_img];
            for (slot, v) in block.iter_mut().zip(image.values()) {
                *slot = 2.0 * v - 1.0;
            }
        }
    }
    f[layout.prompt_row(prompt.id)] = 1.0;
    *f.last_mut().expect("feature vector is never empty") = 1.0;
    Ok(FeatureVector(f))
}

/// Weight matrix `W` of shape `d × K`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    layout: PolicyLayout,
    weights: Matrix,
}

impl PolicyParams {
    pub fn zeros(layout: PolicyLayout) -> Self {
        let weights = Matrix::zeros(layout.feature_dim(), layout.catalog_size());
        Self { layout, weights }
    }

    pub fn from_weights(layout: PolicyLayout, weights: Matrix) -> Result<Self> {
        let expected = (layout.feature_dim(), layout.catalog_size());
        if weights.shape() != expected {
            return Err(Error::Config(format!(
                "weight shape {:?} does not match layout {:?}",
                weights.shape(),
                expected
            )));
        }
        if !weights.is_finite() {
            return Err(Error::Numeric("non-finite policy weight".into()));
        }
        Ok(Self { layout, weights })
    }

    pub fn layout(&self) -> &PolicyLayout {
        &self.layout
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    /// Same layout, different weights. Used by finite-difference probes.
    pub fn with_weights(&self, weights: Matrix) -> Self {
        assert_eq!(weights.shape(), self.weights.shape());
        Self {
            layout: self.layout,
            weights,
        }
    }

    pub fn logits(&self, features: &FeatureVector) -> Vec<f64> {
        let k = self.weights.cols();
        let mut logits = vec![0.0; k];
        for (r, &f) in features.values().iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            for (l, w) in logits.iter_mut().zip(self.weights.row(r)) {
                *l += f * w;
            }
        }
        logits
    }
}

/// The policy evaluated at one conditioning: features and the full
/// log-distribution over the catalog.
#[derive(Clone, Debug)]
pub struct ContextEval {
    pub features: FeatureVector,
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl ContextEval {
    pub fn log_prob(&self, y: ResponseId) -> f64 {
        self.log_probs[y.index()]
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    /// `grad += Σ_y a_y ∇_W log π(y)`, using
    /// `∇_W log π(y) = φ ⊗ (e_y − π)`.
    pub fn accumulate_grad(&self, grad: &mut Matrix, coeffs: &[f64]) {
        let total: f64 = coeffs.iter().sum();
        let v: Vec<f64> = coeffs
            .iter()
            .zip(&self.log_probs)
            .map(|(a, lp)| a - total * lp.exp())
            .collect();
        grad.add_outer(self.features.values(), &v);
    }
}

pub fn evaluate(params: &PolicyParams, image: &ImageFeat, prompt: &Prompt) -> Result<ContextEval> {
    let features = context_features(image, prompt, &params.layout)?;
    let logits = params.logits(&features);
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("non-finite logit (check policy parameters)".into()));
    }
    let lse = logsumexp(&logits);
    let log_probs = logits.iter().map(|l| l - lse).collect();
    Ok(ContextEval {
        features,
        logits,
        log_probs,
    })
}

fn check_response(params: &PolicyParams, y: ResponseId) -> Result<()> {
    if y.index() >= params.layout.catalog_size() {
        return Err(Error::Config(format!(
            "response {y} out of catalog of size {}",
            params.layout.catalog_size()
        )));
    }
    Ok(())
}

pub fn log_prob(params: &PolicyParams, image: &ImageFeat, prompt: &Prompt, y: ResponseId) -> Result<f64> {
    check_response(params, y)?;
    Ok(evaluate(params, image, prompt)?.log_prob(y))
}

pub fn log_prob_grad(params: &PolicyParams, image: &ImageFeat, prompt: &Prompt, y: ResponseId) -> Result<Matrix> {
    check_response(params, y)?;
    let eval = evaluate(params, image, prompt)?;
    let mut grad = Matrix::zeros(params.weights.rows(), params.weights.cols());
    let mut coeffs = vec![0.0; params.layout.catalog_size()];
    coeffs[y.index()] = 1.0;
    eval.accumulate_grad(&mut grad, &coeffs);
    Ok(grad)
}

pub fn full_distribution(params: &PolicyParams, image: &ImageFeat, prompt: &Prompt) -> Result<Vec<f64>> {
    Ok(evaluate(params, image, prompt)?.probs())
}

/// Greedy response; ties go to the lowest index.
pub fn argmax_response(params: &PolicyParams, image: &ImageFeat, prompt: &Prompt) -> Result<ResponseId> {
    let eval = evaluate(params, image, prompt)?;
    Ok(ResponseId(argmax_lowest(&eval.logits) as u32))
}

pub(crate) fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

const MAGIC: &[u8; 4] = b"SYMP";
const VERSION: u8 = 1;

impl PolicyParams {
    /// Checkpoint layout: `"SYMP"`, version byte, then `d, K, n_prompts,
    /// d_img` as little-endian u32, then the row-major weights as
    /// little-endian f64.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let (d, k) = self.weights.shape();
        let mut out = Vec::with_capacity(5 + 16 + 8 * d * k);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for v in [d, k, self.layout.world.n_prompts, self.layout.world.d_img] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for w in self.weights.as_slice() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::Checkpoint(why.to_string());
        if bytes.len() < 21 || &bytes[..4] != MAGIC {
            return Err(bad("missing SYMP magic"));
        }
        if bytes[4] != VERSION {
            return Err(bad(&format!("unsupported version {}", bytes[4])));
        }
        let header: Vec<usize> = bytes[5..21]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let (d, k, n_prompts, d_img) = (header[0], header[1], header[2], header[3]);
        if !k.is_power_of_two() {
            return Err(bad(&format!("catalog size {k} is not a power of two")));
        }
        let q = k.trailing_zeros() as usize;
        let world = WorldShape { d_img, n_prompts, q };
        let feature_map = [FeatureMap::Concat, FeatureMap::PromptGated]
            .into_iter()
            .find(|&m| PolicyLayout::new(world, m).feature_dim() == d)
            .ok_or_else(|| bad(&format!("feature dimension {d} matches no layout")))?;
        let body = &bytes[21..];
        if body.len() != 8 * d * k {
            return Err(bad(&format!(
                "expected {} weight bytes, found {}",
                8 * d * k,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let weights = Matrix::from_vec(d, k, data).expect("length checked above");
        PolicyParams::from_weights(PolicyLayout::new(world, feature_map), weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_checkpoint_bytes(&bytes)
    }
}
