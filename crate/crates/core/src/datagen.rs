//! Synthetic hallucination world.
//!
//! Images are binary attribute vectors, prompts ask about `q` attributes, and
//! a response is a `q`-bit assertion vector. The preferred response states the
//! truth; the hallucinated one flips `flip_count` assertions. Each sample also
//! carries a contrastive image (nearest neighbor, black, cropped, noisy, or a
//! lossy reconstruction) and the preferred response for that image, which
//! must differ from the original preferred response.

use std::fmt;
use std::path::Path;

use log::info;
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::config_hash;
use crate::domain::{
    read_samples, validate_sample, write_samples, ImageFeat, Prompt, ResponseId, SymmetricSample, WorldShape,
};
use crate::error::{Error, Result};
use crate::rng::{sample_rng, world_rng, LabRng};

/// Contrastive candidates tried per sample before it is dropped.
pub const MAX_ATTEMPTS: usize = 8;
/// Generation fails when more than this fraction of samples is dropped.
pub const MAX_DROP_RATE: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveMode {
    /// Nearest neighbor by cosine similarity among the other images.
    #[default]
    Similar,
    /// All-zero image.
    Black,
    /// A random contiguous half of the attributes kept, the rest zeroed.
    Cropped,
    /// Gaussian noise added, then clamped to `[0, 1]`.
    Noisy,
    /// Rounded attributes with `synthetic_drop` random positions zeroed.
    Synthetic,
}

impl ContrastiveMode {
    pub const ALL: [ContrastiveMode; 5] = [
        ContrastiveMode::Similar,
        ContrastiveMode::Black,
        ContrastiveMode::Cropped,
        ContrastiveMode::Noisy,
        ContrastiveMode::Synthetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ContrastiveMode::Similar => "similar",
            ContrastiveMode::Black => "black",
            ContrastiveMode::Cropped => "cropped",
            ContrastiveMode::Noisy => "noisy",
            ContrastiveMode::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for ContrastiveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ContrastiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ContrastiveMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown contrastive mode '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub d_img: usize,
    pub n_prompts: usize,
    pub q: usize,
    pub n_images: usize,
    pub flip_count: usize,
    pub contrastive_mode: ContrastiveMode,
    pub noise_sigma: f64,
    /// Positions zeroed by the synthetic reconstruction.
    pub synthetic_drop: usize,
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            d_img: 12,
            n_prompts: 4,
            q: 3,
            n_images: 512,
            flip_count: 1,
            contrastive_mode: ContrastiveMode::Similar,
            noise_sigma: 0.8,
            synthetic_drop: 2,
            heldout_fraction: 0.1,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn shape(&self) -> WorldShape {
        WorldShape {
            d_img: self.d_img,
            n_prompts: self.n_prompts,
            q: self.q,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape().check()?;
        if self.flip_count == 0 || self.flip_count > self.q {
            return Err(Error::Config(format!(
                "flip_count must lie in [1, q = {}], got {}",
                self.q, self.flip_count
            )));
        }
        if self.n_images < 2 {
            return Err(Error::Config("at least two images are required".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.synthetic_drop > self.d_img {
            return Err(Error::Config(format!(
                "synthetic_drop {} exceeds d_img {}",
                self.synthetic_drop, self.d_img
            )));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::Config(format!(
                "heldout_fraction must lie in [0, 1), got {}",
                self.heldout_fraction
            )));
        }
        Ok(())
    }

    pub fn n_heldout_images(&self) -> usize {
        (self.n_images as f64 * self.heldout_fraction).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub images: Vec<ImageFeat>,
    pub prompts: Vec<Prompt>,
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = world_rng(cfg.seed);
    let images = (0..cfg.n_images)
        .map(|_| {
            ImageFeat(
                (0..cfg.d_img)
                    .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
                    .collect(),
            )
        })
        .collect();
    let prompts = if cfg.n_prompts * cfg.q <= cfg.d_img {
        // Disjoint queried blocks from one random permutation.
        let mut perm: Vec<usize> = (0..cfg.d_img).collect();
        perm.shuffle(&mut rng);
        (0..cfg.n_prompts)
            .map(|id| {
                let mut queried = perm[id * cfg.q..(id + 1) * cfg.q].to_vec();
                queried.sort_unstable();
                Prompt { id, queried }
            })
            .collect()
    } else {
        (0..cfg.n_prompts)
            .map(|id| {
                let mut queried = sample_indices(&mut rng, cfg.d_img, cfg.q).into_vec();
                queried.sort_unstable();
                Prompt { id, queried }
            })
            .collect()
    };
    Ok(World { images, prompts })
}

/// The response asserting the (thresholded) truth of every queried attribute.
pub fn preferred_response(image: &ImageFeat, prompt: &Prompt) -> ResponseId {
    let id = prompt
        .queried
        .iter()
        .enumerate()
        .fold(0u32, |acc, (t, &pos)| acc | (u32::from(image.bit(pos)) << t));
    ResponseId(id)
}

/// The preferred response with `flip_count` distinct, uniformly chosen
/// assertions negated.
pub fn hallucinated_response(image: &ImageFeat, prompt: &Prompt, flip_count: usize, rng: &mut LabRng) -> ResponseId {
    let preferred = preferred_response(image, prompt);
    let mask = sample_indices(rng, prompt.q(), flip_count.min(prompt.q()))
        .into_iter()
        .fold(0u32, |acc, t| acc | (1 << t));
    ResponseId(preferred.0 ^ mask)
}

pub fn cosine_similarity(a: &ImageFeat, b: &ImageFeat) -> f64 {
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    let na = a.values().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Other images ordered by decreasing cosine similarity to `images[idx]`
/// (ties by lower index), with the image itself and exact duplicates removed.
pub fn ranked_neighbors(images: &[ImageFeat], idx: usize) -> Vec<usize> {
    let me = &images[idx];
    let mut candidates: Vec<(f64, usize)> = images
        .iter()
        .enumerate()
        .filter(|&(j, img)| j != idx && img != me)
        .map(|(j, img)| (cosine_similarity(me, img), j))
        .collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    candidates.into_iter().map(|(_, j)| j).collect()
}

pub fn nearest_neighbor_pair(images: &[ImageFeat], idx: usize) -> Result<usize> {
    if images.len() < 2 {
        return Err(Error::Generation("nearest neighbor needs at least two images".into()));
    }
    ranked_neighbors(images, idx)
        .first()
        .copied()
        .ok_or_else(|| Error::Generation(format!("image {idx} has no non-duplicate neighbor")))
}

/// Positions zeroed by a crop starting at `start`: everything outside the
/// retained window of `d / 2` attributes.
fn crop(image: &ImageFeat, rng: &mut LabRng) -> ImageFeat {
    let d = image.len();
    let keep = d / 2;
    let start = rng.random_range(0..=d - keep);
    ImageFeat(
        image
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| if (start..start + keep).contains(&i) { v } else { 0.0 })
            .collect(),
    )
}

/// A contrastive variant of `pool[idx]`. `Similar` returns the nearest
/// neighbor; every other mode transforms the image itself.
pub fn contrastive_image(
    pool: &[ImageFeat],
    idx: usize,
    mode: ContrastiveMode,
    cfg: &WorldConfig,
    rng: &mut LabRng,
) -> Result<ImageFeat> {
    let image = &pool[idx];
    Ok(match mode {
        ContrastiveMode::Similar => pool[nearest_neighbor_pair(pool, idx)?].clone(),
        ContrastiveMode::Black => ImageFeat::zeros(image.len()),
        ContrastiveMode::Cropped => crop(image, rng),
        ContrastiveMode::Noisy => {
            if cfg.noise_sigma == 0.0 {
                image.clone()
            } else {
                let normal =
                    Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
                ImageFeat(
                    image
                        .values()
                        .iter()
                        .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0))
                        .collect(),
                )
            }
        }
        ContrastiveMode::Synthetic => {
            let mut out = image.rounded();
            for pos in sample_indices(rng, image.len(), cfg.synthetic_drop.min(image.len())) {
                out.0[pos] = 0.0;
            }
            out
        }
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropStats {
    pub candidates: usize,
    pub emitted: usize,
    /// No contrastive candidate with a different preferred response within
    /// [`MAX_ATTEMPTS`].
    pub dropped_same_response: usize,
    /// Every other image is an exact duplicate.
    pub dropped_no_neighbor: usize,
}

impl DropStats {
    pub fn dropped(&self) -> usize {
        self.dropped_same_response + self.dropped_no_neighbor
    }

    pub fn drop_rate(&self) -> f64 {
        if self.candidates == 0 {
            0.0
        } else {
            self.dropped() as f64 / self.candidates as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub train: Vec<SymmetricSample>,
    pub heldout: Vec<SymmetricSample>,
    pub drops: DropStats,
}

enum Outcome {
    Sample(SymmetricSample),
    SameResponse,
    NoNeighbor,
}

fn build_sample(cfg: &WorldConfig, world: &World, neighbors: Option<&[usize]>, i: usize, p: usize) -> Result<Outcome> {
    let prompt = &world.prompts[p];
    let image = &world.images[i];
    let mut rng = sample_rng(cfg.seed, i * cfg.n_prompts + p);
    let y_w = preferred_response(image, prompt);
    let y_l = hallucinated_response(image, prompt, cfg.flip_count, &mut rng);

    match neighbors {
        Some(ranked) => {
            if ranked.is_empty() {
                return Ok(Outcome::NoNeighbor);
            }
            for &j in ranked.iter().take(MAX_ATTEMPTS) {
                let image_c = &world.images[j];
                let y_w_c = preferred_response(image_c, prompt);
                if y_w_c != y_w {
                    return Ok(Outcome::Sample(SymmetricSample {
                        prompt: prompt.clone(),
                        image: image.clone(),
                        image_c: image_c.clone(),
                        y_w,
                        y_l,
                        y_w_c,
                        neighbor_id: j as i64,
                    }));
                }
            }
        }
        None => {
            for _ in 0..MAX_ATTEMPTS {
                let image_c = contrastive_image(&world.images, i, cfg.contrastive_mode, cfg, &mut rng)?;
                let y_w_c = preferred_response(&image_c.rounded(), prompt);
                if y_w_c != y_w {
                    return Ok(Outcome::Sample(SymmetricSample {
                        prompt: prompt.clone(),
                        image: image.clone(),
                        image_c,
                        y_w,
                        y_l,
                        y_w_c,
                        neighbor_id: -1,
                    }));
                }
            }
        }
    }
    Ok(Outcome::SameResponse)
}

pub fn build_preference_dataset(cfg: &WorldConfig) -> Result<Dataset> {
    let world = generate_world(cfg)?;
    let neighbors: Option<Vec<Vec<usize>>> = (cfg.contrastive_mode == ContrastiveMode::Similar).then(|| {
        (0..cfg.n_images)
            .into_par_iter()
            .map(|i| ranked_neighbors(&world.images, i))
            .collect()
    });

    let outcomes: Vec<Outcome> = (0..cfg.n_images * cfg.n_prompts)
        .into_par_iter()
        .map(|s| {
            let (i, p) = (s / cfg.n_prompts, s % cfg.n_prompts);
            build_sample(cfg, &world, neighbors.as_ref().map(|n| n[i].as_slice()), i, p)
        })
        .collect::<Result<_>>()?;

    let first_heldout = cfg.n_images - cfg.n_heldout_images();
    let mut drops = DropStats {
        candidates: outcomes.len(),
        ..DropStats::default()
    };
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for (s, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Outcome::Sample(sample) => {
                drops.emitted += 1;
                if s / cfg.n_prompts >= first_heldout {
                    heldout.push(sample);
                } else {
                    train.push(sample);
                }
            }
            Outcome::SameResponse => drops.dropped_same_response += 1,
            Outcome::NoNeighbor => drops.dropped_no_neighbor += 1,
        }
    }
    info!(
        "generated {} samples ({} train, {} held out); dropped {} without a distinct contrastive response, {} without a neighbor",
        drops.emitted,
        train.len(),
        heldout.len(),
        drops.dropped_same_response,
        drops.dropped_no_neighbor
    );
    if drops.drop_rate() > MAX_DROP_RATE {
        return Err(Error::Generation(format!(
            "{:.1}% of samples dropped; the world is too small or degenerate",
            100.0 * drops.drop_rate()
        )));
    }
    Ok(Dataset {
        config: cfg.clone(),
        train,
        heldout,
        drops,
    })
}

/// Sidecar written next to the sample files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config_hash: String,
    pub config: WorldConfig,
    pub drops: DropStats,
    pub n_train: usize,
    pub n_heldout: usize,
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const META_FILE: &str = "meta.json";

impl Dataset {
    pub fn shape(&self) -> WorldShape {
        self.config.shape()
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            config_hash: self.config_hash(),
            config: self.config.clone(),
            drops: self.drops.clone(),
            n_train: self.train.len(),
            n_heldout: self.heldout.len(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_samples(
            std::io::BufWriter::new(std::fs::File::create(dir.join(TRAIN_FILE))?),
            &self.train,
        )?;
        write_samples(
            std::io::BufWriter::new(std::fs::File::create(dir.join(HELDOUT_FILE))?),
            &self.heldout,
        )?;
        let mut meta = serde_json::to_string_pretty(&self.meta())?;
        meta.push('\n');
        std::fs::write(dir.join(META_FILE), meta)?;
        Ok(())
    }

    /// Loads and validates a dataset directory. Any malformed or degenerate
    /// sample rejects the whole dataset.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(META_FILE))?)?;
        meta.config.validate()?;
        let shape = meta.config.shape();
        let mut parts = Vec::new();
        for file in [TRAIN_FILE, HELDOUT_FILE] {
            let path = dir.join(file);
            let samples = read_samples(&path)?;
            for (i, s) in samples.iter().enumerate() {
                let report = validate_sample(s, &shape);
                if !report.is_empty() {
                    return Err(Error::Record {
                        path: path.clone(),
                        line: i + 1,
                        reason: report.to_string(),
                    });
                }
            }
            parts.push(samples);
        }
        let heldout = parts.pop().expect("two parts");
        let train = parts.pop().expect("two parts");
        Ok(Self {
            config: meta.config,
            train,
            heldout,
            drops: meta.drops,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{GroundTruthReward, Reward};
    use crate::rng::stream_rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn img(v: &[f64]) -> ImageFeat {
        ImageFeat(v.to_vec())
    }

    fn prompt3() -> Prompt {
        Prompt {
            id: 0,
            queried: vec![0, 1, 2],
        }
    }

    #[test]
    fn world_is_deterministic() {
        let cfg = WorldConfig::default();
        assert_eq!(generate_world(&cfg).unwrap(), generate_world(&cfg).unwrap());
        let other = WorldConfig { seed: 8, ..cfg };
        assert_ne!(
            generate_world(&other).unwrap().images,
            generate_world(&WorldConfig::default()).unwrap().images
        );
    }

    #[test]
    fn forced_prompt_queries_everything() {
        let cfg = WorldConfig {
            d_img: 2,
            q: 2,
            n_prompts: 1,
            n_images: 4,
            ..WorldConfig::default()
        };
        assert_eq!(generate_world(&cfg).unwrap().prompts[0].queried, vec![0, 1]);
    }

    #[test]
    fn default_prompts_partition_attributes() {
        let world = generate_world(&WorldConfig::default()).unwrap();
        let mut all: Vec<usize> = world.prompts.iter().flat_map(|p| p.queried.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        for p in &world.prompts {
            assert!(p.queried.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn overlapping_prompts_when_attributes_run_out() {
        let cfg = WorldConfig {
            d_img: 4,
            q: 3,
            n_prompts: 3,
            ..WorldConfig::default()
        };
        let world = generate_world(&cfg).unwrap();
        for p in &world.prompts {
            assert_eq!(p.q(), 3);
            assert!(p.queried.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn attribute_marginals_are_near_one_half() {
        // 4.5 standard errors per attribute, 4 for the pooled mean.
        let world = generate_world(&WorldConfig::default()).unwrap();
        let n = world.images.len() as f64;
        let mut pooled = 0.0;
        for a in 0..12 {
            let mean = world.images.iter().map(|im| im.0[a]).sum::<f64>() / n;
            assert!((mean - 0.5).abs() <= 4.5 * 0.5 / n.sqrt(), "attribute {a}: {mean}");
            pooled += mean / 12.0;
        }
        assert!((pooled - 0.5).abs() <= 4.0 * 0.5 / (12.0 * n).sqrt(), "pooled {pooled}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            WorldConfig {
                q: 13,
                ..WorldConfig::default()
            },
            WorldConfig {
                q: 7,
                d_img: 12,
                ..WorldConfig::default()
            },
            WorldConfig {
                flip_count: 0,
                ..WorldConfig::default()
            },
            WorldConfig {
                flip_count: 4,
                ..WorldConfig::default()
            },
            WorldConfig {
                n_images: 1,
                ..WorldConfig::default()
            },
            WorldConfig {
                noise_sigma: -1.0,
                ..WorldConfig::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(generate_world(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn preferred_response_encodes_truth() {
        let p = prompt3();
        assert_eq!(preferred_response(&img(&[0.0, 0.0, 0.0, 1.0]), &p), ResponseId(0));
        assert_eq!(preferred_response(&img(&[1.0, 1.0, 1.0, 0.0]), &p), ResponseId(7));
        let base = img(&[1.0, 0.0, 1.0, 0.0]);
        for t in 0..3 {
            let mut flipped = base.clone();
            flipped.0[t] = 1.0 - flipped.0[t];
            let a = preferred_response(&base, &p);
            let b = preferred_response(&flipped, &p);
            assert_eq!(a.0 ^ b.0, 1 << t);
        }
    }

    #[test]
    fn hallucinations_flip_exactly_flip_count_bits() {
        let p = prompt3();
        let image = img(&[1.0, 0.0, 1.0]);
        let mut rng = stream_rng(1, 1);
        let y_w = preferred_response(&image, &p);
        assert_eq!(hallucinated_response(&image, &p, 3, &mut rng).0, !y_w.0 & 0b111);
        for flips in 1..=3 {
            for _ in 0..50 {
                let y_l = hallucinated_response(&image, &p, flips, &mut rng);
                assert_eq!(y_l.hamming(y_w) as usize, flips);
            }
        }
    }

    #[test]
    fn single_flips_are_uniform_over_positions() {
        let p = prompt3();
        let image = img(&[0.0, 1.0, 1.0]);
        let y_w = preferred_response(&image, &p);
        let mut rng = stream_rng(2, 2);
        let n = 10_000;
        let mut counts = [0f64; 3];
        for _ in 0..n {
            let y_l = hallucinated_response(&image, &p, 1, &mut rng);
            counts[(y_l.0 ^ y_w.0).trailing_zeros() as usize] += 1.0;
        }
        let expected = n as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        let p_value = 1.0 - ChiSquared::new(2.0).unwrap().cdf(chi2);
        assert!(p_value > 0.01, "chi2 = {chi2}, p = {p_value}");
    }

    #[test]
    fn nearest_neighbor_examples() {
        let two = [img(&[1.0, 0.0]), img(&[0.0, 1.0])];
        assert_eq!(nearest_neighbor_pair(&two, 0).unwrap(), 1);
        assert_eq!(nearest_neighbor_pair(&two, 1).unwrap(), 0);

        let three = [img(&[1.0, 0.0, 0.0]), img(&[1.0, 1.0, 0.0]), img(&[0.0, 0.0, 1.0])];
        assert_eq!(nearest_neighbor_pair(&three, 0).unwrap(), 1);

        // a -> b but b -> c: cos(a,b) = 1/√2, cos(b,c) = 2/√6.
        let asym = [img(&[1.0, 0.0, 0.0]), img(&[1.0, 1.0, 0.0]), img(&[1.0, 1.0, 1.0])];
        assert_eq!(nearest_neighbor_pair(&asym, 0).unwrap(), 1);
        assert_eq!(nearest_neighbor_pair(&asym, 1).unwrap(), 2);
    }

    #[test]
    fn nearest_neighbor_ties_and_duplicates() {
        let images = [img(&[1.0, 0.0]), img(&[1.0, 0.0]), img(&[1.0, 1.0]), img(&[1.0, 1.0])];
        // The duplicate at index 1 is skipped; the tie between 2 and 3 goes to 2.
        assert_eq!(nearest_neighbor_pair(&images, 0).unwrap(), 2);
        let dupes = [img(&[1.0, 0.0]), img(&[1.0, 0.0])];
        assert!(matches!(nearest_neighbor_pair(&dupes, 0), Err(Error::Generation(_))));
        assert!(nearest_neighbor_pair(&dupes[..1], 0).is_err());
    }

    #[test]
    fn contrastive_modes() {
        let cfg = WorldConfig::default();
        let mut rng = stream_rng(3, 3);
        let world = generate_world(&cfg).unwrap();
        let pool = &world.images;
        for i in 0..20 {
            let black = contrastive_image(pool, i, ContrastiveMode::Black, &cfg, &mut rng).unwrap();
            assert!(black.0.iter().all(|&v| v == 0.0));

            let ones = vec![img(&[1.0; 12]), img(&[1.0; 12])];
            let cropped = contrastive_image(&ones, 0, ContrastiveMode::Cropped, &cfg, &mut rng).unwrap();
            assert_eq!(cropped.0.iter().filter(|&&v| v == 0.0).count(), 6);
            let retained: Vec<usize> = (0..12).filter(|&k| cropped.0[k] == 1.0).collect();
            assert!(retained.windows(2).all(|w| w[1] == w[0] + 1));

            let noisy = contrastive_image(pool, i, ContrastiveMode::Noisy, &cfg, &mut rng).unwrap();
            assert!(noisy.0.iter().all(|v| (0.0..=1.0).contains(v)));
            let quiet = WorldConfig {
                noise_sigma: 0.0,
                ..cfg.clone()
            };
            assert_eq!(
                contrastive_image(pool, i, ContrastiveMode::Noisy, &quiet, &mut rng).unwrap(),
                pool[i]
            );

            let synth = contrastive_image(pool, i, ContrastiveMode::Synthetic, &cfg, &mut rng).unwrap();
            let changed = (0..12).filter(|&k| synth.0[k] != pool[i].0[k]).count();
            assert!(changed <= cfg.synthetic_drop);
            assert!(synth.0.iter().zip(&pool[i].0).all(|(s, o)| *s <= *o));

            let similar = contrastive_image(pool, i, ContrastiveMode::Similar, &cfg, &mut rng).unwrap();
            assert_eq!(similar, pool[nearest_neighbor_pair(pool, i).unwrap()]);
        }
        let odd = vec![img(&[1.0; 7]), img(&[1.0; 7])];
        let cropped = contrastive_image(&odd, 0, ContrastiveMode::Cropped, &cfg, &mut rng).unwrap();
        assert_eq!(cropped.0.iter().filter(|&&v| v == 0.0).count(), 4);
    }

    #[test]
    fn default_dataset_properties() {
        let cfg = WorldConfig::default();
        let ds = build_preference_dataset(&cfg).unwrap();
        assert!(ds.drops.drop_rate() < 0.10, "drop rate {}", ds.drops.drop_rate());
        assert_eq!(ds.drops.emitted + ds.drops.dropped(), cfg.n_images * cfg.n_prompts);
        assert_eq!(ds.train.len() + ds.heldout.len(), ds.drops.emitted);

        let world = generate_world(&cfg).unwrap();
        let reward = GroundTruthReward::default();
        for s in ds.train.iter().chain(&ds.heldout) {
            assert!(validate_sample(s, &cfg.shape()).is_empty());
            assert_ne!(s.y_w, s.y_w_c);
            assert_ne!(s.y_w, s.y_l);
            assert_eq!(s.image_c, world.images[s.neighbor_id as usize]);
            // y_w is the unique reward maximizer.
            let best = reward.reward(&s.image, &s.prompt, s.y_w);
            for y in 0..8 {
                if y != s.y_w.0 {
                    assert!(reward.reward(&s.image, &s.prompt, ResponseId(y)) < best);
                }
            }
        }

        // Similar pairs are at least as similar as the median image pair.
        let mut all = Vec::new();
        for i in 0..world.images.len() {
            for j in i + 1..world.images.len() {
                all.push(cosine_similarity(&world.images[i], &world.images[j]));
            }
        }
        all.sort_by(f64::total_cmp);
        let median = all[all.len() / 2];
        let pairs: Vec<f64> = ds
            .train
            .iter()
            .map(|s| cosine_similarity(&s.image, &s.image_c))
            .collect();
        let above = pairs.iter().filter(|&&c| c >= median).count() as f64 / pairs.len() as f64;
        assert!(
            above >= 0.95,
            "only {above} of pairs reach the median similarity {median}"
        );
    }

    #[test]
    fn non_similar_modes_build_valid_datasets() {
        for mode in [
            ContrastiveMode::Black,
            ContrastiveMode::Cropped,
            ContrastiveMode::Noisy,
            ContrastiveMode::Synthetic,
        ] {
            let cfg = WorldConfig {
                contrastive_mode: mode,
                n_images: 128,
                ..WorldConfig::default()
            };
            let ds = build_preference_dataset(&cfg).unwrap();
            for s in ds.train.iter().chain(&ds.heldout) {
                assert!(validate_sample(s, &cfg.shape()).is_empty(), "{mode}");
                assert_eq!(s.neighbor_id, -1);
                if mode == ContrastiveMode::Black {
                    assert!(s.image_c.0.iter().all(|&v| v == 0.0));
                    assert_eq!(s.y_w_c, ResponseId(0));
                }
            }
            if mode == ContrastiveMode::Black {
                // Every sample whose truth is "all false" collides with the black image.
                assert!(ds.drops.dropped_same_response > 0);
            }
        }
    }

    #[test]
    fn lossless_contrast_fails_generation() {
        // Rounding then zeroing nothing reproduces the image, so every
        // contrastive response equals the preferred one.
        let cfg = WorldConfig {
            n_images: 32,
            contrastive_mode: ContrastiveMode::Synthetic,
            synthetic_drop: 0,
            ..WorldConfig::default()
        };
        assert!(matches!(build_preference_dataset(&cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let cfg = WorldConfig {
            n_images: 64,
            ..WorldConfig::default()
        };
        let ds = build_preference_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        let first = std::fs::read(dir.path().join(TRAIN_FILE)).unwrap();
        build_preference_dataset(&cfg).unwrap().save(dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join(TRAIN_FILE)).unwrap(), first);
    }

    #[test]
    fn degenerate_samples_are_rejected_at_load_time() {
        let cfg = WorldConfig {
            n_images: 16,
            ..WorldConfig::default()
        };
        let mut ds = build_preference_dataset(&cfg).unwrap();
        ds.train[2].y_w_c = ds.train[2].y_w;
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        match Dataset::load(dir.path()) {
            Err(Error::Record { line, reason, .. }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("degenerate symmetric pair"));
            }
            other => panic!("expected a record error, got {other:?}"),
        }
    }
}
