//! Value types shared by every module, their JSONL encoding and validation.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attribute vector standing in for an image. Clean images are binary;
/// noised contrastive images take values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageFeat(pub Vec<f64>);

impl ImageFeat {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Attribute `i` read as a truth value (threshold 0.5).
    pub fn bit(&self, i: usize) -> bool {
        self.0[i] >= 0.5
    }

    /// Binary image obtained by thresholding every attribute at 0.5.
    pub fn rounded(&self) -> ImageFeat {
        ImageFeat(self.0.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub id: usize,
    /// Strictly increasing attribute indices the prompt asks about.
    pub queried: Vec<usize>,
}

impl Prompt {
    pub fn q(&self) -> usize {
        self.queried.len()
    }

    pub fn catalog_size(&self) -> usize {
        1usize << self.q()
    }
}

/// Index into a prompt's response catalog; bit `t` asserts the value of
/// attribute `queried[t]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResponseId(pub u32);

impl ResponseId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn asserts(self, t: usize) -> bool {
        (self.0 >> t) & 1 == 1
    }

    pub fn hamming(self, other: ResponseId) -> u32 {
        (self.0 ^ other.0).count_ones()
    }
}

impl fmt::Display for ResponseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One training record: the original arm `(image, y_w)` with its
/// hallucinated response `y_l`, and the contrastive arm `(image_c, y_w_c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricSample {
    pub prompt: Prompt,
    pub image: ImageFeat,
    pub image_c: ImageFeat,
    pub y_w: ResponseId,
    pub y_l: ResponseId,
    pub y_w_c: ResponseId,
    /// Index of the neighbor image for nearest-neighbor contrast, -1 otherwise.
    pub neighbor_id: i64,
}

impl SymmetricSample {
    /// Exchanges `(image, y_w)` with `(image_c, y_w_c)`; `y_l` is kept.
    pub fn swap_arms(&self) -> SymmetricSample {
        SymmetricSample {
            prompt: self.prompt.clone(),
            image: self.image_c.clone(),
            image_c: self.image.clone(),
            y_w: self.y_w_c,
            y_l: self.y_l,
            y_w_c: self.y_w,
            neighbor_id: self.neighbor_id,
        }
    }
}

/// Dimensions of a toy world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldShape {
    pub d_img: usize,
    pub n_prompts: usize,
    pub q: usize,
}

impl WorldShape {
    pub fn catalog_size(&self) -> usize {
        1usize << self.q
    }

    pub fn check(&self) -> Result<()> {
        if self.d_img == 0 || self.n_prompts == 0 {
            return Err(Error::Config("d_img and n_prompts must be positive".into()));
        }
        if self.q == 0 || self.q > self.d_img {
            return Err(Error::Config(format!(
                "q must satisfy 1 <= q <= d_img (q = {}, d_img = {})",
                self.q, self.d_img
            )));
        }
        if self.catalog_size() > 64 {
            return Err(Error::Config(format!("catalog size 2^{} exceeds 64", self.q)));
        }
        Ok(())
    }
}

/// Scalar knobs of the objectives and the optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub beta: f64,
    pub delta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub eta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Scale the margin Δ by β. Off by default: Δ is the unscaled log-ratio gap.
    #[serde(default)]
    pub margin_uses_beta: bool,
}

impl HyperParams {
    /// The published settings, including the 5e-6 learning rate intended for
    /// billion-parameter models. At toy scale this learning rate barely moves
    /// the parameters.
    pub fn paper() -> Self {
        Self {
            beta: 0.1,
            delta: 0.0,
            lambda: 0.5,
            gamma: 1e-4,
            eta: 1.0,
            lr: 5e-6,
            epochs: 2,
            batch_size: 64,
            margin_uses_beta: false,
        }
    }

    /// Published settings with a learning rate suited to the toy policy.
    pub fn toy() -> Self {
        Self {
            lr: 0.1,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("beta", self.beta),
            ("delta", self.delta),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("lr", self.lr),
        ];
        if let Some((name, v)) = reals.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Config(format!("{name} must be finite, got {v}")));
        }
        if self.beta <= 0.0 {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("lr", self.lr),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

impl Default for HyperParams {
    fn default() -> Self {
        Self::toy()
    }
}

/// One violated sample invariant.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    DegeneratePreferencePair,
    DegenerateSymmetricPair,
    ResponseOutOfCatalog {
        field: &'static str,
        id: u32,
        catalog: usize,
    },
    ImageLength {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    ImageValue {
        field: &'static str,
        index: usize,
        value: f64,
    },
    PromptOutOfRange {
        id: usize,
        n_prompts: usize,
    },
    QueryCount {
        expected: usize,
        got: usize,
    },
    QueriedPositions(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DegeneratePreferencePair => write!(f, "degenerate preference pair: y_w == y_l"),
            Violation::DegenerateSymmetricPair => write!(f, "degenerate symmetric pair: y_w == y_w_c"),
            Violation::ResponseOutOfCatalog { field, id, catalog } => {
                write!(f, "response out of catalog: {field} = {id} >= {catalog}")
            }
            Violation::ImageLength { field, expected, got } => {
                write!(f, "{field} has length {got}, expected {expected}")
            }
            Violation::ImageValue { field, index, value } => {
                write!(f, "{field}[{index}] = {value} is not a finite value in [0, 1]")
            }
            Violation::PromptOutOfRange { id, n_prompts } => {
                write!(f, "prompt id {id} out of range for {n_prompts} prompts")
            }
            Violation::QueryCount { expected, got } => {
                write!(f, "prompt queries {got} positions, world expects {expected}")
            }
            Violation::QueriedPositions(why) => write!(f, "invalid queried positions: {why}"),
        }
    }
}

/// Result of [`validate_sample`]; empty iff the sample is well-formed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.to_string().contains(needle))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

pub fn validate_sample(sample: &SymmetricSample, shape: &WorldShape) -> ValidationReport {
    let mut violations = Vec::new();

    let queried = &sample.prompt.queried;
    if sample.prompt.id >= shape.n_prompts {
        violations.push(Violation::PromptOutOfRange {
            id: sample.prompt.id,
            n_prompts: shape.n_prompts,
        });
    }
    if queried.len() != shape.q {
        violations.push(Violation::QueryCount {
            expected: shape.q,
            got: queried.len(),
        });
    }
    if queried.windows(2).any(|w| w[0] >= w[1]) {
        violations.push(Violation::QueriedPositions("not strictly increasing".into()));
    }
    if let Some(&p) = queried.iter().find(|&&p| p >= shape.d_img) {
        violations.push(Violation::QueriedPositions(format!(
            "position {p} >= d_img {}",
            shape.d_img
        )));
    }

    for (field, image) in [("image", &sample.image), ("image_c", &sample.image_c)] {
        if image.len() != shape.d_img {
            violations.push(Violation::ImageLength {
                field,
                expected: shape.d_img,
                got: image.len(),
            });
        }
        if let Some((index, &value)) = image
            .values()
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            violations.push(Violation::ImageValue { field, index, value });
        }
    }

    let catalog = 1usize << queried.len().min(63);
    for (field, y) in [("y_w", sample.y_w), ("y_l", sample.y_l), ("y_w_c", sample.y_w_c)] {
        if y.index() >= catalog {
            violations.push(Violation::ResponseOutOfCatalog {
                field,
                id: y.0,
                catalog,
            });
        }
    }
    if sample.y_w == sample.y_l {
        violations.push(Violation::DegeneratePreferencePair);
    }
    if sample.y_w == sample.y_w_c {
        violations.push(Violation::DegenerateSymmetricPair);
    }

    ValidationReport { violations }
}

/// Wire form of a [`SymmetricSample`], one per JSONL line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub prompt: usize,
    pub queried: Vec<usize>,
    pub image: Vec<f64>,
    pub image_c: Vec<f64>,
    pub y_w: u32,
    pub y_l: u32,
    pub y_w_c: u32,
    pub neighbor_id: i64,
}

impl From<&SymmetricSample> for SampleRecord {
    fn from(s: &SymmetricSample) -> Self {
        Self {
            prompt: s.prompt.id,
            queried: s.prompt.queried.clone(),
            image: s.image.0.clone(),
            image_c: s.image_c.0.clone(),
            y_w: s.y_w.0,
            y_l: s.y_l.0,
            y_w_c: s.y_w_c.0,
            neighbor_id: s.neighbor_id,
        }
    }
}

impl From<SampleRecord> for SymmetricSample {
    fn from(r: SampleRecord) -> Self {
        Self {
            prompt: Prompt {
                id: r.prompt,
                queried: r.queried,
            },
            image: ImageFeat(r.image),
            image_c: ImageFeat(r.image_c),
            y_w: ResponseId(r.y_w),
            y_l: ResponseId(r.y_l),
            y_w_c: ResponseId(r.y_w_c),
            neighbor_id: r.neighbor_id,
        }
    }
}

pub fn encode_sample(sample: &SymmetricSample) -> String {
    serde_json::to_string(&SampleRecord::from(sample)).expect("sample records always serialize")
}

pub fn decode_sample(line: &str) -> Result<SymmetricSample> {
    let record: SampleRecord = serde_json::from_str(line)?;
    Ok(record.into())
}

/// Writes one record per line, LF-terminated.
pub fn write_samples<W: Write>(mut out: W, samples: &[SymmetricSample]) -> Result<()> {
    for s in samples {
        out.write_all(encode_sample(s).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSONL sample file. Blank lines are skipped.
pub fn read_samples(path: &Path) -> Result<Vec<SymmetricSample>> {
    let file = std::fs::File::open(path)?;
    let mut samples = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = decode_sample(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape() -> WorldShape {
        WorldShape {
            d_img: 4,
            n_prompts: 2,
            q: 2,
        }
    }

    fn sample() -> SymmetricSample {
        SymmetricSample {
            prompt: Prompt {
                id: 1,
                queried: vec![0, 2],
            },
            image: ImageFeat(vec![1.0, 0.0, 1.0, 0.0]),
            image_c: ImageFeat(vec![1.0, 0.0, 0.0, 0.0]),
            y_w: ResponseId(3),
            y_l: ResponseId(2),
            y_w_c: ResponseId(1),
            neighbor_id: 5,
        }
    }

    #[test]
    fn well_formed_sample_has_empty_report() {
        let report = validate_sample(&sample(), &shape());
        assert!(report.is_empty(), "{report}");
    }

    #[test]
    fn degenerate_pair_is_reported() {
        let mut s = sample();
        s.y_l = s.y_w;
        let report = validate_sample(&s, &shape());
        assert!(report.contains("degenerate preference pair"));
        assert_eq!(report.violations.len(), 1);
    }

    #[test]
    fn out_of_catalog_is_reported() {
        let mut s = sample();
        s.y_w_c = ResponseId(4);
        assert!(validate_sample(&s, &shape()).contains("response out of catalog"));
    }

    #[test]
    fn reports_every_broken_invariant() {
        let mut s = sample();
        s.prompt.id = 9;
        s.prompt.queried = vec![2, 0];
        s.image.0.push(0.3);
        s.image_c.0[1] = f64::NAN;
        s.y_w_c = s.y_w;
        let report = validate_sample(&s, &shape());
        assert!(report
            .violations
            .contains(&Violation::PromptOutOfRange { id: 9, n_prompts: 2 }));
        assert!(report.contains("strictly increasing"));
        assert!(report.contains("image has length 5"));
        assert!(report.contains("image_c[1]"));
        assert!(report.contains("degenerate symmetric pair"));
    }

    #[test]
    fn validation_is_pure() {
        let mut s = sample();
        s.y_l = s.y_w;
        assert_eq!(validate_sample(&s, &shape()), validate_sample(&s, &shape()));
    }

    #[test]
    fn swap_arms_is_an_involution() {
        let s = sample();
        let t = s.swap_arms();
        assert_eq!(t.y_w, s.y_w_c);
        assert_eq!(t.image, s.image_c);
        assert_eq!(t.y_l, s.y_l);
        assert_eq!(t.swap_arms(), s);
    }

    #[test]
    fn wire_format_field_names() {
        let line = encode_sample(&sample());
        assert_eq!(
            line,
            r#"{"prompt":1,"queried":[0,2],"image":[1.0,0.0,1.0,0.0],"image_c":[1.0,0.0,0.0,0.0],"y_w":3,"y_l":2,"y_w_c":1,"neighbor_id":5}"#
        );
        assert!(decode_sample(r#"{"prompt":1}"#).is_err());
    }

    proptest! {
        #[test]
        fn jsonl_round_trip_is_bit_identical(
            image in prop::collection::vec(0.0f64..=1.0, 1..8),
            image_c in prop::collection::vec(0.0f64..=1.0, 1..8),
            y in (0u32..64, 0u32..64, 0u32..64),
            neighbor_id in -1i64..10_000,
            prompt in 0usize..16,
        ) {
            let s = SymmetricSample {
                prompt: Prompt { id: prompt, queried: vec![0, 3, 5] },
                image: ImageFeat(image),
                image_c: ImageFeat(image_c),
                y_w: ResponseId(y.0),
                y_l: ResponseId(y.1),
                y_w_c: ResponseId(y.2),
                neighbor_id,
            };
            let line = encode_sample(&s);
            let back = decode_sample(&line).unwrap();
            prop_assert_eq!(encode_sample(&back), line);
            let bits = |v: &ImageFeat| v.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back.image), bits(&s.image));
            prop_assert_eq!(back, s);
        }
    }
}
