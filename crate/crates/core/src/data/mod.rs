//! Samples, images, splits, and the synthetic and on-disk dataset sources.

pub mod folder;
pub mod manifest;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use folder::{decode_image, load_image_folder};
pub use manifest::{read_manifest, write_manifest, ManifestRow};
pub use synth::{generate_dataset, plant_local_artifact, ArtifactKind, ArtifactRegion, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    BonaFide,
    Attack,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::BonaFide, Label::Attack];

    /// Position in the classifier output.
    pub fn index(self) -> usize {
        match self {
            Label::BonaFide => 0,
            Label::Attack => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::BonaFide => "bona_fide",
            Label::Attack => "attack",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bona_fide" => Ok(Label::BonaFide),
            "attack" => Ok(Label::Attack),
            other => Err(Error::Dataset(format!("unknown label `{other}`"))),
        }
    }
}

/// Height×width×3 image with values in `[0, 1]`, stored row-major, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * 3 + ch
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.idx(row, col, ch)]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        let i = self.idx(row, col, ch);
        self.data[i] = v;
    }

    /// Channel-first `3×H×W` tensor.
    pub fn to_chw(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; 3 * h * w];
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    out[(ch * h + r) * w + c] = self.data[(r * w + c) * 3 + ch];
                }
            }
        }
        Tensor::new(vec![3, h, w], out).expect("sized")
    }

    /// 8-bit quantization, as stored on disk.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("sized")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    /// Round trip through 8-bit storage.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(&self.to_rgb8())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub label: Label,
    pub pai_type: Option<String>,
    pub group_id: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Stratified, seeded train/dev/test partition.
///
/// Per label, `round(n·r_train)` samples go to train, `round(n·r_dev)` to dev
/// and the remainder to test.
pub fn split_protocol(samples: Vec<Sample>, ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (rt, rd, rs) = ratios;
    if !(rt > 0.0 && rd > 0.0 && rs > 0.0) || ((rt + rd + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios ({rt}, {rd}, {rs}) must be positive and sum to 1"
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for s in &samples {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::Dataset(format!("duplicate sample id `{}`", s.id)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit::default();
    let (bona, attack): (Vec<Sample>, Vec<Sample>) = samples.into_iter().partition(|s| s.label == Label::BonaFide);
    for (label, mut group) in [(Label::BonaFide, bona), (Label::Attack, attack)] {
        group.shuffle(&mut rng);
        let n = group.len();
        let n_train = (n as f64 * rt).round() as usize;
        let n_dev = ((n as f64 * rd).round() as usize).min(n.saturating_sub(n_train));
        let n_test = n - n_train - n_dev;
        if n_train == 0 || n_dev == 0 || n_test == 0 {
            return Err(Error::Config(format!(
                "split of {n} `{label}` samples leaves a partition without that label \
                 ({n_train}/{n_dev}/{n_test})"
            )));
        }
        let test = group.split_off(n_train + n_dev);
        let dev = group.split_off(n_train);
        split.train.extend(group);
        split.dev.extend(dev);
        split.test.extend(test);
    }
    split.train.shuffle(&mut rng);
    split.dev.shuffle(&mut rng);
    split.test.shuffle(&mut rng);
    Ok(split)
}
