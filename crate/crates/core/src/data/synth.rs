//! Procedural genuine/attack images: a smooth random background, optional
//! sensor noise, and for attacks a single planted local artifact plus an
//! optional image-wide colour cue.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Label, RgbImage, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    #[default]
    SinusoidGrating,
    Checker,
    BlurPatch,
}

impl ArtifactKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::SinusoidGrating => "sinusoid_grating",
            ArtifactKind::Checker => "checker",
            ArtifactKind::BlurPatch => "blur_patch",
        }
    }
}

/// Where attack artifacts are placed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactRegion {
    /// Uniform over all in-bounds positions.
    #[default]
    Anywhere,
    /// Uniform over positions whose centre lies within `border_width` pixels
    /// of an image edge.
    Border,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub n_genuine: usize,
    pub n_attack: usize,
    pub artifact_size: usize,
    pub artifact_amplitude: f64,
    /// Per-attack amplitude is `artifact_amplitude · (1 + spread · u)`, `u ~ U(−1, 1)`.
    pub amplitude_spread: f64,
    pub artifact_region: ArtifactRegion,
    pub border_width: usize,
    pub global_cue_strength: f64,
    pub artifact_kind: ArtifactKind,
    /// Standard deviation of per-pixel Gaussian noise on every image.
    pub noise_std: f64,
    /// Period of the sinusoidal grating, in pixels.
    pub grating_period: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_genuine: 100,
            n_attack: 100,
            artifact_size: 9,
            artifact_amplitude: 0.15,
            amplitude_spread: 0.0,
            artifact_region: ArtifactRegion::Anywhere,
            border_width: 12,
            global_cue_strength: 0.0,
            artifact_kind: ArtifactKind::SinusoidGrating,
            noise_std: 0.02,
            grating_period: 3.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size < 2 {
            return fail(format!("synth.image_size {} is too small", self.image_size));
        }
        if self.artifact_size == 0 || self.artifact_size >= self.image_size {
            return fail(format!(
                "synth.artifact_size {} must lie in 1..{}",
                self.artifact_size, self.image_size
            ));
        }
        for (name, v) in [
            ("artifact_amplitude", self.artifact_amplitude),
            ("amplitude_spread", self.amplitude_spread),
            ("global_cue_strength", self.global_cue_strength),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("synth.{name} {v} must lie in [0, 1]"));
            }
        }
        if self.artifact_region == ArtifactRegion::Border && self.border_width == 0 {
            return fail("synth.border_width must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("synth.noise_std must be non-negative".into());
        }
        if !(self.grating_period > 0.0 && self.grating_period.is_finite()) {
            return fail("synth.grating_period must be positive".into());
        }
        Ok(())
    }
}

/// Per-sample generator stream: independent of generation order.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

const GRID: usize = 5;

/// Smooth low-frequency field (bilinear upsampling of a coarse random grid per
/// channel) with optional Gaussian pixel noise, clipped to `[0, 1]`.
pub fn background(size: usize, noise_std: f64, rng: &mut impl Rng) -> RgbImage {
    let coarse: Vec<f64> = (0..GRID * GRID * 3).map(|_| rng.random_range(0.2..0.8)).collect();
    let mut img = RgbImage::filled(size, size, 0.0);
    let scale = (GRID - 1) as f64 / (size - 1).max(1) as f64;
    for r in 0..size {
        let gy = r as f64 * scale;
        let y0 = (gy.floor() as usize).min(GRID - 2);
        let fy = gy - y0 as f64;
        for c in 0..size {
            let gx = c as f64 * scale;
            let x0 = (gx.floor() as usize).min(GRID - 2);
            let fx = gx - x0 as f64;
            for ch in 0..3 {
                let at = |y: usize, x: usize| coarse[(y * GRID + x) * 3 + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                img.set(r, c, ch, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    if noise_std > 0.0 {
        let noise = Normal::new(0.0, noise_std).expect("validated");
        for v in &mut img.data {
            *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    img
}

fn artifact_origin(center: usize, size: usize) -> Option<usize> {
    center.checked_sub(size / 2)
}

/// Adds one `size×size` artifact centred at `center = (row, col)`.
///
/// Pixels outside the square are untouched; inside, the pattern is added and
/// the result clipped to `[0, 1]`. For odd sizes the square spans
/// `center ± size/2`.
pub fn plant_local_artifact(
    image: &RgbImage,
    center: (usize, usize),
    size: usize,
    amplitude: f64,
    kind: ArtifactKind,
    period: f64,
    rng: &mut impl Rng,
) -> Result<RgbImage> {
    let (top, left) = match (artifact_origin(center.0, size), artifact_origin(center.1, size)) {
        (Some(t), Some(l)) if t + size <= image.height && l + size <= image.width => (t, l),
        _ => {
            return Err(Error::Range(format!(
                "artifact of size {size} at {center:?} leaves the {}×{} image",
                image.height, image.width
            )))
        }
    };
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let parity = rng.random_range(0..2usize);
    let mut out = image.clone();
    for r in top..top + size {
        for c in left..left + size {
            let (dy, dx) = ((r - top) as f64, (c - left) as f64);
            for ch in 0..3 {
                let x = image.get(r, c, ch);
                let delta = match kind {
                    ArtifactKind::SinusoidGrating => {
                        let u = dx * theta.cos() + dy * theta.sin();
                        (2.0 * std::f64::consts::PI * u / period + phase).sin()
                    }
                    ArtifactKind::Checker => {
                        if (r + c + parity) % 2 == 0 {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    ArtifactKind::BlurPatch => box_blur(image, r, c, ch) - x,
                };
                out.set(r, c, ch, (x + amplitude * delta).clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

fn box_blur(img: &RgbImage, r: usize, c: usize, ch: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for rr in r.saturating_sub(2)..(r + 3).min(img.height) {
        for cc in c.saturating_sub(2)..(c + 3).min(img.width) {
            sum += img.get(rr, cc, ch);
            n += 1.0;
        }
    }
    sum / n
}

const CUE_TINT: [f64; 3] = [0.75, 0.6, 0.45];

/// Image-wide colour cast and contrast loss of strength `g ∈ [0, 1]`.
pub fn apply_global_cue(image: &mut RgbImage, strength: f64) {
    if strength == 0.0 {
        return;
    }
    let a = strength / 2.0;
    for (i, v) in image.data.iter_mut().enumerate() {
        *v = ((1.0 - a) * *v + a * CUE_TINT[i % 3]).clamp(0.0, 1.0);
    }
}

fn artifact_center(cfg: &SynthConfig, rng: &mut impl Rng) -> (usize, usize) {
    let (size, half) = (cfg.image_size, cfg.artifact_size / 2);
    let max_origin = size - cfg.artifact_size;
    loop {
        let row = rng.random_range(0..=max_origin) + half;
        let col = rng.random_range(0..=max_origin) + half;
        let edge = row.min(col).min(size - 1 - row).min(size - 1 - col);
        if cfg.artifact_region == ArtifactRegion::Anywhere || edge < cfg.border_width.max(half + 1) {
            return (row, col);
        }
    }
}

/// Genuine samples first (`g00000…`), then attacks (`a00000…`).
///
/// Sample `i` (counting genuine then attack) draws from its own stream
/// [`sample_rng`]`(seed, i)`: background first, then artifact placement and
/// pattern, so a zero-amplitude attack equals its background exactly.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let size = cfg.image_size;
    let mut out = Vec::with_capacity(cfg.n_genuine + cfg.n_attack);
    for i in 0..cfg.n_genuine {
        let mut rng = sample_rng(cfg.seed, i as u64);
        out.push(Sample {
            id: format!("g{i:05}"),
            image: background(size, cfg.noise_std, &mut rng),
            label: Label::BonaFide,
            pai_type: None,
            group_id: None,
        });
    }
    for j in 0..cfg.n_attack {
        let mut rng = sample_rng(cfg.seed, (cfg.n_genuine + j) as u64);
        let mut img = background(size, cfg.noise_std, &mut rng);
        apply_global_cue(&mut img, cfg.global_cue_strength);
        let (row, col) = artifact_center(cfg, &mut rng);
        let amplitude = (cfg.artifact_amplitude * (1.0 + cfg.amplitude_spread * rng.random_range(-1.0..1.0))).clamp(0.0, 1.0);
        let img = plant_local_artifact(
            &img,
            (row, col),
            cfg.artifact_size,
            amplitude,
            cfg.artifact_kind,
            cfg.grating_period,
            &mut rng,
        )?;
        out.push(Sample {
            id: format!("a{j:05}"),
            image: img,
            label: Label::Attack,
            pai_type: Some(cfg.artifact_kind.as_str().to_string()),
            group_id: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(n: usize) -> SynthConfig {
        SynthConfig {
            image_size: 32,
            n_genuine: n,
            n_attack: n,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_and_labels() {
        let cfg = SynthConfig {
            n_genuine: 100,
            n_attack: 100,
            image_size: 16,
            artifact_size: 5,
            ..SynthConfig::default()
        };
        let d = generate_dataset(&cfg).unwrap();
        assert_eq!(d.len(), 200);
        assert_eq!(d.iter().filter(|s| s.label == Label::Attack).count(), 100);
        assert!(d.iter().all(|s| s.image.data.iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(d
            .iter()
            .filter(|s| s.label == Label::Attack)
            .all(|s| s.pai_type.as_deref() == Some("sinusoid_grating")));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small(5)).unwrap();
        let b = generate_dataset(&small(5)).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&SynthConfig { seed: 1, ..small(5) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_amplitude_attack_is_its_background() {
        let cfg = SynthConfig {
            artifact_amplitude: 0.0,
            ..small(3)
        };
        let d = generate_dataset(&cfg).unwrap();
        for (j, s) in d.iter().filter(|s| s.label == Label::Attack).enumerate() {
            let mut rng = sample_rng(cfg.seed, (cfg.n_genuine + j) as u64);
            assert_eq!(s.image, background(cfg.image_size, cfg.noise_std, &mut rng));
        }
    }

    #[test]
    fn planting_is_local() {
        let mut rng = sample_rng(1, 0);
        let bg = background(64, 0.02, &mut rng);
        let out = plant_local_artifact(&bg, (32, 32), 9, 0.3, ArtifactKind::SinusoidGrating, 3.0, &mut rng).unwrap();
        for r in 0..64 {
            for c in 0..64 {
                for ch in 0..3 {
                    if !(28..=36).contains(&r) || !(28..=36).contains(&c) {
                        assert_eq!(out.get(r, c, ch), bg.get(r, c, ch));
                    }
                }
            }
        }
        assert_ne!(out, bg);
        let same = plant_local_artifact(&bg, (32, 32), 9, 0.0, ArtifactKind::Checker, 3.0, &mut rng).unwrap();
        assert_eq!(same, bg);
    }

    #[test]
    fn planting_is_reproducible_for_a_fixed_rng_state() {
        let bg = background(32, 0.0, &mut sample_rng(2, 0));
        let a = plant_local_artifact(&bg, (10, 12), 7, 0.2, ArtifactKind::SinusoidGrating, 3.0, &mut sample_rng(5, 5)).unwrap();
        let b = plant_local_artifact(&bg, (10, 12), 7, 0.2, ArtifactKind::SinusoidGrating, 3.0, &mut sample_rng(5, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_bounds_artifact_is_a_range_error() {
        let bg = RgbImage::filled(16, 16, 0.5);
        let mut rng = sample_rng(0, 0);
        for center in [(2, 8), (8, 13), (0, 0)] {
            assert!(matches!(
                plant_local_artifact(&bg, center, 7, 0.2, ArtifactKind::Checker, 3.0, &mut rng),
                Err(Error::Range(_))
            ));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate_dataset(&SynthConfig { artifact_size: 64, ..SynthConfig::default() }).is_err());
        assert!(generate_dataset(&SynthConfig { artifact_amplitude: 1.5, ..SynthConfig::default() }).is_err());
        assert!(generate_dataset(&SynthConfig { global_cue_strength: -0.1, ..SynthConfig::default() }).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn attack_differs_from_background_only_inside_one_square(
            seed in 0u64..1000,
            kind in prop_oneof![
                Just(ArtifactKind::SinusoidGrating),
                Just(ArtifactKind::Checker),
                Just(ArtifactKind::BlurPatch)
            ],
        ) {
            let cfg = SynthConfig {
                image_size: 24,
                n_genuine: 0,
                n_attack: 1,
                artifact_size: 5,
                artifact_amplitude: 0.4,
                artifact_kind: kind,
                seed,
                ..SynthConfig::default()
            };
            let attack = &generate_dataset(&cfg).unwrap()[0];
            let bg = background(24, cfg.noise_std, &mut sample_rng(seed, 0));
            let diff: Vec<(usize, usize)> = (0..24)
                .flat_map(|r| (0..24).map(move |c| (r, c)))
                .filter(|&(r, c)| (0..3).any(|ch| attack.image.get(r, c, ch) != bg.get(r, c, ch)))
                .collect();
            if let (Some(rmin), Some(rmax)) = (diff.iter().map(|d| d.0).min(), diff.iter().map(|d| d.0).max()) {
                let cmin = diff.iter().map(|d| d.1).min().unwrap();
                let cmax = diff.iter().map(|d| d.1).max().unwrap();
                prop_assert!(rmax - rmin < 5 && cmax - cmin < 5);
            }
        }
    }
}
