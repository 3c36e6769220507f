use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SegmentationSample;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Domain::Source => 0x5eed_0001,
            Domain::Target => 0x5eed_0002,
        }
    }

    /// Intensity and shape statistics of the domain.
    pub fn profile(self) -> IntensityProfile {
        match self {
            Domain::Source => IntensityProfile {
                background: (0.05, 0.25),
                contrast: (0.5, 0.7),
                object_brighter: true,
                irregularity: (0.0, 0.0),
                speckle: (0.0, 0.0),
                shading: 0.0,
            },
            Domain::Target => IntensityProfile {
                background: (0.55, 0.75),
                contrast: (0.15, 0.3),
                object_brighter: false,
                irregularity: (0.05, 0.12),
                speckle: (0.06, 0.12),
                shading: 0.06,
            },
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            _ => Err(Error::Config(format!(
                "unknown domain `{s}` (expected source or target)"
            ))),
        }
    }
}

/// Per-domain ranges the generator draws from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityProfile {
    pub background: (f64, f64),
    /// Absolute intensity gap between object and background.
    pub contrast: (f64, f64),
    pub object_brighter: bool,
    /// Amplitude range of each boundary harmonic; zero gives ellipses.
    pub irregularity: (f64, f64),
    /// Multiplicative noise std.
    pub speckle: (f64, f64),
    /// Peak amplitude of a linear illumination gradient.
    pub shading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    pub image_size: usize,
    pub domain: Domain,
    pub blob_count_range: (usize, usize),
    pub blob_radius_range: (f64, f64),
    pub texture_noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Defaults scaled to the image size: one blob, radius 20-38% of the side.
    pub fn new(domain: Domain, count: usize, image_size: usize, seed: u64) -> Self {
        let s = image_size as f64;
        Self {
            count,
            image_size,
            domain,
            blob_count_range: (1, 1),
            blob_radius_range: (0.2 * s, 0.38 * s),
            texture_noise_sigma: match domain {
                Domain::Source => 0.03,
                Domain::Target => 0.04,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (blo, bhi) = self.blob_count_range;
        let (rlo, rhi) = self.blob_radius_range;
        if self.image_size < 4 {
            return Err(Error::Config("image_size must be at least 4".into()));
        }
        if blo == 0 || blo > bhi {
            return Err(Error::Config(format!(
                "blob_count_range {blo}..={bhi} is empty"
            )));
        }
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Config(format!(
                "blob_radius_range {rlo}..={rhi} is empty"
            )));
        }
        if self.texture_noise_sigma.is_nan() || self.texture_noise_sigma < 0.0 {
            return Err(Error::Config("texture_noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub k: u32,
    pub amplitude: f64,
    pub phase: f64,
}

/// A rendered shape in pixel units; pixel `(x, y)` is inside when its
/// center `(x + 0.5, y + 0.5)` is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        theta: f64,
    },
    /// `r(φ) = r0 · (1 + Σ a_k cos(k φ + phase_k))`
    Star {
        cx: f64,
        cy: f64,
        r0: f64,
        harmonics: Vec<Harmonic>,
    },
}

impl Shape {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        match self {
            Shape::Ellipse {
                cx,
                cy,
                a,
                b,
                theta,
            } => {
                let (dx, dy) = (px - cx, py - cy);
                let (s, c) = theta.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Star {
                cx,
                cy,
                r0,
                harmonics,
            } => {
                let (dx, dy) = (px - cx, py - cy);
                let phi = dy.atan2(dx);
                let bump: f64 = harmonics
                    .iter()
                    .map(|h| h.amplitude * (h.k as f64 * phi + h.phase).cos())
                    .sum();
                dx.hypot(dy) <= r0 * (1.0 + bump)
            }
        }
    }

    fn extent(&self) -> f64 {
        match self {
            Shape::Ellipse { a, b, .. } => a.max(*b),
            Shape::Star { r0, harmonics, .. } => {
                r0 * (1.0 + harmonics.iter().map(|h| h.amplitude).sum::<f64>())
            }
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn draw_shape(spec: &SyntheticSpec, profile: &IntensityProfile, rng: &mut impl Rng) -> Shape {
    let size = spec.image_size as f64;
    let r = uniform(rng, spec.blob_radius_range);
    let shape = if profile.irregularity.1 > 0.0 {
        let mut ks: Vec<u32> = (2..=6).collect();
        let mut harmonics = Vec::new();
        for _ in 0..3 {
            let k = ks.remove(rng.gen_range(0..ks.len()));
            harmonics.push(Harmonic {
                k,
                amplitude: uniform(rng, profile.irregularity),
                phase: rng.gen_range(0.0..2.0 * PI),
            });
        }
        Shape::Star {
            cx: 0.0,
            cy: 0.0,
            r0: r,
            harmonics,
        }
    } else {
        let b = r * rng.gen_range(0.6..1.0);
        Shape::Ellipse {
            cx: 0.0,
            cy: 0.0,
            a: r,
            b,
            theta: rng.gen_range(0.0..PI),
        }
    };
    // Keep the center far enough from the border that most of the shape is visible.
    let margin = (shape.extent() * 0.6).min(size / 2.0 - 1.0);
    let cx = rng.gen_range(margin..size - margin);
    let cy = rng.gen_range(margin..size - margin);
    match shape {
        Shape::Ellipse { a, b, theta, .. } => Shape::Ellipse {
            cx,
            cy,
            a,
            b,
            theta,
        },
        Shape::Star { r0, harmonics, .. } => Shape::Star {
            cx,
            cy,
            r0,
            harmonics,
        },
    }
}

pub fn rasterize(shapes: &[Shape], size: usize) -> BinaryMask {
    BinaryMask::from_fn(size, size, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        shapes.iter().any(|s| s.contains(px, py))
    })
}

/// Renders sample `index` of `spec`, returning it with the shapes drawn.
/// Each index has its own random stream, so samples are independent of
/// `count`.
pub fn render_sample(
    spec: &SyntheticSpec,
    index: usize,
) -> Result<(SegmentationSample, Vec<Shape>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ spec.domain.salt());
    rng.set_stream(index as u64);
    let profile = spec.domain.profile();
    let size = spec.image_size;
    let (shapes, mask) = loop {
        let n = rng.gen_range(spec.blob_count_range.0..=spec.blob_count_range.1);
        let shapes: Vec<Shape> = (0..n)
            .map(|_| draw_shape(spec, &profile, &mut rng))
            .collect();
        let mask = rasterize(&shapes, size);
        if !mask.is_empty() && !mask.is_full() {
            break (shapes, mask);
        }
    };

    let bg = uniform(&mut rng, profile.background);
    let contrast = uniform(&mut rng, profile.contrast);
    let fg = if profile.object_brighter {
        bg + contrast
    } else {
        bg - contrast
    };
    let speckle = uniform(&mut rng, profile.speckle);
    let shade_dir = rng.gen_range(0.0..2.0 * PI);
    let (sd, cd) = shade_dir.sin_cos();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64 - 0.5;
            let v = (y as f64 + 0.5) / size as f64 - 0.5;
            let base = if mask.get(x, y) { fg } else { bg };
            let shaded = base + profile.shading * 2.0 * (u * cd + v * sd);
            let speckled = shaded * (1.0 + speckle * unit.sample(&mut rng));
            let value = speckled + spec.texture_noise_sigma * unit.sample(&mut rng);
            // 8-bit levels so PNG export is lossless.
            pixels.push((value.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        }
    }
    let image = Tensor::new(vec![size, size, 1], pixels)?.with_grad(false);
    let sample = SegmentationSample {
        id: format!("{}_{index:05}", spec.domain),
        image,
        mask,
    };
    Ok((sample, shapes))
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<SegmentationSample>> {
    (0..spec.count)
        .map(|i| render_sample(spec, i).map(|(s, _)| s))
        .collect()
}
