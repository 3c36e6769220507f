//! Point prompts: frozen random Fourier position features plus a learned
//! per-label embedding.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layers::normal_tensor;
use crate::autodiff::{Graph, Origin, ParamId, ParameterRegistry, Var};
use crate::error::{Error, Result};

/// Seed of the Fourier feature matrix; part of the model definition.
pub const FOURIER_SEED: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClickLabel {
    Positive,
    Negative,
}

impl ClickLabel {
    pub fn index(self) -> usize {
        match self {
            ClickLabel::Positive => 0,
            ClickLabel::Negative => 1,
        }
    }

    pub fn from_foreground(fg: bool) -> Self {
        if fg {
            ClickLabel::Positive
        } else {
            ClickLabel::Negative
        }
    }
}

/// A labeled click in image pixel coordinates (`x` column, `y` row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClickPrompt {
    pub x: usize,
    pub y: usize,
    pub label: ClickLabel,
}

impl ClickPrompt {
    pub fn positive(x: usize, y: usize) -> Self {
        Self {
            x,
            y,
            label: ClickLabel::Positive,
        }
    }

    pub fn negative(x: usize, y: usize) -> Self {
        Self {
            x,
            y,
            label: ClickLabel::Negative,
        }
    }
}

/// Random Fourier features of points in `[0, 1]^2`.
#[derive(Debug, Clone)]
pub struct FourierFeatures {
    /// `[2, dim / 2]`, row-major.
    gaussian: Vec<f64>,
    half: usize,
}

impl FourierFeatures {
    pub fn new(dim: usize, seed: u64) -> Self {
        let half = dim / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gaussian = (0..2 * half)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self { gaussian, half }
    }

    pub fn dim(&self) -> usize {
        2 * self.half
    }

    /// `[sin(2π·p·G), cos(2π·p·G)]` with `p = 2·(u, v) − 1`.
    pub fn encode(&self, u: f64, v: f64) -> Vec<f64> {
        let (a, b) = (2.0 * u - 1.0, 2.0 * v - 1.0);
        let proj: Vec<f64> = (0..self.half)
            .map(|j| 2.0 * PI * (a * self.gaussian[j] + b * self.gaussian[self.half + j]))
            .collect();
        proj.iter()
            .map(|p| p.sin())
            .chain(proj.iter().map(|p| p.cos()))
            .collect()
    }

    /// Features at the centers of a `side × side` grid, row-major.
    pub fn dense(&self, side: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(side * side * self.dim());
        for y in 0..side {
            for x in 0..side {
                let u = (x as f64 + 0.5) / side as f64;
                let v = (y as f64 + 0.5) / side as f64;
                out.extend(self.encode(u, v));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct PromptEncoder {
    /// `[2, decoder_dim]`: row 0 positive, row 1 negative.
    pub label_embed: ParamId,
    pub features: FourierFeatures,
    image_size: usize,
}

impl PromptEncoder {
    pub fn register(
        reg: &mut ParameterRegistry,
        dim: usize,
        image_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let label_embed = reg.register(
            "prompt.label_embed",
            normal_tensor(rng, &[2, dim], 1.0),
            Origin::Base,
            true,
        )?;
        Ok(Self {
            label_embed,
            features: FourierFeatures::new(dim, FOURIER_SEED),
            image_size,
        })
    }

    /// Positional part of a click: pixel centers normalized to `[0, 1]^2`.
    pub fn positional(&self, click: &ClickPrompt) -> Vec<f64> {
        let s = self.image_size as f64;
        self.features
            .encode((click.x as f64 + 0.5) / s, (click.y as f64 + 0.5) / s)
    }

    /// One `decoder_dim` token per click.
    pub fn encode<'a>(
        &self,
        g: &mut Graph<'a>,
        reg: &'a ParameterRegistry,
        clicks: &[ClickPrompt],
    ) -> Result<Var> {
        if clicks.is_empty() {
            return Err(Error::Invalid("at least one click is required".into()));
        }
        for c in clicks {
            if c.x >= self.image_size || c.y >= self.image_size {
                return Err(Error::Invalid(format!(
                    "click ({}, {}) outside {}x{} image",
                    c.x, c.y, self.image_size, self.image_size
                )));
            }
        }
        let dim = self.features.dim();
        let pe: Vec<f64> = clicks.iter().flat_map(|c| self.positional(c)).collect();
        let pe = g.constant(&[clicks.len(), dim], pe)?;
        let table = g.param(reg, self.label_embed);
        let labels: Vec<usize> = clicks.iter().map(|c| c.label.index()).collect();
        let lab = g.embedding(table, &labels)?;
        g.add(pe, lab)
    }
}
