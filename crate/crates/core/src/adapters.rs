//! Bottleneck adapters and where they attach in the image encoder.
//!
//! Three placements are supported, all encoder-only:
//!
//! * **MLP-A**: inside each block, the MLP branch `m` becomes `m + A(m)`.
//! * **MHA-A**: inside each block, the attention branch `a` (after the output
//!   projection, before the residual add) becomes `a + A(a)`.
//! * **Global highway**: after block `i` produces `x_i`, a per-block adapter
//!   adds `A_i(x_i)` into an accumulator that starts at zero; the encoder
//!   output is `x_L + Σ A_i(x_i)`. This is a single skip path spanning the
//!   whole encoder.
//!
//! Up projections start at zero, so a freshly attached model computes
//! exactly the same function as the base model.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CountFilter, Graph, Origin, ParameterRegistry, Var};
use crate::error::{Error, Result};
use crate::model::layers::{Init, Linear};
use crate::model::{ModelConfig, SegModel};

/// `up(relu(down(x)))` with `down: dim -> dim / ratio` and `up` back to `dim`.
#[derive(Debug, Clone)]
pub struct AdapterBlock {
    pub down: Linear,
    pub up: Linear,
    pub reduction_ratio: usize,
}

impl AdapterBlock {
    pub fn register(
        reg: &mut ParameterRegistry,
        name: &str,
        embed_dim: usize,
        reduction_ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bottleneck = bottleneck_dim(embed_dim, reduction_ratio)?;
        let down = Linear::register(
            reg,
            &format!("{name}.down"),
            embed_dim,
            bottleneck,
            Origin::Adapter,
            Init::Kaiming,
            rng,
        )?;
        let up = Linear::register(
            reg,
            &format!("{name}.up"),
            bottleneck,
            embed_dim,
            Origin::Adapter,
            Init::Zeros,
            rng,
        )?;
        Ok(Self {
            down,
            up,
            reduction_ratio,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.down.in_dim
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.down.out_dim
    }

    pub fn numel(&self) -> usize {
        self.down.numel() + self.up.numel()
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        reg: &'a ParameterRegistry,
        x: Var,
    ) -> Result<Var> {
        let last = g.shape(x).last().copied().unwrap_or(0);
        if last != self.embed_dim() {
            return Err(Error::shape(
                "adapter",
                format!("input last dim {last}, adapter dim {}", self.embed_dim()),
            ));
        }
        let h = self.down.forward(g, reg, x)?;
        let h = g.relu(h);
        self.up.forward(g, reg, h)
    }
}

pub fn bottleneck_dim(embed_dim: usize, reduction_ratio: usize) -> Result<usize> {
    if reduction_ratio == 0 || !embed_dim.is_multiple_of(reduction_ratio) {
        return Err(Error::Config(format!(
            "reduction_ratio {reduction_ratio} must divide embed_dim {embed_dim}"
        )));
    }
    Ok(embed_dim / reduction_ratio)
}

/// Named placement presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "NONE")]
    None,
    #[serde(rename = "MED_SA")]
    MedSa,
    #[serde(rename = "GMED_SA")]
    GmedSa,
    #[serde(rename = "GLMED_SA")]
    GlmedSa,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::None, Preset::MedSa, Preset::GmedSa, Preset::GlmedSa];
    pub const ADAPTED: [Preset; 3] = [Preset::MedSa, Preset::GmedSa, Preset::GlmedSa];

    pub fn name(self) -> &'static str {
        match self {
            Preset::None => "NONE",
            Preset::MedSa => "MED_SA",
            Preset::GmedSa => "GMED_SA",
            Preset::GlmedSa => "GLMED_SA",
        }
    }

    /// Lower-case, dash-separated spelling used on the command line.
    pub fn flag(self) -> &'static str {
        match self {
            Preset::None => "none",
            Preset::MedSa => "med-sa",
            Preset::GmedSa => "gmed-sa",
            Preset::GlmedSa => "glmed-sa",
        }
    }

    pub fn spec(self) -> PlacementSpec {
        let (mlp_a, mha_a, gmed_highway) = match self {
            Preset::None => (false, false, false),
            Preset::MedSa => (true, true, false),
            Preset::GmedSa => (false, false, true),
            Preset::GlmedSa => (true, true, true),
        };
        PlacementSpec {
            mlp_a,
            mha_a,
            gmed_highway,
            ..PlacementSpec::none()
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s) || p.flag() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset `{s}` (expected none, med-sa, gmed-sa or glmed-sa)"
                ))
            })
    }
}

pub const DEFAULT_REDUCTION_RATIO: usize = 4;

/// Which adapters attach where.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementSpec {
    pub mlp_a: bool,
    pub mha_a: bool,
    pub gmed_highway: bool,
    pub reduction_ratio: usize,
    pub share_highway_weights: bool,
}

impl Default for PlacementSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl PlacementSpec {
    pub fn none() -> Self {
        Self {
            mlp_a: false,
            mha_a: false,
            gmed_highway: false,
            reduction_ratio: DEFAULT_REDUCTION_RATIO,
            share_highway_weights: false,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.mlp_a || self.mha_a || self.gmed_highway)
    }

    /// The preset whose flags this spec matches, ignoring ratio and sharing.
    pub fn preset(&self) -> Option<Preset> {
        Preset::ALL.into_iter().find(|p| {
            let s = p.spec();
            s.mlp_a == self.mlp_a && s.mha_a == self.mha_a && s.gmed_highway == self.gmed_highway
        })
    }

    pub fn variant_name(&self) -> String {
        let base = self.preset().map(Preset::name).unwrap_or("CUSTOM");
        match (self.reduction_ratio, self.share_highway_weights) {
            (DEFAULT_REDUCTION_RATIO, false) => base.to_string(),
            (r, shared) => format!("{base}[r={r}{}]", if shared { ",shared" } else { "" }),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BlockAdapters {
    pub mha: Option<AdapterBlock>,
    pub mlp: Option<AdapterBlock>,
}

/// Every adapter attached to one model.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    spec: PlacementSpec,
    blocks: Vec<BlockAdapters>,
    /// One per block, or a single shared adapter.
    highway: Vec<AdapterBlock>,
}

impl AdapterSet {
    /// Registers adapter parameters (origin adapter, trainable) in a fixed
    /// order: per block MHA-A then MLP-A, then the highway adapters.
    pub fn register(
        reg: &mut ParameterRegistry,
        cfg: &ModelConfig,
        spec: PlacementSpec,
        seed: u64,
    ) -> Result<Self> {
        let dim = cfg.embed_dim;
        bottleneck_dim(dim, spec.reduction_ratio)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("encoder.blocks.{i}");
            let mha = spec
                .mha_a
                .then(|| {
                    AdapterBlock::register(
                        reg,
                        &format!("{p}.mha_adapter"),
                        dim,
                        spec.reduction_ratio,
                        &mut rng,
                    )
                })
                .transpose()?;
            let mlp = spec
                .mlp_a
                .then(|| {
                    AdapterBlock::register(
                        reg,
                        &format!("{p}.mlp_adapter"),
                        dim,
                        spec.reduction_ratio,
                        &mut rng,
                    )
                })
                .transpose()?;
            blocks.push(BlockAdapters { mha, mlp });
        }
        let highway = if !spec.gmed_highway {
            Vec::new()
        } else if spec.share_highway_weights {
            vec![AdapterBlock::register(
                reg,
                "encoder.highway.shared",
                dim,
                spec.reduction_ratio,
                &mut rng,
            )?]
        } else {
            (0..cfg.depth)
                .map(|i| {
                    AdapterBlock::register(
                        reg,
                        &format!("encoder.highway.{i}"),
                        dim,
                        spec.reduction_ratio,
                        &mut rng,
                    )
                })
                .collect::<Result<_>>()?
        };
        Ok(Self {
            spec,
            blocks,
            highway,
        })
    }

    pub fn spec(&self) -> &PlacementSpec {
        &self.spec
    }

    pub fn block(&self, i: usize) -> &BlockAdapters {
        &self.blocks[i]
    }

    pub fn highway(&self, block: usize) -> Option<&AdapterBlock> {
        if self.highway.len() == 1 {
            self.highway.first()
        } else {
            self.highway.get(block)
        }
    }

    /// All attached adapters, in registration order.
    pub fn iter(&self) -> impl Iterator<Item = &AdapterBlock> {
        self.blocks
            .iter()
            .flat_map(|b| b.mha.iter().chain(b.mlp.iter()))
            .chain(self.highway.iter())
    }

    pub fn highway_numel(&self) -> usize {
        self.highway.iter().map(AdapterBlock::numel).sum()
    }

    pub fn numel(&self) -> usize {
        self.iter().map(AdapterBlock::numel).sum()
    }
}

/// Global-highway accumulator: a zero grid at encoder entry that collects
/// one adapter output per block.
#[derive(Debug, Clone, Copy)]
pub struct HighwayState {
    pub accumulator: Var,
}

impl HighwayState {
    pub fn new(g: &mut Graph<'_>, shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Ok(Self {
            accumulator: g.constant(shape, vec![0.0; n])?,
        })
    }

    pub fn absorb<'a>(
        &mut self,
        g: &mut Graph<'a>,
        reg: &'a ParameterRegistry,
        adapter: &AdapterBlock,
        block_output: Var,
    ) -> Result<()> {
        let delta = adapter.forward(g, reg, block_output)?;
        self.accumulator = g.add(self.accumulator, delta)?;
        Ok(())
    }

    /// Encoder output `x_L + accumulator`.
    pub fn merge(self, g: &mut Graph<'_>, last: Var) -> Result<Var> {
        g.add(last, self.accumulator)
    }
}

/// Attaches adapters to `model` per `spec`. Fails if the model already has
/// adapters.
pub fn attach(model: &mut SegModel, spec: PlacementSpec, seed: u64) -> Result<()> {
    model.attach(spec, seed)
}

/// One row of a parameter-count report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReportRow {
    pub variant: String,
    pub total_params: usize,
    pub trainable_params: usize,
    pub adapter_params: usize,
    pub trainable_fraction: f64,
}

pub fn param_report(reg: &ParameterRegistry, spec: &PlacementSpec) -> ParamReportRow {
    let total = reg.count(CountFilter::All);
    let trainable = reg.count(CountFilter::Trainable);
    ParamReportRow {
        variant: spec.variant_name(),
        total_params: total,
        trainable_params: trainable,
        adapter_params: reg.count(CountFilter::Origin(Origin::Adapter)),
        trainable_fraction: if total == 0 {
            0.0
        } else {
            trainable as f64 / total as f64
        },
    }
}

/// Large-backbone reference rows (ViT-H scale, in millions): variant, total,
/// tunable. Reported beside desk-scale counts, never compared numerically.
pub const REFERENCE_PARAM_ROWS: [(&str, f64, f64); 3] = [
    ("SAM (frozen)", 636.0, 0.0),
    ("MED_SA", 636.0, 13.0),
    ("GLMED_SA", 636.0, 20.0),
];
