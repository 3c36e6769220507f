//! Patchified ViT image encoder with windowed and global attention blocks.

use rand::Rng;

use super::config::ModelConfig;
use super::layers::{multi_head_attention, normal_tensor, Init, LayerNorm, Linear, Mlp};
use crate::adapters::{AdapterSet, HighwayState};
use crate::autodiff::{Graph, Origin, ParamId, ParameterRegistry, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    /// Window side in tokens; equals the grid side for global blocks.
    pub window: usize,
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub neck_norm: LayerNorm,
    pub neck_proj: Linear,
    pub neck_out_norm: LayerNorm,
    side: usize,
    dim: usize,
    heads: usize,
    patch: usize,
    in_chans: usize,
}

/// Result of running the encoder blocks.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[side, side, embed_dim]` grid after the last block (and the highway,
    /// when attached).
    pub grid: Var,
    /// Output of every block, in order.
    pub block_outputs: Vec<Var>,
}

/// `[S, S, C]` -> `[(S/w)^2, w*w, C]`
fn partition(g: &mut Graph<'_>, x: Var, side: usize, w: usize, c: usize) -> Result<Var> {
    let n = side / w;
    let x = g.reshape(x, &[n, w, n, w, c])?;
    let x = g.transpose(x, 1, 2)?;
    g.reshape(x, &[n * n, w * w, c])
}

fn unpartition(g: &mut Graph<'_>, x: Var, side: usize, w: usize, c: usize) -> Result<Var> {
    let n = side / w;
    let x = g.reshape(x, &[n, n, w, w, c])?;
    let x = g.transpose(x, 1, 2)?;
    g.reshape(x, &[side, side, c])
}

impl ImageEncoder {
    pub fn register(
        reg: &mut ParameterRegistry,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = cfg.embed_dim;
        let patch_dim = cfg.patch_size * cfg.patch_size * cfg.in_chans;
        let patch_embed = Linear::register(
            reg,
            "encoder.patch_embed",
            patch_dim,
            c,
            Origin::Base,
            Init::Lecun,
            rng,
        )?;
        let pos_embed = reg.register(
            "encoder.pos_embed",
            normal_tensor(rng, &[cfg.grid_side(), cfg.grid_side(), c], 0.02),
            Origin::Base,
            true,
        )?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let p = format!("encoder.blocks.{i}");
                Ok(EncoderBlock {
                    norm1: LayerNorm::register(reg, &format!("{p}.norm1"), c, Origin::Base)?,
                    qkv: Linear::register(
                        reg,
                        &format!("{p}.attn.qkv"),
                        c,
                        3 * c,
                        Origin::Base,
                        Init::Lecun,
                        rng,
                    )?,
                    proj: Linear::register(
                        reg,
                        &format!("{p}.attn.proj"),
                        c,
                        c,
                        Origin::Base,
                        Init::Lecun,
                        rng,
                    )?,
                    norm2: LayerNorm::register(reg, &format!("{p}.norm2"), c, Origin::Base)?,
                    mlp: Mlp::register(
                        reg,
                        &format!("{p}.mlp"),
                        c,
                        c * cfg.mlp_ratio,
                        c,
                        true,
                        Init::Lecun,
                        rng,
                    )?,
                    window: cfg.block_window(i),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let neck_norm = LayerNorm::register(reg, "encoder.neck.norm", c, Origin::Base)?;
        let neck_proj = Linear::register(
            reg,
            "encoder.neck.proj",
            c,
            cfg.decoder_dim,
            Origin::Base,
            Init::Lecun,
            rng,
        )?;
        let neck_out_norm =
            LayerNorm::register(reg, "encoder.neck.out_norm", cfg.decoder_dim, Origin::Base)?;
        Ok(Self {
            patch_embed,
            pos_embed,
            blocks,
            neck_norm,
            neck_proj,
            neck_out_norm,
            side: cfg.grid_side(),
            dim: c,
            heads: cfg.num_heads,
            patch: cfg.patch_size,
            in_chans: cfg.in_chans,
        })
    }

    /// `[H, W, C]` image -> `[H/p, W/p, embed_dim]` tokens plus the learned
    /// positional embedding.
    pub fn patch_embed<'a>(
        &self,
        g: &mut Graph<'a>,
        reg: &'a ParameterRegistry,
        image: Var,
    ) -> Result<Var> {
        let s = g.shape(image).to_vec();
        let expected = [
            self.side * self.patch,
            self.side * self.patch,
            self.in_chans,
        ];
        if s != expected {
            return Err(Error::shape(
                "patch_embed",
                format!("image {s:?}, expected {expected:?}"),
            ));
        }
        let (n, p, c) = (self.side, self.patch, self.in_chans);
        let x = g.reshape(image, &[n, p, n, p, c])?;
        let x = g.transpose(x, 1, 2)?;
        let x = g.reshape(x, &[n, n, p * p * c])?;
        let x = self.patch_embed.forward(g, reg, x)?;
        let pos = g.param(reg, self.pos_embed);
        g.add(x, pos)
    }

    fn attention<'a>(
        &self,
        g: &mut Graph<'a>,
        reg: &'a ParameterRegistry,
        block: &EncoderBlock,
        x: Var,
    ) -> Result<Var> {
        let (side, c, w) = (self.side, self.dim, block.window);
        let xw = partition(g, x, side, w, c)?;
        let qkv = block.qkv.forward(g, reg, xw)?;
        let q = g.slice(qkv, 2, 0, c)?;
        let k = g.slice(qkv, 2, c, 2 * c)?;
        let v = g.slice(qkv, 2, 2 * c, 3 * c)?;
        let a = multi_head_attention(g, q, k, v, self.heads)?;
        let a = block.proj.forward(g, reg, a)?;
        unpartition(g, a, side, w, c)
    }

    /// Runs every block over a `[side, side, embed_dim]` token grid.
    pub fn forward_blocks<'a>(
        &self,
        g: &mut Graph<'a>,
        reg: &'a ParameterRegistry,
        tokens: Var,
        adapters: Option<&AdapterSet>,
    ) -> Result<EncoderOutput> {
        let expected = [self.side, self.side, self.dim];
        if g.shape(tokens) != expected {
            return Err(Error::shape(
                "encoder",
                format!("tokens {:?}, expected {expected:?}", g.shape(tokens)),
            ));
        }
        let mut highway = match adapters {
            Some(a) if a.spec().gmed_highway => Some(HighwayState::new(g, &expected)?),
            _ => None,
        };
        let mut x = tokens;
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let local = adapters.map(|a| a.block(i));

            let h = block.norm1.forward(g, reg, x)?;
            let mut a = self.attention(g, reg, block, h)?;
            if let Some(mha) = local.and_then(|l| l.mha.as_ref()) {
                let delta = mha.forward(g, reg, a)?;
                a = g.add(a, delta)?;
            }
            x = g.add(x, a)?;

            let h = block.norm2.forward(g, reg, x)?;
            let mut m = block.mlp.forward(g, reg, h)?;
            if let Some(mlp) = local.and_then(|l| l.mlp.as_ref()) {
                let delta = mlp.forward(g, reg, m)?;
                m = g.add(m, delta)?;
            }
            x = g.add(x, m)?;

            if let (Some(state), Some(set)) = (highway.as_mut(), adapters) {
                let adapter = set.highway(i).expect("highway adapters exist when enabled");
                state.absorb(g, reg, adapter, x)?;
            }
            block_outputs.push(x);
        }
        let grid = match highway {
            Some(state) => state.merge(g, x)?,
            None => x,
        };
        Ok(EncoderOutput {
            grid,
            block_outputs,
        })
    }

    /// Projects the encoder grid to `[side*side, decoder_dim]`.
    pub fn neck<'a>(
        &self,
        g: &mut Graph<'a>,
        reg: &'a ParameterRegistry,
        grid: Var,
    ) -> Result<Var> {
        let x = g.reshape(grid, &[self.side * self.side, self.dim])?;
        let x = self.neck_norm.forward(g, reg, x)?;
        let x = self.neck_proj.forward(g, reg, x)?;
        self.neck_out_norm.forward(g, reg, x)
    }
}
