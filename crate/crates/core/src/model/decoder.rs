//! Two-way transformer mask decoder with a mask token and an IoU token.

use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{multi_head_attention, Init, LayerNorm, Linear, Mlp};
use crate::autodiff::{Graph, Origin, ParamId, ParameterRegistry, Tensor, Var};
use crate::error::{Error, Result};

/// Attention with separate q/k/v/out projections over 2-d `[T, D]` inputs.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    heads: usize,
}

impl Attention {
    fn register(
        reg: &mut ParameterRegistry,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let lin = |reg: &mut ParameterRegistry, n: &str, rng: &mut ChaCha8Rng| {
            Linear::register(
                reg,
                &format!("{name}.{n}"),
                dim,
                dim,
                Origin::Base,
                Init::Lecun,
                rng,
            )
        };
        Ok(Self {
            q: lin(reg, "q_proj", rng)?,
            k: lin(reg, "k_proj", rng)?,
            v: lin(reg, "v_proj", rng)?,
            out: lin(reg, "out_proj", rng)?,
            heads,
        })
    }

    fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        reg: &'a ParameterRegistry,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<Var> {
        let (tq, tk, d) = (g.shape(q)[0], g.shape(k)[0], g.shape(q)[1]);
        let q = self.q.forward(g, reg, q)?;
        let k = self.k.forward(g, reg, k)?;
        let v = self.v.forward(g, reg, v)?;
        let q = g.reshape(q, &[1, tq, d])?;
        let k = g.reshape(k, &[1, tk, d])?;
        let v = g.reshape(v, &[1, tk, d])?;
        let a = multi_head_attention(g, q, k, v, self.heads)?;
        let a = g.reshape(a, &[tq, d])?;
        self.out.forward(g, reg, a)
    }
}

/// Prompt self-attention, prompt→image cross-attention, prompt MLP, then
/// image→prompt cross-attention; each followed by a residual add and norm.
#[derive(Debug, Clone)]
pub struct TwoWayBlock {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_token_to_image: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub norm3: LayerNorm,
    pub cross_image_to_token: Attention,
    pub norm4: LayerNorm,
    skip_first_pe: bool,
}

impl TwoWayBlock {
    fn register(
        reg: &mut ParameterRegistry,
        name: &str,
        dim: usize,
        heads: usize,
        skip_first_pe: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: Attention::register(reg, &format!("{name}.self_attn"), dim, heads, rng)?,
            norm1: LayerNorm::register(reg, &format!("{name}.norm1"), dim, Origin::Base)?,
            cross_token_to_image: Attention::register(
                reg,
                &format!("{name}.cross_t2i"),
                dim,
                heads,
                rng,
            )?,
            norm2: LayerNorm::register(reg, &format!("{name}.norm2"), dim, Origin::Base)?,
            mlp: Mlp::register(
                reg,
                &format!("{name}.mlp"),
                dim,
                2 * dim,
                dim,
                false,
                Init::Lecun,
                rng,
            )?,
            norm3: LayerNorm::register(reg, &format!("{name}.norm3"), dim, Origin::Base)?,
            cross_image_to_token: Attention::register(
                reg,
                &format!("{name}.cross_i2t"),
                dim,
                heads,
                rng,
            )?,
            norm4: LayerNorm::register(reg, &format!("{name}.norm4"), dim, Origin::Base)?,
            skip_first_pe,
        })
    }

    fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        reg: &'a ParameterRegistry,
        queries: Var,
        keys: Var,
        query_pe: Var,
        key_pe: Var,
    ) -> Result<(Var, Var)> {
        let mut queries = if self.skip_first_pe {
            self.self_attn.forward(g, reg, queries, queries, queries)?
        } else {
            let q = g.add(queries, query_pe)?;
            let a = self.self_attn.forward(g, reg, q, q, queries)?;
            g.add(queries, a)?
        };
        queries = self.norm1.forward(g, reg, queries)?;

        let q = g.add(queries, query_pe)?;
        let k = g.add(keys, key_pe)?;
        let a = self.cross_token_to_image.forward(g, reg, q, k, keys)?;
        queries = g.add(queries, a)?;
        queries = self.norm2.forward(g, reg, queries)?;

        let m = self.mlp.forward(g, reg, queries)?;
        queries = g.add(queries, m)?;
        queries = self.norm3.forward(g, reg, queries)?;

        let q = g.add(queries, query_pe)?;
        let k = g.add(keys, key_pe)?;
        let a = self.cross_image_to_token.forward(g, reg, k, q, queries)?;
        let keys = g.add(keys, a)?;
        let keys = self.norm4.forward(g, reg, keys)?;
        Ok((queries, keys))
    }
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    /// `[2, D]`: row 0 is the IoU token, row 1 the mask token.
    pub output_tokens: ParamId,
    pub blocks: Vec<TwoWayBlock>,
    pub final_attn: Attention,
    pub norm_final: LayerNorm,
    /// `D -> k²·D'` followed by a pixel shuffle onto the mask grid.
    pub upscale: Linear,
    pub pixel_proj: Linear,
    pub hypernet: Mlp,
    pub iou_head: Mlp,
    dim: usize,
    grid_side: usize,
    upscale_factor: usize,
    mask_dim: usize,
}

/// Decoder outputs still attached to the graph.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    /// `[mask_side, mask_side]`
    pub low_res_logits: Var,
    /// `[1, 1]`, pre-sigmoid.
    pub iou_logit: Var,
}

/// Per-pixel logits: `pixel_embeddings [P, D'] · mask_vector [1, D']ᵀ`.
pub fn mask_logits(g: &mut Graph<'_>, pixel_embeddings: Var, mask_vector: Var) -> Result<Var> {
    let t = g.transpose(mask_vector, 0, 1)?;
    g.matmul(pixel_embeddings, t)
}

impl MaskDecoder {
    pub fn register(
        reg: &mut ParameterRegistry,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = cfg.decoder_dim;
        let heads = cfg.num_heads;
        let k = cfg.mask_upscale();
        let dm = cfg.mask_embed_dim();
        let output_tokens = reg.register(
            "decoder.output_tokens",
            super::layers::normal_tensor(rng, &[2, d], 1.0),
            Origin::Base,
            true,
        )?;
        let blocks = (0..2)
            .map(|i| {
                TwoWayBlock::register(reg, &format!("decoder.blocks.{i}"), d, heads, i == 0, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            output_tokens,
            blocks,
            final_attn: Attention::register(reg, "decoder.final_attn", d, heads, rng)?,
            norm_final: LayerNorm::register(reg, "decoder.norm_final", d, Origin::Base)?,
            upscale: Linear::register(
                reg,
                "decoder.upscale",
                d,
                k * k * dm,
                Origin::Base,
                Init::Lecun,
                rng,
            )?,
            pixel_proj: Linear::register(
                reg,
                "decoder.pixel_proj",
                dm,
                dm,
                Origin::Base,
                Init::Lecun,
                rng,
            )?,
            hypernet: Mlp::register(reg, "decoder.hypernet", d, d, dm, false, Init::Lecun, rng)?,
            iou_head: Mlp::register(reg, "decoder.iou_head", d, d, 1, false, Init::Lecun, rng)?,
            dim: d,
            grid_side: cfg.grid_side(),
            upscale_factor: k,
            mask_dim: dm,
        })
    }

    /// `image_embedding`: `[side², D]`; `image_pe`: dense positional
    /// features of the same shape; `prompt_tokens`: `[n, D]`.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        reg: &'a ParameterRegistry,
        image_embedding: Var,
        image_pe: &[f64],
        prompt_tokens: Var,
    ) -> Result<DecoderOutput> {
        let n_img = self.grid_side * self.grid_side;
        let es = g.shape(image_embedding).to_vec();
        if es != [n_img, self.dim] {
            return Err(Error::shape(
                "decode_mask",
                format!("image embedding {es:?}, expected [{n_img}, {}]", self.dim),
            ));
        }
        let ps = g.shape(prompt_tokens).to_vec();
        if ps.len() != 2 || ps[1] != self.dim {
            return Err(Error::shape(
                "decode_mask",
                format!("prompt tokens {ps:?}, expected [n, {}]", self.dim),
            ));
        }
        let out_tokens = g.param(reg, self.output_tokens);
        let tokens = g.concat(&[out_tokens, prompt_tokens], 0)?;
        let key_pe = g.input(Tensor::new(vec![n_img, self.dim], image_pe.to_vec())?);

        let mut queries = tokens;
        let mut keys = image_embedding;
        for block in &self.blocks {
            (queries, keys) = block.forward(g, reg, queries, keys, tokens, key_pe)?;
        }
        let q = g.add(queries, tokens)?;
        let k = g.add(keys, key_pe)?;
        let a = self.final_attn.forward(g, reg, q, k, keys)?;
        queries = g.add(queries, a)?;
        queries = self.norm_final.forward(g, reg, queries)?;

        let iou_token = g.slice(queries, 0, 0, 1)?;
        let mask_token = g.slice(queries, 0, 1, 2)?;

        let pixels = self.pixel_embeddings(g, reg, keys)?;
        let mask_vector = self.hypernet.forward(g, reg, mask_token)?;
        let logits = mask_logits(g, pixels, mask_vector)?;
        let side = self.grid_side * self.upscale_factor;
        let low_res_logits = g.reshape(logits, &[side, side])?;
        let iou_logit = self.iou_head.forward(g, reg, iou_token)?;
        Ok(DecoderOutput {
            low_res_logits,
            iou_logit,
        })
    }

    /// `[side², D]` image tokens -> `[(k·side)², D']` per-pixel embeddings.
    pub fn pixel_embeddings<'a>(
        &self,
        g: &mut Graph<'a>,
        reg: &'a ParameterRegistry,
        keys: Var,
    ) -> Result<Var> {
        let (s, k, dm) = (self.grid_side, self.upscale_factor, self.mask_dim);
        let up = self.upscale.forward(g, reg, keys)?;
        let up = g.gelu(up);
        let up = g.reshape(up, &[s, s, k, k, dm])?;
        let up = g.transpose(up, 1, 2)?;
        let up = g.reshape(up, &[s * k * s * k, dm])?;
        let px = self.pixel_proj.forward(g, reg, up)?;
        Ok(g.gelu(px))
    }
}
