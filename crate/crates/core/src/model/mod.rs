//! Small promptable segmentation transformer: ViT image encoder, point
//! prompt encoder and two-way mask decoder.

mod config;
mod decoder;
mod encoder;
pub mod layers;
mod prompt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;
pub use decoder::{mask_logits, DecoderOutput, MaskDecoder, TwoWayBlock};
pub use encoder::{EncoderBlock, EncoderOutput, ImageEncoder};
pub use prompt::{ClickLabel, ClickPrompt, FourierFeatures, PromptEncoder, FOURIER_SEED};

use crate::adapters::{AdapterSet, PlacementSpec};
use crate::autodiff::{sigmoid_scalar, Graph, ParameterRegistry, Tensor, Var};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Probability above which a pixel is foreground.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPrediction {
    /// `[mask_side, mask_side]`
    pub low_res_logits: Tensor,
    /// `[image_size, image_size]`, values in `[0, 1]`.
    pub prob_map: Tensor,
    pub iou_estimate: f64,
}

impl MaskPrediction {
    pub fn binary_mask(&self) -> BinaryMask {
        let s = self.prob_map.shape();
        BinaryMask::threshold(s[0], s[1], self.prob_map.data(), MASK_THRESHOLD)
            .expect("prob_map is 2-d")
    }
}

/// Anything that maps an image and clicks to a mask prediction.
pub trait Segmenter {
    fn image_size(&self) -> usize;
    fn predict(&self, image: &Tensor, clicks: &[ClickPrompt]) -> Result<MaskPrediction>;
}

/// Graph handles produced by [`SegModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub tokens: Var,
    pub encoder: EncoderOutput,
    pub image_embedding: Var,
    pub prompt_tokens: Var,
    pub decoder: DecoderOutput,
}

#[derive(Debug, Clone)]
pub struct SegModel {
    cfg: ModelConfig,
    registry: ParameterRegistry,
    encoder: ImageEncoder,
    prompt: PromptEncoder,
    decoder: MaskDecoder,
    adapters: Option<AdapterSet>,
    image_pe: Vec<f64>,
}

/// Row-major `out_side × out_side` bilinear resize of a square grid,
/// half-pixel aligned (corners not pinned).
pub fn bilinear_upsample(src: &[f64], in_side: usize, out_side: usize) -> Vec<f64> {
    let taps: Vec<(usize, usize, f64)> = (0..out_side)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * in_side as f64 / out_side as f64 - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(in_side - 1);
            let i1 = (i0 + 1).min(in_side - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect();
    let mut rows = vec![0.0; out_side * in_side];
    for (oy, &(y0, y1, fy)) in taps.iter().enumerate() {
        for x in 0..in_side {
            rows[oy * in_side + x] =
                src[y0 * in_side + x] * (1.0 - fy) + src[y1 * in_side + x] * fy;
        }
    }
    let mut out = vec![0.0; out_side * out_side];
    for oy in 0..out_side {
        for (ox, &(x0, x1, fx)) in taps.iter().enumerate() {
            out[oy * out_side + ox] =
                rows[oy * in_side + x0] * (1.0 - fx) + rows[oy * in_side + x1] * fx;
        }
    }
    out
}

impl SegModel {
    /// Builds a model with freshly initialized base parameters. Parameter
    /// registration order is a pure function of `cfg`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut registry = ParameterRegistry::new();
        let encoder = ImageEncoder::register(&mut registry, &cfg, &mut rng)?;
        let prompt =
            PromptEncoder::register(&mut registry, cfg.decoder_dim, cfg.image_size, &mut rng)?;
        let decoder = MaskDecoder::register(&mut registry, &cfg, &mut rng)?;
        let image_pe = prompt.features.dense(cfg.grid_side());
        Ok(Self {
            cfg,
            registry,
            encoder,
            prompt,
            decoder,
            adapters: None,
            image_pe,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &ParameterRegistry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut ParameterRegistry {
        &mut self.registry
    }

    pub fn encoder(&self) -> &ImageEncoder {
        &self.encoder
    }

    pub fn prompt_encoder(&self) -> &PromptEncoder {
        &self.prompt
    }

    pub fn decoder(&self) -> &MaskDecoder {
        &self.decoder
    }

    pub fn adapters(&self) -> Option<&AdapterSet> {
        self.adapters.as_ref()
    }

    /// Placement in effect; the empty spec when nothing is attached.
    pub fn placement(&self) -> PlacementSpec {
        self.adapters
            .as_ref()
            .map(|a| *a.spec())
            .unwrap_or_default()
    }

    pub fn variant_name(&self) -> String {
        self.placement().variant_name()
    }

    pub(crate) fn attach(&mut self, spec: PlacementSpec, seed: u64) -> Result<()> {
        if self.adapters.is_some() {
            return Err(Error::AlreadyAttached);
        }
        self.adapters = Some(AdapterSet::register(
            &mut self.registry,
            &self.cfg,
            spec,
            seed,
        )?);
        Ok(())
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let want = [self.cfg.image_size, self.cfg.image_size, self.cfg.in_chans];
        if image.shape() != want {
            return Err(Error::shape(
                "predict",
                format!("image {:?}, expected {want:?}", image.shape()),
            ));
        }
        Ok(())
    }

    /// Records the full pipeline on `g`.
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        image: &Tensor,
        clicks: &[ClickPrompt],
    ) -> Result<ForwardOutput> {
        self.check_image(image)?;
        let reg = &self.registry;
        let img = g.input(image.clone().with_grad(false));
        let tokens = self.encoder.patch_embed(g, reg, img)?;
        let encoder = self
            .encoder
            .forward_blocks(g, reg, tokens, self.adapters.as_ref())?;
        let image_embedding = self.encoder.neck(g, reg, encoder.grid)?;
        let prompt_tokens = self.prompt.encode(g, reg, clicks)?;
        let decoder =
            self.decoder
                .forward(g, reg, image_embedding, &self.image_pe, prompt_tokens)?;
        Ok(ForwardOutput {
            tokens,
            encoder,
            image_embedding,
            prompt_tokens,
            decoder,
        })
    }

    /// Turns low-res logits into a full-resolution prediction.
    pub fn finish(&self, low_res: &[f64], iou_logit: f64) -> Result<MaskPrediction> {
        let side = self.cfg.mask_side();
        let size = self.cfg.image_size;
        let up = bilinear_upsample(low_res, side, size);
        Ok(MaskPrediction {
            low_res_logits: Tensor::new(vec![side, side], low_res.to_vec())?,
            prob_map: Tensor::new(
                vec![size, size],
                up.into_iter().map(sigmoid_scalar).collect(),
            )?,
            iou_estimate: sigmoid_scalar(iou_logit),
        })
    }
}

impl Segmenter for SegModel {
    fn image_size(&self) -> usize {
        self.cfg.image_size
    }

    fn predict(&self, image: &Tensor, clicks: &[ClickPrompt]) -> Result<MaskPrediction> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, image, clicks)?;
        let low = g.value(out.decoder.low_res_logits).to_vec();
        let iou = g.scalar(out.decoder.iou_logit);
        self.finish(&low, iou)
    }
}
