//! Datasets: synthetic source/target generators, PNG folder IO, splits.

mod folder;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use folder::{
    export_folder, image_to_png_gray, load_folder, mask_to_png_gray, pair_folder, FolderPairing,
    Manifest, MANIFEST_FILE,
};
pub use synth::{
    gen_synthetic, rasterize, render_sample, Domain, Harmonic, IntensityProfile, Shape,
    SyntheticSpec,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    /// `[H, W, 1]`, values in `[0, 1]`.
    pub image: Tensor,
    pub mask: BinaryMask,
}

impl SegmentationSample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: BinaryMask) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 1 || (s[0], s[1]) != mask.dims() {
            return Err(Error::shape(
                "sample",
                format!("image {s:?} vs mask {:?}", mask.dims()),
            ));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }
}

/// Shuffled split; `round(n · train_frac)` samples go to the first part.
pub fn split(
    samples: Vec<SegmentationSample>,
    train_frac: f64,
    seed: u64,
) -> Result<(Vec<SegmentationSample>, Vec<SegmentationSample>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!(
            "train_frac {train_frac} not in (0, 1)"
        )));
    }
    let n = samples.len();
    let n_train = (n as f64 * train_frac).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "splitting {n} samples at {train_frac} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<SegmentationSample>> = samples.into_iter().map(Some).collect();
    let mut take = |i: &usize| slots[*i].take().expect("indices are a permutation");
    let train = order[..n_train].iter().map(&mut take).collect();
    let eval = order[n_train..].iter().map(&mut take).collect();
    Ok((train, eval))
}
