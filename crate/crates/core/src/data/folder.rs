use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use super::{SegmentationSample, SyntheticSpec};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written next to exported images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: Option<SyntheticSpec>,
    pub ids: Vec<String>,
}

pub fn image_to_png_gray(image: &Tensor) -> Result<GrayImage> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 1 {
        return Err(Error::shape(
            "export",
            format!("image {s:?} is not [H, W, 1]"),
        ));
    }
    let bytes = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(GrayImage::from_raw(s[1] as u32, s[0] as u32, bytes).expect("buffer sized from shape"))
}

pub fn mask_to_png_gray(mask: &BinaryMask) -> GrayImage {
    let bytes = mask
        .data()
        .iter()
        .map(|&b| if b { 255 } else { 0 })
        .collect();
    GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes)
        .expect("buffer sized from dims")
}

/// Writes `images/<id>.png`, `masks/<id>.png` and the manifest.
pub fn export_folder(
    dir: &Path,
    samples: &[SegmentationSample],
    spec: Option<&SyntheticSpec>,
) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    for s in samples {
        image_to_png_gray(&s.image)?.save(dir.join("images").join(format!("{}.png", s.id)))?;
        mask_to_png_gray(&s.mask).save(dir.join("masks").join(format!("{}.png", s.id)))?;
    }
    let manifest = Manifest {
        spec: spec.cloned(),
        ids: samples.iter().map(|s| s.id.clone()).collect(),
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FolderPairing {
    /// `(stem, image path, mask path)` sorted by stem.
    pub pairs: Vec<(String, PathBuf, PathBuf)>,
    pub unpaired: Vec<PathBuf>,
}

fn pngs_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if let (true, Some(stem)) = (is_png, path.file_stem().and_then(|s| s.to_str())) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

pub fn pair_folder(dir: &Path) -> Result<FolderPairing> {
    let mut images = pngs_by_stem(&dir.join("images"))?;
    let mut masks = pngs_by_stem(&dir.join("masks"))?;
    let mut pairing = FolderPairing::default();
    for (stem, img) in std::mem::take(&mut images) {
        match masks.remove(&stem) {
            Some(mask) => pairing.pairs.push((stem, img, mask)),
            None => pairing.unpaired.push(img),
        }
    }
    pairing.unpaired.extend(masks.into_values());
    pairing.unpaired.sort();
    Ok(pairing)
}

/// Loads paired PNGs as grayscale in `[0, 1]`, resized to `image_size`;
/// masks are foreground where the 8-bit value exceeds 127.
pub fn load_folder(dir: &Path, image_size: usize) -> Result<Vec<SegmentationSample>> {
    let pairing = pair_folder(dir)?;
    for p in &pairing.unpaired {
        log::warn!("skipping unpaired file {}", p.display());
    }
    if pairing.pairs.is_empty() {
        return Err(Error::Invalid(format!(
            "no image/mask pairs under {}",
            dir.display()
        )));
    }
    let side = image_size as u32;
    pairing
        .pairs
        .iter()
        .map(|(stem, img_path, mask_path)| {
            let mut img = image::open(img_path)?.to_luma8();
            if img.dimensions() != (side, side) {
                img = image::imageops::resize(&img, side, side, FilterType::Triangle);
            }
            let mut mask = image::open(mask_path)?.to_luma8();
            if mask.dimensions() != (side, side) {
                mask = image::imageops::resize(&mask, side, side, FilterType::Nearest);
            }
            let pixels = img.pixels().map(|Luma([v])| *v as f64 / 255.0).collect();
            let bits = mask.pixels().map(|Luma([v])| *v > 127).collect();
            SegmentationSample::new(
                stem.clone(),
                Tensor::new(vec![image_size, image_size, 1], pixels)?.with_grad(false),
                BinaryMask::new(image_size, image_size, bits)?,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, Domain};

    #[test]
    fn empty_directory_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_folder(dir.path(), 16).is_err());
    }

    #[test]
    fn export_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::new(Domain::Target, 4, 16, 2);
        let samples = gen_synthetic(&spec).unwrap();
        export_folder(dir.path(), &samples, Some(&spec)).unwrap();
        let loaded = load_folder(dir.path(), 16).unwrap();
        assert_eq!(loaded, samples);
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap())
                .unwrap();
        assert_eq!(manifest.spec, Some(spec));
        assert_eq!(manifest.ids.len(), 4);
    }

    #[test]
    fn single_pair_loads_and_unpaired_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        let img = GrayImage::from_fn(8, 8, |x, _| Luma([(x * 30) as u8]));
        let mask = GrayImage::from_fn(8, 8, |x, y| Luma([if x + y > 7 { 255 } else { 0 }]));
        img.save(dir.path().join("images/a.png")).unwrap();
        mask.save(dir.path().join("masks/a.png")).unwrap();
        img.save(dir.path().join("images/orphan.png")).unwrap();

        let pairing = pair_folder(dir.path()).unwrap();
        assert_eq!(pairing.pairs.len(), 1);
        assert_eq!(pairing.unpaired.len(), 1);

        let loaded = load_folder(dir.path(), 8).unwrap();
        assert_eq!(loaded.len(), 1);
        let s = &loaded[0];
        assert_eq!(s.id, "a");
        assert_eq!(s.mask, BinaryMask::from_fn(8, 8, |x, y| x + y > 7));
        assert_eq!(s.image.data()[3], 90.0 / 255.0);
    }

    #[test]
    fn rgb_and_resize_are_handled() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        image::RgbImage::from_pixel(20, 20, image::Rgb([200, 200, 200]))
            .save(dir.path().join("images/x.png"))
            .unwrap();
        GrayImage::from_fn(20, 20, |x, _| Luma([if x < 10 { 255 } else { 0 }]))
            .save(dir.path().join("masks/x.png"))
            .unwrap();
        let s = &load_folder(dir.path(), 10).unwrap()[0];
        assert_eq!(s.image.shape(), [10, 10, 1]);
        assert!(s
            .image
            .data()
            .iter()
            .all(|&v| (v - 200.0 / 255.0).abs() < 1e-9));
        assert_eq!(s.mask, BinaryMask::from_fn(10, 10, |x, _| x < 5));
    }
}
