//! Samples on disk and in memory: paired PNG loading, resizing,
//! normalization, splitting, augmentation and synthetic data.

mod augment;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

pub use augment::{augment, hflip, rot90, shift_scale_rotate, vflip, AugmentConfig};
pub use synth::{synth_generate, SynthConfig};

/// Per-channel RGB statistics used to standardize inputs.
pub const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const STD: [f64; 3] = [0.229, 0.224, 0.225];

pub const IMAGE_DIR: &str = "images";
pub const MASK_DIR: &str = "masks";

/// One image with its label map. The image is `[3, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Mask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Mask) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != mask.height || s[2] != mask.width {
            return Err(Error::Shape(format!(
                "image {:?} does not match a {}x{} mask",
                s, mask.height, mask.width
            )));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }
}

/// How mask pixel values map to labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskEncoding {
    /// 0 → background, 255 → class 1; anything else is rejected.
    #[default]
    Binary,
    /// The pixel value is the class index.
    Index,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if let (true, Some(stem)) = (is_png, path.file_stem().and_then(|s| s.to_str())) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Read an 8-bit PNG as a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| image_error(path, e))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let plane = h * w;
    Tensor::new(
        &[3, h, w],
        (0..3 * plane)
            .map(|i| raw[(i % plane) * 3 + i / plane] as f64 / 255.0)
            .collect(),
    )
}

pub fn read_mask(path: &Path, encoding: MaskEncoding) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| image_error(path, e))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = img
        .into_raw()
        .into_iter()
        .map(|v| match (encoding, v) {
            (MaskEncoding::Index, v) => Ok(v),
            (MaskEncoding::Binary, 0) => Ok(0),
            (MaskEncoding::Binary, 255) => Ok(1),
            (MaskEncoding::Binary, v) => Err(Error::Labeling(format!(
                "{}: mask value {v} is neither 0 nor 255",
                path.display()
            ))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Mask::new(h, w, labels)
}

/// Load `{stem}.png` pairs from two directories, sorted by stem.
pub fn load_dataset(image_dir: &Path, mask_dir: &Path) -> Result<Vec<Sample>> {
    load_dataset_with(image_dir, mask_dir, MaskEncoding::Binary)
}

pub fn load_dataset_with(
    image_dir: &Path,
    mask_dir: &Path,
    encoding: MaskEncoding,
) -> Result<Vec<Sample>> {
    let images = png_stems(image_dir)?;
    let masks = png_stems(mask_dir)?;
    let mut orphans: Vec<String> = images
        .iter()
        .filter(|(s, _)| !masks.contains_key(*s))
        .chain(masks.iter().filter(|(s, _)| !images.contains_key(*s)))
        .map(|(_, p)| p.display().to_string())
        .collect();
    if !orphans.is_empty() {
        orphans.sort();
        return Err(Error::Pairing { orphans });
    }
    images
        .iter()
        .map(|(stem, ipath)| {
            let image = read_image(ipath)?;
            let mask = read_mask(&masks[stem], encoding)?;
            let (h, w) = (image.shape()[1], image.shape()[2]);
            if (h, w) != (mask.height, mask.width) {
                return Err(Error::Shape(format!(
                    "{stem}: image is {h}x{w} but mask is {}x{}",
                    mask.height, mask.width
                )));
            }
            Sample::new(stem.clone(), image, mask)
        })
        .collect()
}

/// Load a `root/images`, `root/masks` dataset.
pub fn load_root(root: &Path) -> Result<Vec<Sample>> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    load_dataset(&root.join(IMAGE_DIR), &root.join(MASK_DIR))
}

pub fn write_image(image: &Tensor, path: &Path) -> Result<()> {
    let [_, h, w]: [usize; 3] = image
        .shape()
        .try_into()
        .map_err(|_| Error::Shape("expected [3, H, W]".into()))?;
    let plane = h * w;
    let d = image.data();
    let raw: Vec<u8> = (0..plane * 3)
        .map(|i| (d[(i % 3) * plane + i / 3].clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::RgbImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer matches dims")
        .save(path)
        .map_err(|e| image_error(path, e))
}

pub fn write_mask(mask: &Mask, path: &Path, encoding: MaskEncoding) -> Result<()> {
    let raw = match encoding {
        MaskEncoding::Binary => mask
            .labels
            .iter()
            .map(|&l| if l > 0 { 255 } else { 0 })
            .collect(),
        MaskEncoding::Index => mask.labels.clone(),
    };
    image::GrayImage::from_raw(mask.width as u32, mask.height as u32, raw)
        .expect("buffer matches dims")
        .save(path)
        .map_err(|e| image_error(path, e))
}

/// Write samples as `root/images/{id}.png` and `root/masks/{id}.png`.
pub fn write_dataset(samples: &[Sample], root: &Path) -> Result<()> {
    for sub in [IMAGE_DIR, MASK_DIR] {
        fs::create_dir_all(root.join(sub)).map_err(|e| Error::io(root.join(sub), e))?;
    }
    for s in samples {
        write_image(
            &s.image,
            &root.join(IMAGE_DIR).join(format!("{}.png", s.id)),
        )?;
        write_mask(
            &s.mask,
            &root.join(MASK_DIR).join(format!("{}.png", s.id)),
            MaskEncoding::Binary,
        )?;
    }
    Ok(())
}

/// Sample a single channel bilinearly at half-pixel-aligned coordinates.
fn bilinear_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let x = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (x.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, x - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(h, oh), axis(w, ow));
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Nearest source index for each output position.
fn nearest_axis(n_in: usize, n_out: usize) -> Vec<usize> {
    (0..n_out)
        .map(|o| (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1))
        .collect()
}

/// Bilinear image, nearest-neighbour mask.
pub fn resize(sample: &Sample, height: usize, width: usize) -> Result<Sample> {
    if height == 0 || width == 0 {
        return Err(Error::Shape("cannot resize to an empty image".into()));
    }
    let (h, w) = (sample.height(), sample.width());
    if (h, w) == (height, width) {
        return Ok(sample.clone());
    }
    let plane = h * w;
    let data: Vec<f64> = (0..3)
        .flat_map(|c| {
            bilinear_plane(
                &sample.image.data()[c * plane..(c + 1) * plane],
                h,
                w,
                height,
                width,
            )
        })
        .collect();
    let (ys, xs) = (nearest_axis(h, height), nearest_axis(w, width));
    let labels = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| sample.mask.at(y, x)))
        .collect();
    Sample::new(
        sample.id.clone(),
        Tensor::new(&[3, height, width], data)?,
        Mask::new(height, width, labels)?,
    )
}

/// `(x − μ_c) / σ_c` per channel of a `[3, H, W]` (or `[B, 3, H, W]`) image.
pub fn normalize(image: &Tensor) -> Tensor {
    per_channel(image, |x, c| (x - MEAN[c]) / STD[c])
}

pub fn denormalize(image: &Tensor) -> Tensor {
    per_channel(image, |x, c| x * STD[c] + MEAN[c])
}

fn per_channel(image: &Tensor, f: impl Fn(f64, usize) -> f64) -> Tensor {
    let s = image.shape();
    let plane = s[s.len() - 2..].iter().product::<usize>();
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = f(*v, (i / plane) % 3);
    }
    out
}

/// Normalized `[B, 3, H, W]` input batch.
pub fn stack_images(samples: &[&Sample]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Usage("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    if samples.iter().any(|s| (s.height(), s.width()) != (h, w)) {
        return Err(Error::Shape(
            "samples in a batch must share their size".into(),
        ));
    }
    let data = samples
        .iter()
        .flat_map(|s| s.image.data().iter().copied())
        .collect();
    Ok(normalize(&Tensor::new(&[samples.len(), 3, h, w], data)?))
}

/// Seeded shuffle, then the first `round(0.8·n)` samples train.
pub fn split_80_20(samples: &[Sample], seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let n = samples.len();
    if n < 5 {
        return Err(Error::Split(format!(
            "need at least 5 samples to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // 0.8·n never lands on a half, so this is round-to-nearest
    let n_train = (4 * n + 2) / 5;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}
