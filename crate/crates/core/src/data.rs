//! Synthetic land-cover scenes and on-disk datasets.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metrics::{LabelCodec, LabelMap};
use crate::netpbm::{GrayImage, RgbImage};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the additive pixel noise, in 8-bit units.
pub const NOISE_STD: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rectangle,
    Disk,
    Stripe,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Rectangle, Shape::Disk, Shape::Stripe];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Rectangle => "rectangle",
            Shape::Disk => "disk",
            Shape::Stripe => "stripe",
        }
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown shape {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    /// Background is class 0; shapes use classes `1..num_classes`.
    pub num_classes: usize,
    pub shapes: Vec<Shape>,
    /// Inclusive range of shapes painted per image.
    pub shapes_per_image: (usize, usize),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 8,
            image_size: 48,
            num_classes: 4,
            shapes: Shape::ALL.to_vec(),
            shapes_per_image: (2, 5),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: RgbImage,
    pub labels: LabelMap,
}

impl Sample {
    pub fn new(image: RgbImage, labels: LabelMap) -> Result<Self> {
        if image.width != labels.width || image.height != labels.height {
            return Err(Error::dim(format!(
                "image {}×{} with label map {}×{}",
                image.height, image.width, labels.height, labels.width
            )));
        }
        Ok(Self { image, labels })
    }
}

fn validate(spec: &SyntheticSpec, codec: &LabelCodec) -> Result<()> {
    if spec.num_classes > codec.len() {
        return Err(Error::config(format!(
            "{} classes requested, the palette has {}",
            spec.num_classes,
            codec.len()
        )));
    }
    if spec.num_classes == 0 {
        return Err(Error::config("synthetic data needs at least one class"));
    }
    let (lo, hi) = spec.shapes_per_image;
    if lo > hi {
        return Err(Error::config(format!("shapes per image range {lo}..={hi} is empty")));
    }
    if hi > 0 && spec.shapes.is_empty() && spec.num_classes > 1 {
        return Err(Error::config("no shape kinds to draw from"));
    }
    if spec.image_size == 0 && spec.count > 0 {
        return Err(Error::config("synthetic image size must be positive"));
    }
    Ok(())
}

/// Deterministic scenes: shapes over a background, each painted with its
/// class color plus Gaussian noise. Label maps are noise-free.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    let codec = LabelCodec::land_cover();
    validate(spec, &codec)?;
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    (0..spec.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let labels = paint_labels(spec, &mut rng);
            let data = labels
                .data
                .iter()
                .flat_map(|&c| codec.color(c as usize))
                .map(|v| (v as f64 + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
                .collect();
            Sample::new(RgbImage::new(spec.image_size, spec.image_size, data)?, labels)
        })
        .collect()
}

fn paint_labels(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> LabelMap {
    let n = spec.image_size;
    let mut labels = LabelMap::filled(n, n, 0);
    if spec.num_classes < 2 || spec.shapes.is_empty() {
        return labels;
    }
    let shapes = rng.random_range(spec.shapes_per_image.0..=spec.shapes_per_image.1);
    for _ in 0..shapes {
        let class = rng.random_range(1..spec.num_classes) as u8;
        let kind = spec.shapes[rng.random_range(0..spec.shapes.len())];
        let lo = (n / 6).max(1);
        let hi = (n / 2).max(lo);
        match kind {
            Shape::Rectangle => {
                let (h, w) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
                let (y0, x0) = (rng.random_range(0..=n - h), rng.random_range(0..=n - w));
                fill(&mut labels, class, |y, x| y >= y0 && y < y0 + h && x >= x0 && x < x0 + w);
            }
            Shape::Disk => {
                let r = rng.random_range(lo as f64 / 2.0..=hi as f64 / 2.0);
                let (cy, cx) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
                fill(&mut labels, class, |y, x| {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    dy * dy + dx * dx <= r * r
                });
            }
            Shape::Stripe => {
                let h = rng.random_range(lo..=(3 * lo / 2).min(n));
                let y0 = rng.random_range(0..=n - h);
                fill(&mut labels, class, |y, _| y >= y0 && y < y0 + h);
            }
        }
    }
    labels
}

fn fill(labels: &mut LabelMap, class: u8, inside: impl Fn(usize, usize) -> bool) {
    let w = labels.width;
    for (i, v) in labels.data.iter_mut().enumerate() {
        if inside(i / w, i % w) {
            *v = class;
        }
    }
}

/// `H×W×3` tensor with channel values scaled to `[0, 1]`.
pub fn image_to_tensor<T: Scalar>(image: &RgbImage) -> Tensor<T> {
    let data = image.data.iter().map(|&v| T::lit(v as f64 / 255.0)).collect();
    Tensor::new([image.height, image.width, 3], data).expect("RGB byte count")
}

/// Inverse of [`image_to_tensor`], rounding and clamping.
pub fn tensor_to_image<T: Scalar>(x: &Tensor<T>) -> Result<RgbImage> {
    let (h, w, c) = x.dims3()?;
    if c != 3 {
        return Err(Error::dim(format!("{c}-channel tensor is not an RGB image")));
    }
    let data = x.data().iter().map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    RgbImage::new(w, h, data)
}

pub fn labels_to_gray(labels: &LabelMap) -> GrayImage {
    GrayImage { width: labels.width, height: labels.height, data: labels.data.clone() }
}

pub fn gray_to_labels(image: &GrayImage) -> LabelMap {
    LabelMap { height: image.height, width: image.width, data: image.data.clone() }
}

const IMAGES: &str = "images";
const LABELS: &str = "labels";

/// Writes `images/NNNN.ppm` and `labels/NNNN.pgm` (class indices).
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    for sub in [IMAGES, LABELS] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    for (i, s) in samples.iter().enumerate() {
        s.image.save(dir.join(IMAGES).join(format!("{i:04}.ppm")))?;
        labels_to_gray(&s.labels).save(dir.join(LABELS).join(format!("{i:04}.pgm")))?;
    }
    Ok(())
}

/// Reads every `images/*.ppm` with its label file, in name order. Labels
/// are either a class-index `.pgm` or a color-coded `.ppm`.
pub fn load_dataset(dir: &Path, codec: &LabelCodec) -> Result<Vec<Sample>> {
    let image_dir = dir.join(IMAGES);
    let mut paths: Vec<PathBuf> = fs::read_dir(&image_dir)
        .map_err(|e| Error::io(&image_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|path| {
            let stem = path.file_stem().expect("file has a name");
            let label_base = dir.join(LABELS).join(stem);
            let gray = label_base.with_extension("pgm");
            let labels = if gray.exists() {
                gray_to_labels(&GrayImage::load(&gray)?)
            } else {
                codec.decode_rgb(&RgbImage::load(label_base.with_extension("ppm"))?)?
            };
            Sample::new(RgbImage::load(path)?, labels)
        })
        .collect()
}
