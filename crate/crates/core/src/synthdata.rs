//! Seeded synthetic corpus of faint, blurred, noisy blobs on smooth
//! backgrounds, plus loading of any corpus laid out the same way.
//!
//! Layout: `<root>/{train,val,test}/{images,masks}/<id>.png` and
//! `<root>/manifest.json`. Images are 8-bit grayscale or RGB; masks are 8-bit
//! with values 0 and 255.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::mask::Mask;
use crate::rng::{rng_for, streams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipse,
    #[default]
    Blob,
    Crescent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub image_size: usize,
    /// Foreground brightening before blur and noise.
    pub contrast: f64,
    pub noise_std: f64,
    /// Gaussian blur sigma in pixels; 0 disables blurring.
    pub blur_radius: f64,
    pub shape: ShapeFamily,
    /// Foreground area as a fraction of the image, `[min, max]`.
    pub area_range: (f64, f64),
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            train_count: 200,
            val_count: 20,
            test_count: 50,
            image_size: 64,
            contrast: 0.15,
            noise_std: 0.1,
            blur_radius: 2.0,
            shape: ShapeFamily::Blob,
            area_range: (0.05, 0.30),
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Val => self.val_count,
            Split::Test => self.test_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.train_count + self.val_count + self.test_count >= 1,
            "corpus needs at least one sample"
        );
        ensure!(self.image_size >= 8, "image_size must be at least 8");
        ensure!(
            self.contrast > 0.0 && self.contrast <= 1.0,
            "contrast {} outside (0, 1]",
            self.contrast
        );
        ensure!(self.noise_std >= 0.0, "noise_std must be non-negative");
        ensure!(self.blur_radius >= 0.0, "blur_radius must be non-negative");
        let (lo, hi) = self.area_range;
        ensure!(
            0.0 < lo && lo <= hi && hi < 0.5,
            "area_range ({lo}, {hi}) must satisfy 0 < min <= max < 0.5"
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub image_sha256: String,
    pub mask_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Generator settings; absent for indexed external folders.
    pub spec: Option<CorpusSpec>,
    pub image_channels: usize,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    fn write(&self, root: &Path) -> Result<()> {
        let path = root.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

/// A loaded sample. `image` is `(channels, height, width)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub split: Split,
    pub image: Tensor<f32>,
    pub mask: Mask,
}

/// One generated sample before it is written out.
#[derive(Clone, Debug)]
pub struct Generated {
    pub id: String,
    pub split: Split,
    pub image: GrayImage,
    pub mask: Mask,
}

impl Generated {
    /// Converts to a training sample without touching disk.
    pub fn into_sample(self) -> Result<SegSample> {
        let image = image_tensor(&DynamicImage::ImageLuma8(self.image), 1)?;
        Ok(SegSample {
            id: self.id,
            split: self.split,
            image,
            mask: self.mask,
        })
    }
}

/// Generates every sample of `split` in memory.
pub fn generate_split(spec: &CorpusSpec, split: Split) -> Result<Vec<SegSample>> {
    spec.validate()?;
    (0..spec.count(split))
        .map(|i| generate_sample(spec, split, i)?.into_sample())
        .collect()
}

pub fn sample_id(split: Split, index: usize) -> String {
    format!("{}-{index:05}", split.name())
}

/// Membership test in shape-local coordinates scaled so the shape has unit size.
enum Outline {
    Ellipse { aspect: f64 },
    Blob { harmonics: Vec<(f64, f64)> },
    Crescent { inner: f64, offset: f64 },
}

impl Outline {
    fn random(family: ShapeFamily, rng: &mut ChaCha8Rng) -> Self {
        match family {
            ShapeFamily::Ellipse => Outline::Ellipse {
                aspect: rng.random_range(0.5..1.0),
            },
            ShapeFamily::Blob => Outline::Blob {
                harmonics: (2..=5)
                    .map(|k| (rng.random_range(0.0..0.25) / k as f64 * 2.0, rng.random_range(0.0..2.0 * PI)))
                    .collect(),
            },
            ShapeFamily::Crescent => Outline::Crescent {
                inner: rng.random_range(0.6..0.85),
                offset: rng.random_range(0.35..0.6),
            },
        }
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            Outline::Ellipse { aspect } => u * u + (v / aspect) * (v / aspect) <= 1.0,
            Outline::Blob { harmonics } => {
                let theta = v.atan2(u);
                let r: f64 = 1.0
                    + harmonics
                        .iter()
                        .enumerate()
                        .map(|(i, &(a, phase))| a * ((i + 2) as f64 * theta + phase).cos())
                        .sum::<f64>();
                (u * u + v * v).sqrt() <= r
            }
            Outline::Crescent { inner, offset } => {
                let outer = u * u + v * v <= 1.0;
                let du = u - offset;
                outer && du * du + v * v > inner * inner
            }
        }
    }
}

fn rasterize(outline: &Outline, size: usize, cx: f64, cy: f64, scale: f64, angle: f64) -> Vec<bool> {
    let (s, c) = angle.sin_cos();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 + 0.5 - cx) / scale;
            let dy = (y as f64 + 0.5 - cy) / scale;
            out.push(outline.contains(c * dx + s * dy, -s * dx + c * dy));
        }
    }
    out
}

/// Draws a foreground region whose area fraction lies in `spec.area_range`.
fn draw_region(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let size = spec.image_size;
    let n = (size * size) as f64;
    let (lo, hi) = spec.area_range;
    loop {
        let target = rng.random_range(lo..=hi);
        let outline = Outline::random(spec.shape, rng);
        let angle = rng.random_range(0.0..PI);
        // Shapes extend at most ~1.5 units from their center.
        let radius = (target * n / PI).sqrt();
        let margin = (1.3 * radius).min(size as f64 / 2.0);
        let cx = rng.random_range(margin..=size as f64 - margin);
        let cy = rng.random_range(margin..=size as f64 - margin);
        let (mut a, mut b) = (0.1 * radius, 4.0 * radius);
        let mut best = Vec::new();
        for _ in 0..40 {
            let mid = 0.5 * (a + b);
            let region = rasterize(&outline, size, cx, cy, mid, angle);
            let frac = region.iter().filter(|&&v| v).count() as f64 / n;
            if frac < target {
                a = mid;
            } else {
                b = mid;
            }
            best = region;
        }
        let frac = best.iter().filter(|&&v| v).count() as f64 / n;
        if (lo..=hi).contains(&frac) {
            return best;
        }
    }
}

/// Smooth background plus brightened region, blurred, then noised and quantized.
fn render(spec: &CorpusSpec, region: &[bool], rng: &mut ChaCha8Rng) -> GrayImage {
    let size = spec.image_size;
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let field = ImageBuffer::from_fn(size as u32, size as u32, |x, y| {
        let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
        let wave: f64 = waves
            .iter()
            .map(|&(fx, fy, phase)| (2.0 * PI * (fx * u + fy * v) + phase).cos())
            .sum::<f64>()
            / 3.0;
        let inside = region[y as usize * size + x as usize];
        let value = 0.35 + 0.08 * wave + if inside { spec.contrast } else { 0.0 };
        Luma([value as f32])
    });
    let blurred = if spec.blur_radius > 0.0 {
        imageops::blur(&field, spec.blur_radius as f32)
    } else {
        field
    };
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite noise std");
    GrayImage::from_fn(size as u32, size as u32, |x, y| {
        let v = blurred.get_pixel(x, y)[0] as f64 + if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Deterministic sample `index` of `split`.
pub fn generate_sample(spec: &CorpusSpec, split: Split, index: usize) -> Result<Generated> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, streams::CORPUS, (split.index() << 32) | index as u64);
    let region = draw_region(spec, &mut rng);
    let image = render(spec, &region, &mut rng);
    Ok(Generated {
        id: sample_id(split, index),
        split,
        image,
        mask: Mask::new(spec.image_size, spec.image_size, region)?,
    })
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn split_dirs(root: &Path, split: Split) -> (std::path::PathBuf, std::path::PathBuf) {
    let base = root.join(split.name());
    (base.join("images"), base.join("masks"))
}

/// Writes every split under `root` and returns the manifest.
pub fn generate_corpus(spec: &CorpusSpec, root: &Path) -> Result<Manifest> {
    spec.validate()?;
    let mut samples = Vec::new();
    for split in Split::ALL {
        let (img_dir, mask_dir) = split_dirs(root, split);
        for dir in [&img_dir, &mask_dir] {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        for index in 0..spec.count(split) {
            let s = generate_sample(spec, split, index)?;
            let img_path = img_dir.join(format!("{}.png", s.id));
            let mask_path = mask_dir.join(format!("{}.png", s.id));
            s.image
                .save(&img_path)
                .map_err(|e| Error::Data(format!("writing {}: {e}", img_path.display())))?;
            s.mask.save_png(&mask_path)?;
            samples.push(ManifestEntry {
                image_sha256: sha256_file(&img_path)?,
                mask_sha256: sha256_file(&mask_path)?,
                id: s.id,
                split,
            });
        }
    }
    let manifest = Manifest {
        spec: Some(spec.clone()),
        image_channels: 1,
        samples,
    };
    manifest.write(root)?;
    Ok(manifest)
}

/// Writes a manifest for an existing folder laid out like a generated corpus.
/// Image and mask files are paired by file stem.
pub fn index_folder(root: &Path) -> Result<Manifest> {
    let mut samples = Vec::new();
    let mut channels = None;
    for split in Split::ALL {
        let (img_dir, mask_dir) = split_dirs(root, split);
        if !img_dir.exists() {
            continue;
        }
        let mut names: Vec<String> = fs::read_dir(&img_dir)
            .map_err(|e| Error::io(&img_dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".png"))
            .collect();
        names.sort();
        for name in names {
            let id = name.trim_end_matches(".png").to_string();
            let (img_path, mask_path) = (img_dir.join(&name), mask_dir.join(&name));
            ensure!(mask_path.exists(), "sample {id}: missing mask {}", mask_path.display());
            let img = image::open(&img_path).map_err(|e| Error::Data(format!("sample {id}: {e}")))?;
            let c = if img.color().has_color() { 3 } else { 1 };
            ensure!(
                *channels.get_or_insert(c) == c,
                "sample {id}: mixes grayscale and color images"
            );
            samples.push(ManifestEntry {
                image_sha256: sha256_file(&img_path)?,
                mask_sha256: sha256_file(&mask_path)?,
                id,
                split,
            });
        }
    }
    let manifest = Manifest {
        spec: None,
        image_channels: channels.unwrap_or(1),
        samples,
    };
    manifest.write(root)?;
    Ok(manifest)
}

fn image_tensor(img: &DynamicImage, channels: usize) -> Result<Tensor<f32>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match channels {
        1 => img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        3 => {
            let rgb = img.to_rgb8();
            let mut planes = vec![0.0; 3 * h * w];
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    planes[c * h * w + i] = px[c] as f32 / 255.0;
                }
            }
            planes
        }
        other => return Err(Error::Data(format!("unsupported channel count {other}"))),
    };
    Tensor::from_vec(&[channels, h, w], data)
}

/// Loads one image as a `(channels, size, size)` tensor in `[0, 1]`.
pub fn load_image(path: &Path, channels: usize, size: Option<usize>) -> Result<Tensor<f32>> {
    let mut img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if let Some(s) = size {
        if img.width() as usize != s || img.height() as usize != s {
            img = img.resize_exact(s as u32, s as u32, FilterType::Triangle);
        }
    }
    image_tensor(&img, channels)
}

fn load_sample(root: &Path, entry: &ManifestEntry, channels: usize, size: Option<usize>) -> Result<SegSample> {
    let (img_dir, mask_dir) = split_dirs(root, entry.split);
    let img_path = img_dir.join(format!("{}.png", entry.id));
    let mask_path = mask_dir.join(format!("{}.png", entry.id));
    for (path, expected) in [(&img_path, &entry.image_sha256), (&mask_path, &entry.mask_sha256)] {
        let actual = sha256_file(path)?;
        ensure!(
            &actual == expected,
            "{} does not match its manifest hash",
            path.display()
        );
    }
    let mut img = image::open(&img_path).map_err(|e| Error::Data(format!("{}: {e}", img_path.display())))?;
    let mut mask = Mask::load_png(&mask_path)?;
    ensure!(
        img.width() as usize == mask.width() && img.height() as usize == mask.height(),
        "image {}x{} and mask {}x{} differ in size",
        img.width(),
        img.height(),
        mask.width(),
        mask.height()
    );
    if let Some(s) = size {
        if mask.width() != s || mask.height() != s {
            img = img.resize_exact(s as u32, s as u32, FilterType::Triangle);
            let resized = imageops::resize(&mask.to_image(), s as u32, s as u32, FilterType::Nearest);
            mask = Mask::from_image(&resized)?;
        }
    }
    Ok(SegSample {
        id: entry.id.clone(),
        split: entry.split,
        image: image_tensor(&img, channels)?,
        mask,
    })
}

/// Samples of `split` in manifest order, resized to `size × size` when given.
pub fn load_corpus(root: &Path, split: Split, size: Option<usize>) -> Result<Vec<SegSample>> {
    let manifest = Manifest::read(root)?;
    manifest
        .entries(split)
        .map(|entry| {
            load_sample(root, entry, manifest.image_channels, size).map_err(|e| match e {
                Error::Data(msg) | Error::InvalidArgument(msg) => Error::Data(format!("sample {}: {msg}", entry.id)),
                Error::Io { path, source } => Error::Data(format!("sample {}: {}: {source}", entry.id, path.display())),
                other => other,
            })
        })
        .collect()
}
