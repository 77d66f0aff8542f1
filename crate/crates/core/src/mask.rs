//! Binary masks and their 8-bit PNG encoding.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        ensure!(
            data.len() == height * width,
            "mask data has {} entries, expected {height}x{width}",
            data.len()
        );
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Foreground wherever `values[i] > threshold`.
    pub fn from_threshold<T: Scalar>(height: usize, width: usize, values: &[T], threshold: T) -> Result<Self> {
        Self::new(height, width, values.iter().map(|&v| v > threshold).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.len().max(1) as f64
    }

    /// `+1` for foreground, `−1` for background.
    pub fn to_signed<T: Scalar>(&self) -> Vec<T> {
        self.data
            .iter()
            .map(|&b| if b { T::one() } else { -T::one() })
            .collect()
    }

    pub fn check_same_shape(&self, other: &Mask) -> Result<()> {
        ensure!(
            self.height == other.height && self.width == other.width,
            "mask shapes differ: {}x{} vs {}x{}",
            self.height,
            self.width,
            other.height,
            other.width
        );
        Ok(())
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Accepts only the values 0 and 255.
    pub fn from_image(img: &GrayImage) -> Result<Self> {
        let mut data = Vec::with_capacity(img.len());
        for (i, &v) in img.as_raw().iter().enumerate() {
            match v {
                0 => data.push(false),
                255 => data.push(true),
                other => return Err(Error::Data(format!("mask pixel {i} has value {other}, expected 0 or 255"))),
            }
        }
        Self::new(img.height() as usize, img.width() as usize, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_image()
            .save(path)
            .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?
            .into_luma8();
        Self::from_image(&img).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
