//! RGB images with channel-planar `f32` storage in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const CHANNELS: usize = 3;

/// Per-channel input normalization applied when images enter the network.
pub const INPUT_MEAN: f32 = 0.5;
pub const INPUT_STD: f32 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    /// `[3, H, W]` row-major.
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("image size {height}x{width}")));
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::Dimension(format!(
                "{} values for a 3x{height}x{width} image",
                data.len()
            )));
        }
        Ok(ImageBuffer {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(CHANNELS * plane);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, plane));
        }
        ImageBuffer {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Self::filled(height, width, [0.0; 3]);
        for y in 0..height {
            for x in 0..width {
                img.set_pixel(y, x, f(y, x));
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self::from_fn(h as usize, w as usize, |y, x| {
            let p = img.get_pixel(x as u32, y as u32).0;
            [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0]
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            image::Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    /// Reads any PNG or JPEG file, converting to 8-bit RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Writes an 8-bit image; the format follows the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }
}

/// Stacks images of one size into a normalized `[B, 3, H, W]` tensor.
pub fn to_batch<E: Element>(images: &[&ImageBuffer]) -> Result<Tensor<E>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Dimension("empty image batch".into()))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
    for img in images {
        if img.dims() != (h, w) {
            return Err(Error::Dimension(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height, img.width
            )));
        }
        data.extend(
            img.data
                .iter()
                .map(|&v| E::of(((v - INPUT_MEAN) / INPUT_STD) as f64)),
        );
    }
    Tensor::new(&[images.len(), CHANNELS, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(ImageBuffer::new(2, 2, vec![0.0; 12]).is_ok());
        assert!(ImageBuffer::new(2, 2, vec![0.0; 11]).is_err());
        assert!(ImageBuffer::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let img = ImageBuffer::from_fn(5, 3, |y, x| {
            [(y * 40) as f32 / 255.0, (x * 70) as f32 / 255.0, 1.0]
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        img.save(&path).unwrap();
        let back = ImageBuffer::load(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn missing_file_is_load_error() {
        assert!(matches!(
            ImageBuffer::load(Path::new("/nonexistent/x.png")),
            Err(Error::Load { .. })
        ));
    }

    #[test]
    fn batch_normalizes() {
        let a = ImageBuffer::filled(2, 1, [0.5, 0.75, 0.25]);
        let t: Tensor<f64> = to_batch(&[&a, &a]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 1]);
        assert_eq!(&t.to_vec()[..6], &[0.0, 0.0, 1.0, 1.0, -1.0, -1.0]);
        let b = ImageBuffer::filled(1, 1, [0.0; 3]);
        assert!(to_batch::<f64>(&[&a, &b]).is_err());
    }
}
