//! Single-plane raster images with physical pixel spacing.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageReader};

use crate::error::{Error, Result};

/// A grayscale or RGB image stored as interleaved `f32` samples.
///
/// Raw integer intensities are kept as-is (an 8-bit pixel of 200 becomes
/// `200.0`); intensity normalization happens in the backbone preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
    /// Micrometres per pixel.
    pub spacing_um: f64,
}

impl ImagePlane {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
        spacing_um: f64,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input("image has zero extent".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Input(format!(
                "expected 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Contract(format!(
                "image buffer holds {} samples, {}x{}x{} needs {}",
                data.len(),
                width,
                height,
                channels,
                width * height * channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            spacing_um,
        })
    }

    pub fn from_gray(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(width, height, 1, data, 1.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
            1.0,
        )
    }

    pub fn with_spacing(mut self, spacing_um: f64) -> Self {
        self.spacing_um = spacing_um;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Copies the window at `(x0, y0)`; the window must lie inside the image.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Contract(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Self::new(w, h, c, data, self.spacing_um)
    }

    /// Converts to `channels` output channels: RGB collapses to its channel
    /// mean, grayscale is replicated.
    pub fn to_channels(&self, channels: usize) -> Result<Self> {
        if channels == self.channels {
            return Ok(self.clone());
        }
        let n = self.width * self.height;
        let data = match (self.channels, channels) {
            (3, 1) => (0..n)
                .map(|i| (self.data[3 * i] + self.data[3 * i + 1] + self.data[3 * i + 2]) / 3.0)
                .collect(),
            (1, 3) => self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            (from, to) => {
                return Err(Error::Config(format!(
                    "cannot convert {from}-channel image to {to} channels"
                )))
            }
        };
        Self::new(self.width, self.height, channels, data, self.spacing_um)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = ImageReader::open(path)
            .map_err(|e| Error::file(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::file(path, e))?;
        Self::from_dynamic(reader.decode()?)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let reader = ImageReader::new(Cursor::new(bytes)).with_guessed_format()?;
        Self::from_dynamic(reader.decode()?)
    }

    fn from_dynamic(img: DynamicImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            DynamicImage::ImageLuma8(buf) => {
                Self::new(w, h, 1, buf.into_raw().into_iter().map(f32::from).collect(), 1.0)
            }
            DynamicImage::ImageLuma16(buf) => {
                Self::new(w, h, 1, buf.into_raw().into_iter().map(f32::from).collect(), 1.0)
            }
            DynamicImage::ImageLumaA8(_) => {
                let buf = img.to_luma8();
                Self::new(w, h, 1, buf.into_raw().into_iter().map(f32::from).collect(), 1.0)
            }
            DynamicImage::ImageLumaA16(_) => {
                let buf = img.to_luma16();
                Self::new(w, h, 1, buf.into_raw().into_iter().map(f32::from).collect(), 1.0)
            }
            DynamicImage::ImageRgb8(buf) => {
                Self::new(w, h, 3, buf.into_raw().into_iter().map(f32::from).collect(), 1.0)
            }
            DynamicImage::ImageRgba8(_) => {
                let buf = img.to_rgb8();
                Self::new(w, h, 3, buf.into_raw().into_iter().map(f32::from).collect(), 1.0)
            }
            other => Err(Error::Input(format!(
                "unsupported pixel format {:?}; expected 8/16-bit grayscale or 8-bit RGB",
                other.color()
            ))),
        }
    }

    /// Writes an 8-bit PNG, clamping samples to `[0, 255]`.
    pub fn save_png8(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_copies_window() {
        let data: Vec<f32> = (0..20).map(|v| v as f32).collect();
        let img = ImagePlane::from_gray(5, 4, data).unwrap();
        let c = img.crop(1, 2, 3, 2).unwrap();
        assert_eq!(c.data(), &[11.0, 12.0, 13.0, 16.0, 17.0, 18.0]);
        assert!(img.crop(3, 0, 3, 1).is_err());
    }

    #[test]
    fn channel_conversion() {
        let img = ImagePlane::new(1, 1, 3, vec![3.0, 6.0, 9.0], 1.0).unwrap();
        assert_eq!(img.to_channels(1).unwrap().data(), &[6.0]);
        let g = ImagePlane::from_gray(1, 1, vec![2.0]).unwrap();
        assert_eq!(g.to_channels(3).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn png_round_trip_16bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g16.png");
        let raw: Vec<u16> = vec![0, 1000, 40000, 65535];
        image::ImageBuffer::<image::Luma<u16>, _>::from_raw(2, 2, raw)
            .unwrap()
            .save(&path)
            .unwrap();
        let img = ImagePlane::load(&path).unwrap();
        assert_eq!(img.channels(), 1);
        assert_eq!(img.data(), &[0.0, 1000.0, 40000.0, 65535.0]);
    }
}
