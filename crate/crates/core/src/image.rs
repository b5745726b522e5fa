use std::path::Path;

use image::{imageops::FilterType, GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Sketch,
    Photo,
}

/// Single image, `C x H x W`, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub size: usize,
    pub modality: Modality,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, size: usize, modality: Modality, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * size * size {
            return Err(Error::Contract(format!(
                "image data length {} does not match {channels}x{size}x{size}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Self { channels, size, modality, data })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Grayscale 8-bit PNG bytes; `[-1, 1]` maps onto `[0, 255]`.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        if self.channels != 1 {
            return Err(Error::Contract("only single-channel images encode to PNG".into()));
        }
        let img = GrayImage::from_fn(self.size as u32, self.size as u32, |x, y| {
            Luma([to_byte(self.data[y as usize * self.size + x as usize])])
        });
        let mut out = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
        Ok(out)
    }

    /// Decode any image the `image` crate reads, convert to gray and resize to `size`.
    pub fn from_encoded(bytes: &[u8], size: usize, modality: Modality) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.into_luma8();
        Ok(Self::from_gray(img, size, modality))
    }

    pub fn load(path: &Path, size: usize, modality: Modality) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_encoded(&bytes, size, modality)
    }

    fn from_gray(img: GrayImage, size: usize, modality: Modality) -> Self {
        let img = if img.width() as usize != size || img.height() as usize != size {
            image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
        } else {
            img
        };
        let data = img.pixels().map(|p| from_byte(p.0[0])).collect();
        Self { channels: 1, size, modality, data }
    }
}

pub fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_byte_grid() {
        let data: Vec<f32> = (0..64).map(|i| from_byte((i * 4) as u8)).collect();
        let img = ImageTensor::new(1, 8, Modality::Sketch, data).unwrap();
        let back = ImageTensor::from_encoded(&img.to_png().unwrap(), 8, Modality::Sketch).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn rejects_out_of_range_and_bad_length() {
        assert!(ImageTensor::new(1, 2, Modality::Photo, vec![0.0, 0.0, 1.5, 0.0]).is_err());
        assert!(ImageTensor::new(1, 2, Modality::Photo, vec![0.0; 3]).is_err());
    }

    #[test]
    fn byte_mapping_hits_endpoints() {
        assert_eq!(from_byte(0), -1.0);
        assert_eq!(from_byte(255), 1.0);
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
    }
}
