//! Channels-first float images in `[0, 1]` and PNG I/O.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Grayscale,
    Rgb,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Grayscale => 1,
            ColorSpace::Rgb => 3,
        }
    }
}

/// Luma weights used wherever RGB is reduced to one channel (ITU-R BT.601).
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    tensor: Tensor,
    color: ColorSpace,
}

impl Image {
    pub fn new(tensor: Tensor, color: ColorSpace) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() != 3 || shape[0] != color.channels() {
            return Err(Error::Argument(format!(
                "{color:?} image needs shape ({}, H, W), got {shape:?}",
                color.channels()
            )));
        }
        Ok(Self { tensor, color })
    }

    pub fn filled(color: ColorSpace, height: usize, width: usize, value: f32) -> Self {
        Self {
            tensor: Tensor::full(&[color.channels(), height, width], value),
            color,
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn color_space(&self) -> ColorSpace {
        self.color
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn data(&self) -> &[f32] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.tensor.data_mut()
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height() * self.width();
        &self.tensor.data()[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height() * self.width();
        &mut self.tensor.data_mut()[c * n..(c + 1) * n]
    }

    pub fn clamp01(mut self) -> Self {
        for v in self.tensor.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn to_grayscale(&self) -> Image {
        match self.color {
            ColorSpace::Grayscale => self.clone(),
            ColorSpace::Rgb => {
                let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
                let data = r
                    .iter()
                    .zip(g)
                    .zip(b)
                    .map(|((r, g), b)| LUMA[0] * r + LUMA[1] * g + LUMA[2] * b)
                    .collect();
                let tensor = Tensor::from_parts(vec![1, self.height(), self.width()], data);
                Image {
                    tensor,
                    color: ColorSpace::Grayscale,
                }
            }
        }
    }

    /// Replicates a grayscale plane into three channels.
    pub fn to_rgb(&self) -> Image {
        match self.color {
            ColorSpace::Rgb => self.clone(),
            ColorSpace::Grayscale => {
                let plane = self.plane(0);
                let mut data = Vec::with_capacity(plane.len() * 3);
                for _ in 0..3 {
                    data.extend_from_slice(plane);
                }
                Image {
                    tensor: Tensor::from_parts(vec![3, self.height(), self.width()], data),
                    color: ColorSpace::Rgb,
                }
            }
        }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.tensor.shape() == other.tensor.shape()
    }
}

/// Loads an 8- or 16-bit grayscale or RGB(A) PNG; alpha is discarded.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (color, data): (ColorSpace, Vec<f32>) = match &img {
        DynamicImage::ImageLuma8(b) => (ColorSpace::Grayscale, scale(b.as_raw(), 255.0)),
        DynamicImage::ImageLumaA8(_) => {
            (ColorSpace::Grayscale, scale(img.to_luma8().as_raw(), 255.0))
        }
        DynamicImage::ImageLuma16(b) => (ColorSpace::Grayscale, scale(b.as_raw(), 65535.0)),
        DynamicImage::ImageLumaA16(_) => {
            (ColorSpace::Grayscale, scale(img.to_luma16().as_raw(), 65535.0))
        }
        DynamicImage::ImageRgb8(b) => (ColorSpace::Rgb, planar(b.as_raw(), 255.0, h * w)),
        DynamicImage::ImageRgba8(_) => (ColorSpace::Rgb, planar(img.to_rgb8().as_raw(), 255.0, h * w)),
        DynamicImage::ImageRgb16(b) => (ColorSpace::Rgb, planar(b.as_raw(), 65535.0, h * w)),
        DynamicImage::ImageRgba16(_) => {
            (ColorSpace::Rgb, planar(img.to_rgb16().as_raw(), 65535.0, h * w))
        }
        _ => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                reason: "unsupported pixel format (need 8/16-bit gray or RGB)".into(),
            })
        }
    };
    Image::new(
        Tensor::from_parts(vec![color.channels(), h, w], data),
        color,
    )
}

/// Writes an 8-bit PNG, quantizing with round-half-up.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (img.height() as u32, img.width() as u32);
    let n = (h * w) as usize;
    let result = match img.color_space() {
        ColorSpace::Grayscale => {
            let raw: Vec<u8> = img.plane(0).iter().map(|&v| quantize(v)).collect();
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, raw)
                .expect("buffer sized from image")
                .save(path)
        }
        ColorSpace::Rgb => {
            let mut raw = Vec::with_capacity(3 * n);
            for i in 0..n {
                for c in 0..3 {
                    raw.push(quantize(img.data()[c * n + i]));
                }
            }
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raw)
                .expect("buffer sized from image")
                .save(path)
        }
    };
    result.map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn scale<T: Copy + Into<f32>>(raw: &[T], max: f32) -> Vec<f32> {
    raw.iter().map(|&v| v.into() / max).collect()
}

fn planar<T: Copy + Into<f32>>(raw: &[T], max: f32, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; 3 * n];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * n + i] = px[c].into() / max;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_linear_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        ImageBuffer::<Luma<u8>, _>::from_raw(3, 1, vec![0u8, 128, 255])
            .unwrap()
            .save(&p)
            .unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.color_space(), ColorSpace::Grayscale);
        assert_eq!(img.data(), &[0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_is_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g16.png");
        ImageBuffer::<Luma<u16>, _>::from_raw(2, 1, vec![0u16, 65535])
            .unwrap()
            .save(&p)
            .unwrap();
        assert_eq!(load_image(&p).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-0.3), 0);
        assert_eq!(quantize(128.0 / 255.0), 128);
    }

    #[test]
    fn unreadable_file_is_image_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Image { .. })));
    }

    #[test]
    fn wrong_channel_count_rejected() {
        assert!(Image::new(Tensor::zeros(&[2, 4, 4]), ColorSpace::Rgb).is_err());
    }
}
