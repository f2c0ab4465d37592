//! Float image container plus PNG/PGM/PPM reading and writing.

use std::path::Path;

use crate::error::{Result, XError};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Gray,
    Rgb,
}

/// `H x W x C` floating-point image. Loaded values live in `[0, 1]`;
/// intermediate results (noisy inputs, raw network outputs) may leave that
/// range until [`Image::clipped`] is applied.
#[derive(Clone, Debug)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub colorspace: ColorSpace,
    /// Row-major, channel fastest.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(XError::Config(format!(
                "images must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(XError::Dim(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            colorspace: if channels == 1 {
                ColorSpace::Gray
            } else {
                ColorSpace::Rgb
            },
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_f64(v as f64)).collect();
        Tensor::from_vec(&[self.height, self.width, self.channels], data)
            .expect("image extents are consistent")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (h, w, c) = match t.shape() {
            [h, w, c] => (*h, *w, *c),
            s => return Err(XError::Dim(format!("expected [H, W, C], got {s:?}"))),
        };
        Image::new(h, w, c, t.with_data(|d| d.iter().map(|v| v.as_f64() as f32).collect()))
    }

    pub fn clipped(&self) -> Image {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(XError::Dim(format!(
                "crop {top}+{height} x {left}+{width} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            let row = ((top + y) * self.width + left) * c;
            data.extend_from_slice(&self.data[row..row + width * c]);
        }
        Image::new(height, width, c, data)
    }
}

/// 8-bit quantization with round-half-up.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Reads a PNG, PGM, or PPM file into `[0, 1]` floats (8-bit depth).
pub fn image_read(path: &Path) -> Result<Image> {
    let p = path.display().to_string();
    let dynimg = image::open(path).map_err(|e| XError::image(&p, e.to_string()))?;
    match dynimg {
        image::DynamicImage::ImageLuma8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let data = img.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
            Image::new(h, w, 1, data)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let data = rgb.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
            Image::new(h, w, 3, data)
        }
    }
}

/// Writes PNG/PGM/PPM depending on the extension; values are quantized with
/// round-half-up after clipping.
pub fn image_write(img: &Image, path: &Path) -> Result<()> {
    let p = path.display().to_string();
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let err = |e: image::ImageError| XError::image(&p, e.to_string());
    match img.channels {
        1 => image::GrayImage::from_raw(w, h, bytes)
            .expect("buffer length checked")
            .save(path)
            .map_err(err),
        _ => image::RgbImage::from_raw(w, h, bytes)
            .expect("buffer length checked")
            .save(path)
            .map_err(err),
    }
}
