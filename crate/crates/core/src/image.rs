//! Planar `C×H×W` float images.
//!
//! Masking and reuse operate on this type directly so that their outputs are
//! bit-exact functions of their inputs; conversion to batched tensors happens
//! only at the model boundary.

use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "image dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "buffer of {} values does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    /// Builds an image from a `(channel, row, col) -> value` function.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
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

    pub fn into_data(self) -> Vec<f32> {
        self.data
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

    /// One channel as a row-major `H×W` slice.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Copies the `h×w` window at `(top, left)` into a new image.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "crop {h}x{w}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(self.channels, h, w, |c, y, x| {
            self.get(c, top + y, left + x)
        }))
    }

    /// Writes `src` into this image with its top-left corner at `(top, left)`.
    pub fn paste(&mut self, src: &Image, top: usize, left: usize) -> Result<()> {
        if src.channels != self.channels
            || top + src.height > self.height
            || left + src.width > self.width
        {
            return Err(Error::Dimension(format!(
                "cannot paste {}x{}x{} at ({top},{left}) into {}x{}x{}",
                src.channels, src.height, src.width, self.channels, self.height, self.width
            )));
        }
        for c in 0..self.channels {
            for y in 0..src.height {
                let d = self.index(c, top + y, left);
                let s = src.index(c, y, 0);
                self.data[d..d + src.width].copy_from_slice(&src.data[s..s + src.width]);
            }
        }
        Ok(())
    }

    /// Applies `(v - mean[c]) / std[c]` per channel.
    pub fn normalized(&self, mean: &[f32], std: &[f32]) -> Result<Image> {
        if mean.len() != self.channels || std.len() != self.channels {
            return Err(Error::Dimension(format!(
                "normalization stats have {} / {} entries for {} channels",
                mean.len(),
                std.len(),
                self.channels
            )));
        }
        let n = self.height * self.width;
        let mut out = self.clone();
        for c in 0..self.channels {
            for v in &mut out.data[c * n..(c + 1) * n] {
                *v = (*v - mean[c]) / std[c];
            }
        }
        Ok(out)
    }

    /// Horizontal mirror.
    pub fn flipped_horizontally(&self) -> Image {
        Image::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.get(c, y, self.width - 1 - x)
        })
    }

    /// Reads an 8-bit PNG (or any format the codec supports) into `[0, 1]`.
    /// Grayscale files yield one channel, everything else three.
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let dynimg = image::open(path)?;
        let gray = matches!(
            dynimg.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8
        );
        if gray {
            let buf = dynimg.to_luma8();
            let (w, h) = buf.dimensions();
            let data = buf.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Image::new(1, h as usize, w as usize, data)
        } else {
            let buf = dynimg.to_rgb8();
            Ok(Self::from_rgb8(&buf))
        }
    }

    pub fn from_rgb8(buf: &image::RgbImage) -> Image {
        let (w, h) = buf.dimensions();
        let (w, h) = (w as usize, h as usize);
        let raw = buf.as_raw();
        Image::from_fn(3, h, w, |c, y, x| raw[(y * w + x) * 3 + c] as f32 / 255.0)
    }

    /// Quantizes `[0, 1]` values to 8 bits (round half away from zero, clamped).
    pub fn to_u8_channels(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_unit(v)).collect()
    }

    /// Writes the image as PNG. Values are interpreted on the `[0, 1]` scale.
    /// Images with other than 1 or 3 channels are rejected.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => {
                let buf = image::GrayImage::from_raw(w, h, self.to_u8_channels())
                    .ok_or_else(|| Error::Shape("grayscale buffer size".into()))?;
                buf.save(path)?;
            }
            3 => {
                let mut raw = vec![0u8; self.height * self.width * 3];
                for y in 0..self.height {
                    for x in 0..self.width {
                        for c in 0..3 {
                            raw[(y * self.width + x) * 3 + c] = quantize_unit(self.get(c, y, x));
                        }
                    }
                }
                let buf = image::RgbImage::from_raw(w, h, raw)
                    .ok_or_else(|| Error::Shape("rgb buffer size".into()))?;
                buf.save(path)?;
            }
            c => {
                return Err(Error::Shape(format!(
                    "cannot encode a {c}-channel image as PNG"
                )))
            }
        }
        Ok(())
    }

    /// `1×C×H×W` tensor on `device`.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (1, self.channels, self.height, self.width),
            device,
        )?)
    }

    /// Inverse of [`Image::to_tensor`] for a single-item batch or a `C×H×W` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let t = match t.rank() {
            4 => {
                if t.dim(0)? != 1 {
                    return Err(Error::Shape(format!(
                        "expected a single-item batch, got {:?}",
                        t.dims()
                    )));
                }
                t.squeeze(0)?
            }
            3 => t.clone(),
            r => return Err(Error::Shape(format!("expected rank 3 or 4, got {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        let data = t
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Image::new(c, h, w, data)
    }
}

#[inline]
pub(crate) fn quantize_unit(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Stacks equally sized images into an `N×C×H×W` tensor.
pub fn stack_images(images: &[Image], device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("cannot stack an empty image list".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::Shape(format!(
                "cannot stack {}x{}x{} with {c}x{h}x{w}",
                img.channels, img.height, img.width
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?)
}
