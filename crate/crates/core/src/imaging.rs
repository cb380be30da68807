use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Row-major H x W x C image with float samples, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Input(format!(
                "image dimensions must be nonzero, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Input(format!(
                "image buffer has {} samples, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
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
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        self.data[(row * self.width + col) * self.channels + ch] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Stacks images into a `B x C x H x W` tensor.
    pub fn batch_to_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Input("cannot build a tensor from zero images".into()))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut buf = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if !img.same_shape(first) {
                return Err(Error::Input(format!(
                    "batch mixes image shapes {}x{}x{} and {h}x{w}x{c}",
                    img.height, img.width, img.channels
                )));
            }
            for ch in 0..c {
                buf.extend((0..h * w).map(|i| img.data[i * c + ch]));
            }
        }
        Ok(Tensor::from_vec(buf, (images.len(), c, h, w), device)?.to_dtype(dtype)?)
    }

    /// Splits a `B x C x H x W` tensor back into images.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<Image>> {
        let (b, c, h, w) = t.dims4()?;
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok((0..b)
            .map(|bi| {
                let base = bi * c * h * w;
                let mut data = vec![0.0; h * w * c];
                for ch in 0..c {
                    for i in 0..h * w {
                        data[i * c + ch] = flat[base + ch * h * w + i];
                    }
                }
                Image {
                    height: h,
                    width: w,
                    channels: c,
                    data,
                }
            })
            .collect())
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |ch: usize| {
                let ch = ch.min(self.channels - 1);
                let v = self.get(y as usize, x as usize, ch).clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            height: h as usize,
            width: w as usize,
            channels: 3,
            data,
        }
    }

    /// Writes an 8-bit PNG; samples are clamped to `[0, 1]` here and only here.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }
}
