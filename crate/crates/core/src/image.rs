//! Dense H×W×C pixel buffers.
//!
//! Pixels live in the unit interval internally. The 8-bit representation is
//! only used at the I/O boundary and where exact color identity matters
//! (color maps, segmentation refinement).

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "buffer of {} values does not fit {height}x{width}x{channels}",
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

    pub fn filled(height: usize, width: usize, value: &[f32]) -> Self {
        let channels = value.len();
        let data = value
            .iter()
            .copied()
            .cycle()
            .take(height * width * channels)
            .collect();
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
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
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        let i = self.index(row, col, ch);
        self.data[i] = v;
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let i = self.index(row, col, 0);
        &self.data[i..i + self.channels]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, px: &[f32]) {
        let i = self.index(row, col, 0);
        self.data[i..i + self.channels].copy_from_slice(px);
    }

    /// Quantizes to 8 bits, rounding to nearest and clamping to [0, 255].
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    /// Quantized copy: values snapped to the nearest multiple of 1/255.
    pub fn quantized(&self) -> Self {
        Self {
            data: self.data.iter().map(|&v| quantize(v) as f32 / 255.0).collect(),
            ..*self
        }
    }

    pub fn rgb_u8(&self, row: usize, col: usize) -> [u8; 3] {
        let p = self.pixel(row, col);
        [quantize(p[0]), quantize(p[1]), quantize(p[2])]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor_nchw(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.height, self.width, self.channels), device)?
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .to_dtype(dtype)?;
        Ok(t)
    }

    /// `(1, H, W, C)` tensor.
    pub fn to_tensor_nhwc(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&self.data, (1, self.height, self.width, self.channels), device)?
                .to_dtype(dtype)?,
        )
    }

    /// Stacks equally sized images into an `(N, C, H, W)` batch.
    pub fn batch_nchw(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let parts = images
            .iter()
            .map(|im| im.to_tensor_nchw(dtype, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Inverse of [`Image::to_tensor_nhwc`] for a single-image `(1, H, W, C)` or `(H, W, C)` tensor.
    pub fn from_tensor_nhwc(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::Shape(format!("expected rank 3 or 4 tensor, got {r}"))),
        };
        let (h, w, c) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(h, w, c, data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::from_u8(h as usize, w as usize, 3, rgb.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_u8();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => return Err(Error::Shape(format!("cannot save {c}-channel image"))),
        };
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
        )?;
        Ok(())
    }
}

/// H×W boolean grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask buffer of {} cells does not fit {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn full(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn invert(&self) -> Self {
        Self {
            data: self.data.iter().map(|b| !b).collect(),
            ..*self
        }
    }
}

#[inline]
pub(crate) fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}
