//! Plain height-by-width-by-channel float rasters.
//!
//! Images, masks and flow fields outside of the autograd graph are kept in
//! this row-major `HWC` layout; [`Raster::to_tensor`] lifts them into a
//! `(1, H, W, C)` tensor for the networks.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// A single-channel raster whose values are 0 or 1.
pub type Mask = Raster;

impl Raster {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return shape_err(format!(
                "raster data has {} values, expected {height}x{width}x{channels}",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = self.idx(y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn same_grid(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_grid(&self, other: &Raster, what: &str) -> Result<()> {
        if !self.same_grid(other) {
            return shape_err(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            ));
        }
        Ok(())
    }

    /// Multiplies every channel by a single-channel mask.
    pub fn masked(&self, mask: &Mask) -> Result<Raster> {
        self.ensure_same_grid(mask, "masked")?;
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let m = mask.get(y, x, 0);
                for c in 0..self.channels {
                    let i = out.idx(y, x, c);
                    out.data[i] *= m;
                }
            }
        }
        Ok(out)
    }

    /// Per-pixel selection: `where mask { a } else { b }`.
    pub fn select(mask: &Mask, a: &Raster, b: &Raster) -> Result<Raster> {
        a.ensure_same_grid(b, "select")?;
        a.ensure_same_grid(mask, "select mask")?;
        if a.channels != b.channels {
            return shape_err("select: channel mismatch");
        }
        let mut out = b.clone();
        for y in 0..a.height {
            for x in 0..a.width {
                if mask.get(y, x, 0) >= 0.5 {
                    for c in 0..a.channels {
                        let i = a.idx(y, x, c);
                        out.data[i] = a.data[i];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Single-channel mask set wherever `pred` holds.
    pub fn mask_from_fn(height: usize, width: usize, mut pred: impl FnMut(usize, usize) -> bool) -> Mask {
        Raster::from_fn(height, width, 1, |y, x, _| if pred(y, x) { 1.0 } else { 0.0 })
    }

    pub fn mask_area(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn threshold(&self, level: f32) -> Mask {
        Raster {
            data: self.data.iter().map(|&v| if v >= level { 1.0 } else { 0.0 }).collect(),
            ..self.clone()
        }
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.ensure_same_grid(other, "mask and")?;
        Ok(Raster {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| if a >= 0.5 && b >= 0.5 { 1.0 } else { 0.0 })
                .collect(),
            ..self.clone()
        })
    }

    pub fn max_abs_diff(&self, other: &Raster) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Mirror image about the vertical axis.
    pub fn flipped_horizontal(&self) -> Raster {
        let c = self.channels;
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.data[(y * self.width + x) * c..(y * self.width + x + 1) * c]);
            }
        }
        Raster { data, ..self.clone() }
    }

    /// Rounds every value to the nearest multiple of 1/255, as a PNG round trip would.
    pub fn quantized(&self) -> Raster {
        Raster {
            data: self
                .data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
            ..self.clone()
        }
    }

    /// Concatenates rasters along the channel axis.
    pub fn stack_channels(parts: &[&Raster]) -> Result<Raster> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("stack_channels of nothing".into()))?;
        for p in parts {
            first.ensure_same_grid(p, "stack_channels")?;
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(first.height * first.width * channels);
        for y in 0..first.height {
            for x in 0..first.width {
                for p in parts {
                    data.extend_from_slice(p.pixel(y, x));
                }
            }
        }
        Raster::from_vec(first.height, first.width, channels, data)
    }

    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.height, self.width, self.channels), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn batch_to_tensor(items: &[&Raster], device: &Device, dtype: DType) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Argument("empty batch".into()))?;
        let mut data = Vec::with_capacity(items.len() * first.data.len());
        for r in items {
            if r.dims() != first.dims() {
                return shape_err("batch rasters differ in shape");
            }
            data.extend_from_slice(&r.data);
        }
        let t = Tensor::from_vec(
            data,
            (items.len(), first.height, first.width, first.channels),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Reads a `(1, H, W, C)` or `(H, W, C)` tensor back into a raster.
    pub fn from_tensor(t: &Tensor) -> Result<Raster> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return shape_err(format!("expected rank 3 or 4 tensor, got rank {r}")),
        };
        let (h, w, c) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Raster::from_vec(h, w, c, data)
    }

    /// Splits a `(B, H, W, C)` tensor into per-item rasters.
    pub fn unbatch(t: &Tensor) -> Result<Vec<Raster>> {
        let b = t.dim(0)?;
        (0..b).map(|i| Raster::from_tensor(&t.get(i)?)).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let rgb = match self.channels {
            3 => self.clone(),
            1 => Raster::from_fn(self.height, self.width, 3, |y, x, _| self.get(y, x, 0)),
            c => return shape_err(format!("cannot save {c}-channel raster as RGB png")),
        };
        let bytes: Vec<u8> = rgb
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Shape("png buffer size".into()))?;
        if let Some(dir) = path.parent() {
            crate::io::ensure_dir(dir)?;
        }
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Loads an 8-bit RGB png; `channels == 1` keeps the first channel only (masks).
    pub fn load_png(path: &Path, channels: usize) -> Result<Raster> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.into_raw();
        let full = Raster::from_vec(h, w, 3, raw.iter().map(|&b| b as f32 / 255.0).collect())?;
        match channels {
            3 => Ok(full),
            1 => Ok(Raster::from_fn(h, w, 1, |y, x, _| full.get(y, x, 0))),
            c => shape_err(format!("cannot load png as {c} channels")),
        }
    }
}
