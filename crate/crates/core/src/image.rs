//! Dense image and mask containers shared by every stage of the pipeline.
//!
//! Images are stored channel-interleaved (H×W×C) as `f32` in `[0, 1]`; networks
//! consume them as `(C, H, W)` tensors via [`ImageTensor::to_tensor`].

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::input(format!(
                "image buffer has {} values, expected {height}x{width}x{channels}",
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

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    #[inline]
    fn offset(&self, y: usize, x: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.offset(y, x) + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let o = self.offset(y, x);
        self.data[o + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let o = self.offset(y, x);
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let o = self.offset(y, x);
        &mut self.data[o..o + self.channels]
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Round to the 8-bit grid used for persisted images.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
        self
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data
            .iter()
            .map(|&v| (f64::from(v) - m).powi(2))
            .sum::<f64>()
            / self.data.len().max(1) as f64
    }

    /// Sum of squared differences over the pixels selected by `mask`
    /// (all channels), divided by the number of selected values.
    pub fn masked_mse(&self, other: &Self, mask: &Mask) -> Result<f64> {
        if !self.same_shape(other) || mask.height() != self.height || mask.width() != self.width {
            return Err(Error::input("masked_mse: shape mismatch"));
        }
        let mut acc = 0.0;
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if mask.get(y, x) {
                    for c in 0..self.channels {
                        acc += f64::from(self.get(y, x, c) - other.get(y, x, c)).powi(2);
                        n += 1;
                    }
                }
            }
        }
        Ok(if n == 0 { 0.0 } else { acc / n as f64 })
    }

    /// `(C, H, W)` float tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, self.channels), device)?;
        Ok(t.permute((2, 0, 1))?.contiguous()?)
    }

    /// Stack images into a `(B, C, H, W)` tensor of the requested dtype.
    pub fn stack(images: &[&ImageTensor], device: &Device, dtype: DType) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::input("cannot stack an empty image list"))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut buf = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if !img.same_shape(first) {
                return Err(Error::input("stack: images differ in shape"));
            }
            buf.extend_from_slice(&img.data);
        }
        let t = Tensor::from_vec(buf, (images.len(), h, w, c), device)?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Inverse of [`ImageTensor::to_tensor`]; accepts `(C, H, W)` of any float dtype.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let data = t
            .to_dtype(DType::F32)?
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::from_vec(h, w, c, data)
    }

    /// Split a `(B, C, H, W)` tensor into images.
    pub fn unstack(t: &Tensor) -> Result<Vec<Self>> {
        let b = t.dim(0)?;
        (0..b).map(|i| Self::from_tensor(&t.get(i)?)).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::input("only 3-channel images can be saved as PNG"));
        }
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::input("png buffer size mismatch"))?;
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| f32::from(b) / 255.0).collect();
        Self::from_vec(h as usize, w as usize, 3, data)
    }
}

/// Binary H×W mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Chebyshev dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Mask {
        let r = radius as isize;
        Mask::from_fn(self.height, self.width, |y, x| {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0
                        && xx >= 0
                        && (yy as usize) < self.height
                        && (xx as usize) < self.width
                        && self.get(yy as usize, xx as usize)
                    {
                        return true;
                    }
                }
            }
            false
        })
    }

    /// `(1, H, W)` tensor with 1.0 inside the mask.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::from_vec(v, (1, self.height, self.width), device)?)
    }
}

/// Pack up to three masks into the RGB channels of a PNG (0 or 255 per channel).
pub fn save_mask_png(path: &Path, channels: [Option<&Mask>; 3]) -> Result<()> {
    let (h, w) = channels
        .iter()
        .flatten()
        .map(|m| (m.height, m.width))
        .next()
        .ok_or_else(|| Error::input("save_mask_png needs at least one mask"))?;
    let mut bytes = vec![0u8; h * w * 3];
    for (c, m) in channels.iter().enumerate() {
        if let Some(m) = m {
            for (i, &b) in m.data.iter().enumerate() {
                if b {
                    bytes[i * 3 + c] = 255;
                }
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::input("mask buffer size mismatch"))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_mask_png(path: &Path) -> Result<[Mask; 3]> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.into_raw();
    let mk = |c: usize| Mask {
        height: h,
        width: w,
        data: (0..h * w).map(|i| raw[i * 3 + c] >= 128).collect(),
    };
    Ok([mk(0), mk(1), mk(2)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let data: Vec<f32> = (0..4 * 5 * 3).map(|i| i as f32 / 60.0).collect();
        let img = ImageTensor::from_vec(4, 5, 3, data).unwrap();
        let t = img.to_tensor(&Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[3, 4, 5]);
        assert_eq!(ImageTensor::from_tensor(&t).unwrap(), img);
        let b = ImageTensor::stack(&[&img, &img], &Device::Cpu, DType::F32).unwrap();
        assert_eq!(ImageTensor::unstack(&b).unwrap()[1], img);
    }

    #[test]
    fn png_round_trip_of_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..8 * 8 * 3).map(|i| (i % 256) as f32 / 255.0).collect();
        let img = ImageTensor::from_vec(8, 8, 3, data).unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(ImageTensor::load_png(&p).unwrap(), img);
    }

    #[test]
    fn mask_png_channels() {
        let dir = tempfile::tempdir().unwrap();
        let a = Mask::from_fn(6, 6, |y, _| y < 3);
        let b = Mask::from_fn(6, 6, |_, x| x == 2);
        let p = dir.path().join("m.png");
        save_mask_png(&p, [Some(&a), Some(&b), None]).unwrap();
        let [ra, rb, rc] = load_mask_png(&p).unwrap();
        assert_eq!(ra, a);
        assert_eq!(rb, b);
        assert!(rc.is_empty());
    }

    #[test]
    fn dilation_grows_by_radius() {
        let mut m = Mask::new(7, 7);
        m.set(3, 3, true);
        assert_eq!(m.dilate(1).count(), 9);
        assert!(m.is_subset_of(&m.dilate(2)));
    }
}
