//! Target-face degradation operators for the conditional-deblurring task.
//!
//! Every operator is applied to the full image and then composited back inside
//! the face mask only, so background pixels are never touched.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DegradationKind {
    Masking,
    Downsample,
    GaussianBlur,
    None,
}

/// Operator kind plus strength: grid size `N` for downsampling, radius `R`
/// for blurring, ignored otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub strength: u32,
}

impl DegradationSpec {
    pub const NONE: Self = Self {
        kind: DegradationKind::None,
        strength: 0,
    };
    pub const MASKING: Self = Self {
        kind: DegradationKind::Masking,
        strength: 0,
    };

    pub fn downsample(n: u32) -> Self {
        Self {
            kind: DegradationKind::Downsample,
            strength: n,
        }
    }

    pub fn gaussian_blur(radius: u32) -> Self {
        Self {
            kind: DegradationKind::GaussianBlur,
            strength: radius,
        }
    }

    /// Check the spec against an image side length.
    pub fn validate(&self, side: usize) -> Result<()> {
        match self.kind {
            DegradationKind::Downsample => {
                let n = self.strength as usize;
                if n == 0 || side % n != 0 {
                    return Err(Error::input(format!(
                        "downsample grid {n} must be >= 1 and divide the image side {side}"
                    )));
                }
            }
            DegradationKind::GaussianBlur if self.strength == 0 => {
                return Err(Error::input("gaussian blur radius must be >= 1"));
            }
            _ => {}
        }
        Ok(())
    }

    /// The sweep used by the degradation ablation, strongest first.
    pub fn ablation_grid() -> Vec<Self> {
        vec![
            Self::MASKING,
            Self::downsample(8),
            Self::downsample(16),
            Self::downsample(32),
            Self::gaussian_blur(8),
            Self::gaussian_blur(16),
            Self::gaussian_blur(32),
            Self::NONE,
        ]
    }
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self::downsample(8)
    }
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            DegradationKind::Masking => f.write_str("masking"),
            DegradationKind::None => f.write_str("none"),
            DegradationKind::Downsample => write!(f, "downsample:{}", self.strength),
            DegradationKind::GaussianBlur => write!(f, "gaussian_blur:{}", self.strength),
        }
    }
}

impl FromStr for DegradationSpec {
    type Err = Error;

    /// Parses `kind[:strength]`, e.g. `downsample:8`, `gaussian_blur:16`, `masking`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, strength) = match s.split_once(':') {
            Some((k, v)) => (
                k.trim(),
                Some(
                    v.trim()
                        .parse::<u32>()
                        .map_err(|_| Error::config(format!("bad degradation strength in {s:?}")))?,
                ),
            ),
            None => (s.trim(), None),
        };
        let spec = match kind.to_ascii_lowercase().as_str() {
            "masking" | "mask" => Self::MASKING,
            "none" => Self::NONE,
            "downsample" => Self::downsample(strength.unwrap_or(8)),
            "gaussian_blur" | "gaussianblur" | "blur" => {
                Self::gaussian_blur(strength.ok_or_else(|| Error::config("blur needs a radius"))?)
            }
            other => return Err(Error::config(format!("unknown degradation kind {other:?}"))),
        };
        match spec.kind {
            DegradationKind::Downsample | DegradationKind::GaussianBlur if spec.strength == 0 => {
                Err(Error::config(format!("degradation strength must be >= 1 in {s:?}")))
            }
            _ => Ok(spec),
        }
    }
}

impl Serialize for DegradationSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for DegradationSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Box-average to an `n×n` grid, then nearest-neighbor upsample back.
pub fn downsample_upsample(image: &ImageTensor, n: usize) -> Result<ImageTensor> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if n == 0 || h % n != 0 || w % n != 0 {
        return Err(Error::input(format!(
            "image {h}x{w} is not divisible into a {n}x{n} grid"
        )));
    }
    let (bh, bw) = (h / n, w / n);
    let count = (bh * bw) as f64;
    let mut out = ImageTensor::zeros(h, w, c);
    let mut acc = vec![0.0f64; c];
    for gy in 0..n {
        for gx in 0..n {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for y in gy * bh..(gy + 1) * bh {
                for x in gx * bw..(gx + 1) * bw {
                    for (a, &v) in acc.iter_mut().zip(image.pixel(y, x)) {
                        *a += f64::from(v);
                    }
                }
            }
            for y in gy * bh..(gy + 1) * bh {
                for x in gx * bw..(gx + 1) * bw {
                    for (o, a) in out.pixel_mut(y, x).iter_mut().zip(&acc) {
                        *o = (a / count) as f32;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Mirror an out-of-range index back into `[0, n)` without repeating the edge
/// sample (`d c b | a b c d | c b a`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Normalized 1-D Gaussian taps for `σ = radius / 2`, truncated at `3σ`.
pub fn gaussian_kernel(radius: usize) -> Vec<f64> {
    let sigma = radius as f64 / 2.0;
    let half = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-half..=half)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(image: &ImageTensor, radius: usize) -> Result<ImageTensor> {
    if radius == 0 {
        return Err(Error::input("gaussian blur radius must be >= 1"));
    }
    let kernel = gaussian_kernel(radius);
    let half = (kernel.len() / 2) as isize;
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let mut tmp = vec![0.0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for (k, &wt) in kernel.iter().enumerate() {
                    let xx = reflect(x as isize + k as isize - half, w);
                    s += wt * f64::from(image.get(y, xx, ch));
                }
                tmp[(y * w + x) * c + ch] = s;
            }
        }
    }
    let mut out = ImageTensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for (k, &wt) in kernel.iter().enumerate() {
                    let yy = reflect(y as isize + k as isize - half, h);
                    s += wt * tmp[(yy * w + x) * c + ch];
                }
                out.set(y, x, ch, s as f32);
            }
        }
    }
    Ok(out)
}

fn check_mask(image: &ImageTensor, mask: &Mask) -> Result<()> {
    if mask.height() != image.height() || mask.width() != image.width() {
        return Err(Error::input(format!(
            "mask {}x{} does not match image {}x{}",
            mask.height(),
            mask.width(),
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

/// Zero every pixel inside the mask.
pub fn mask_fill(image: &ImageTensor, mask: &Mask) -> Result<ImageTensor> {
    check_mask(image, mask)?;
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.get(y, x) {
                out.pixel_mut(y, x).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    Ok(out)
}

/// `degraded ⊙ mask + image ⊙ (1 − mask)` for the operator named by `spec`.
pub fn degrade(image: &ImageTensor, face_mask: &Mask, spec: DegradationSpec) -> Result<ImageTensor> {
    check_mask(image, face_mask)?;
    spec.validate(image.height())?;
    let degraded = match spec.kind {
        DegradationKind::None => return Ok(image.clone()),
        DegradationKind::Masking => return mask_fill(image, face_mask),
        DegradationKind::Downsample => downsample_upsample(image, spec.strength as usize)?,
        DegradationKind::GaussianBlur => gaussian_blur(image, spec.strength as usize)?,
    };
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if face_mask.get(y, x) {
                out.pixel_mut(y, x).copy_from_slice(degraded.pixel(y, x));
            }
        }
    }
    Ok(out)
}
