//! Random opaque occluders (hand-like bars, boxes, blobs) composited over a face.

use rand::Rng;

use super::render::RenderOutput;
use crate::image::{ImageTensor, Mask};

pub const MIN_FACE_COVERAGE: f64 = 0.05;
pub const MAX_FACE_COVERAGE: f64 = 0.30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OccluderShape {
    Rectangle,
    Ellipse,
    Bar,
}

/// A sampled occluder: which pixels it covers and the flat color it paints.
#[derive(Debug, Clone, PartialEq)]
pub struct Occluder {
    pub shape: OccluderShape,
    pub mask: Mask,
    pub color: [f32; 3],
}

impl Occluder {
    pub fn apply(&self, image: &ImageTensor) -> ImageTensor {
        let mut out = image.clone();
        for y in 0..image.height() {
            for x in 0..image.width() {
                if self.mask.get(y, x) {
                    out.pixel_mut(y, x).copy_from_slice(&self.color);
                }
            }
        }
        out
    }
}

struct Placement {
    shape: OccluderShape,
    cx: f64,
    cy: f64,
    angle: f64,
    aspect: f64,
}

impl Placement {
    fn mask(&self, h: usize, w: usize, size: f64) -> Mask {
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (hx, hy) = match self.shape {
            OccluderShape::Bar => (size * 2.5, size * 0.35),
            _ => (size * self.aspect, size / self.aspect),
        };
        Mask::from_fn(h, w, |y, x| {
            let dx = x as f64 + 0.5 - self.cx;
            let dy = y as f64 + 0.5 - self.cy;
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            match self.shape {
                OccluderShape::Ellipse => (u / hx).powi(2) + (v / hy).powi(2) <= 1.0,
                OccluderShape::Rectangle | OccluderShape::Bar => u.abs() <= hx && v.abs() <= hy,
            }
        })
    }
}

fn coverage(mask: &Mask, face: &Mask, face_area: usize) -> f64 {
    mask.intersection_count(face) as f64 / face_area as f64
}

/// Sample an occluder covering between 5% and 30% of the face mask.
pub fn sample_occluder(render: &RenderOutput, rng: &mut impl Rng) -> Occluder {
    let face = &render.face_mask;
    let (h, w) = (face.height(), face.width());
    let face_area = face.count().max(1);
    let face_pixels: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| face.get(y, x))
        .collect();
    loop {
        let shape = match rng.random_range(0..3) {
            0 => OccluderShape::Rectangle,
            1 => OccluderShape::Ellipse,
            _ => OccluderShape::Bar,
        };
        let (cy, cx) = if face_pixels.is_empty() {
            (h / 2, w / 2)
        } else {
            face_pixels[rng.random_range(0..face_pixels.len())]
        };
        let placement = Placement {
            shape,
            cx: cx as f64 + rng.random_range(0.0..1.0),
            cy: cy as f64 + rng.random_range(0.0..1.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            aspect: rng.random_range(0.6..1.6),
        };
        let target = rng.random_range(0.08..0.27);
        // on the 8-bit grid so occluded images survive a PNG round trip
        let mut channel = || f32::from(rng.random::<u8>()) / 255.0;
        let color = [channel(), channel(), channel()];
        // coverage grows monotonically with size for a fixed placement
        let (mut lo, mut hi) = (0.0, (h.max(w)) as f64);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if coverage(&placement.mask(h, w, mid), face, face_area) <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mask = placement.mask(h, w, lo);
        let cov = coverage(&mask, face, face_area);
        if (MIN_FACE_COVERAGE..=MAX_FACE_COVERAGE).contains(&cov) {
            return Occluder { shape, mask, color };
        }
    }
}

/// Composite a random occluder; returns the occluded image and the exact set
/// of overwritten pixels.
pub fn apply_occlusion(render: &RenderOutput, rng: &mut impl Rng) -> (ImageTensor, Mask) {
    let occ = sample_occluder(render, rng);
    (occ.apply(&render.image), occ.mask)
}
