//! Analytic face renderer.
//!
//! All geometry lives in a face-local frame `(u, v)` centered on the image,
//! rotated by the pose angle. Pixels are 3×3 supersampled; masks are decided
//! at pixel centers.

use serde::{Deserialize, Serialize};

use super::factors::FaceSpec;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, Mask};

pub const SUPPORTED_RESOLUTIONS: [usize; 3] = [32, 64, 128];
const SUPERSAMPLE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: ImageTensor,
    pub face_mask: Mask,
    pub keypoints: Vec<Keypoint>,
    pub accessory_mask: Mask,
}

impl RenderOutput {
    pub fn resolution(&self) -> usize {
        self.image.height()
    }

    pub fn keypoint(&self, name: &str) -> Option<&Keypoint> {
        self.keypoints.iter().find(|k| k.name == name)
    }
}

pub fn validate_resolution(resolution: usize) -> Result<()> {
    if SUPPORTED_RESOLUTIONS.contains(&resolution) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "resolution {resolution} not supported (expected one of {SUPPORTED_RESOLUTIONS:?})"
        )))
    }
}

type Rgb = [f64; 3];

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn scale(a: Rgb, s: f64) -> Rgb {
    [a[0] * s, a[1] * s, a[2] * s]
}

const SKIN_PINK: Rgb = [0.95, 0.70, 0.65];
const SKIN_OLIVE: Rgb = [0.80, 0.70, 0.40];
const EYELID_SHADOW: Rgb = [0.55, 0.25, 0.65];
const LIP_PLAIN: Rgb = [0.60, 0.30, 0.30];
const LIP_PAINTED: Rgb = [0.90, 0.05, 0.25];
const EYE_WHITE: Rgb = [0.97, 0.97, 0.97];
const PUPIL: Rgb = [0.08, 0.08, 0.12];
const BROW: Rgb = [0.25, 0.15, 0.10];
const FRAME: Rgb = [0.10, 0.10, 0.10];

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Derived face geometry in local coordinates (pixels).
struct Geometry {
    center: (f64, f64),
    cos: f64,
    sin: f64,
    a: f64,
    b: f64,
    eye_r: f64,
    eyes: [(f64, f64); 2],
    pupils: [(f64, f64); 2],
    brows: [((f64, f64), (f64, f64)); 2],
    brow_half_width: f64,
    nose: ((f64, f64), (f64, f64)),
    nose_half_width: f64,
    mouth_v0: f64,
    mouth_half_len: f64,
    mouth_curve: f64,
    mouth_half_width: f64,
    glasses_r: f64,
    glasses_half_width: f64,
    bridge: Option<((f64, f64), (f64, f64))>,
    light_dir: (f64, f64),
    light_strength: f64,
    light_radius: f64,
    skin: Rgb,
    lip: Rgb,
    makeup: f64,
    glasses: bool,
    background: Rgb,
}

impl Geometry {
    fn new(spec: &FaceSpec, res: usize) -> Self {
        let s = res as f64;
        let id = &spec.identity;
        let at = &spec.attributes;
        let b = 0.34 * s;
        let a = b * id.face_aspect;
        let eye_r = 0.15 * b;
        let ex = id.eye_spacing * a;
        let ey = -0.22 * b;
        let eyes = [(-ex, ey), (ex, ey)];
        let po = 0.5 * eye_r;
        let pupils = eyes.map(|(x, y)| (x + at.gaze[0] * po, y + at.gaze[1] * po));
        let brow_len = 1.3 * eye_r;
        let brows = [-1.0f64, 1.0].map(|side| {
            let cx = side * ex;
            let cy = ey - eye_r - 0.10 * b;
            let theta = side * id.brow_angle;
            let (dx, dy) = (brow_len * theta.cos(), brow_len * theta.sin());
            ((cx - dx, cy - dy), (cx + dx, cy + dy))
        });
        let nose_top = -0.12 * b;
        let glasses_r = 1.6 * eye_r;
        let bridge = (ex > glasses_r).then(|| {
            let y = ey - 0.3 * eye_r;
            ((-(ex - glasses_r), y), (ex - glasses_r, y))
        });
        let base = lerp(SKIN_PINK, SKIN_OLIVE, id.face_hue_base);
        let shift = at.skin_tone_shift;
        Geometry {
            center: (s / 2.0, s / 2.0),
            cos: at.pose_angle.cos(),
            sin: at.pose_angle.sin(),
            a,
            b,
            eye_r,
            eyes,
            pupils,
            brows,
            brow_half_width: 0.035 * b,
            nose: ((0.0, nose_top), (0.0, nose_top + id.nose_length * 1.6 * b)),
            nose_half_width: 0.05 * b,
            mouth_v0: 0.50 * b,
            mouth_half_len: id.mouth_width * a,
            mouth_curve: at.expression * 0.15 * b,
            mouth_half_width: 0.05 * b,
            glasses_r,
            glasses_half_width: 0.22 * eye_r,
            bridge,
            light_dir: (at.lighting_dir.cos(), at.lighting_dir.sin()),
            light_strength: at.lighting_strength,
            light_radius: 0.45 * s,
            skin: [base[0] + shift, base[1] + shift, base[2] + shift],
            lip: lerp(LIP_PLAIN, LIP_PAINTED, at.makeup),
            makeup: at.makeup,
            glasses: at.has_glasses,
            background: at.background_color,
        }
    }

    fn to_local(&self, px: f64, py: f64) -> (f64, f64) {
        let (dx, dy) = (px - self.center.0, py - self.center.1);
        (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy)
    }

    fn to_image(&self, (u, v): (f64, f64)) -> (f64, f64) {
        (
            self.center.0 + self.cos * u - self.sin * v,
            self.center.1 + self.sin * u + self.cos * v,
        )
    }

    fn in_face(&self, (u, v): (f64, f64)) -> bool {
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn in_glasses(&self, p: (f64, f64)) -> bool {
        if !self.glasses || !self.in_face(p) {
            return false;
        }
        let ring = self.eyes.iter().any(|&(ex, ey)| {
            let d = ((p.0 - ex).powi(2) + (p.1 - ey).powi(2)).sqrt();
            (d - self.glasses_r).abs() <= self.glasses_half_width
        });
        ring || self
            .bridge
            .is_some_and(|(a, b)| dist_to_segment(p, a, b) <= self.glasses_half_width)
    }

    fn in_circle(p: (f64, f64), c: (f64, f64), r: f64) -> bool {
        (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2) <= r * r
    }

    /// Color at an image-space point.
    fn shade(&self, px: f64, py: f64) -> Rgb {
        let p = self.to_local(px, py);
        if !self.in_face(p) {
            return self.background;
        }
        let (u, v) = p;
        let mut c = self.skin;
        for &(ex, ey) in &self.eyes {
            let lid = ((u - ex) / (1.35 * self.eye_r)).powi(2)
                + ((v - (ey - 0.35 * self.eye_r)) / (0.9 * self.eye_r)).powi(2);
            if lid <= 1.0 {
                c = lerp(c, EYELID_SHADOW, 0.85 * self.makeup);
            }
        }
        for &(a, b) in &self.brows {
            if dist_to_segment(p, a, b) <= self.brow_half_width {
                c = BROW;
            }
        }
        for (&eye, &pupil) in self.eyes.iter().zip(&self.pupils) {
            if Self::in_circle(p, eye, self.eye_r) {
                c = if Self::in_circle(p, pupil, 0.5 * self.eye_r) {
                    PUPIL
                } else {
                    EYE_WHITE
                };
            }
        }
        if dist_to_segment(p, self.nose.0, self.nose.1) <= self.nose_half_width {
            c = scale(self.skin, 0.78);
        }
        if u.abs() <= self.mouth_half_len {
            let t = u / self.mouth_half_len;
            let vc = self.mouth_v0 + self.mouth_curve * (1.0 - t * t);
            if (v - vc).abs() <= self.mouth_half_width {
                c = self.lip;
            }
        }
        if self.in_glasses(p) {
            c = FRAME;
        }
        let (dx, dy) = (px - self.center.0, py - self.center.1);
        let light = 1.0
            + self.light_strength * (dx * self.light_dir.0 + dy * self.light_dir.1)
                / self.light_radius;
        scale(c, light)
    }

    fn keypoints(&self) -> Vec<Keypoint> {
        let mut out = Vec::with_capacity(15);
        let mut push = |name: String, p: (f64, f64)| {
            let (x, y) = self.to_image(p);
            out.push(Keypoint { name, x, y });
        };
        push("left_eye".into(), self.eyes[0]);
        push("right_eye".into(), self.eyes[1]);
        push("left_pupil".into(), self.pupils[0]);
        push("right_pupil".into(), self.pupils[1]);
        push("nose_tip".into(), self.nose.1);
        push("mouth_left".into(), (-self.mouth_half_len, self.mouth_v0));
        push("mouth_right".into(), (self.mouth_half_len, self.mouth_v0));
        for k in 0..8 {
            let th = k as f64 * std::f64::consts::FRAC_PI_4;
            push(
                format!("outline_{k}"),
                (0.999 * self.a * th.cos(), 0.999 * self.b * th.sin()),
            );
        }
        out
    }
}

/// Render a face spec. Pure function of `(spec, resolution)`.
pub fn render(spec: &FaceSpec, resolution: usize) -> Result<RenderOutput> {
    validate_resolution(resolution)?;
    let g = Geometry::new(spec, resolution);
    let n = resolution;
    let mut image = ImageTensor::zeros(n, n, 3);
    let mut face_mask = Mask::new(n, n);
    let mut accessory_mask = Mask::new(n, n);
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in 0..n {
        for x in 0..n {
            let mut acc = [0.0f64; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let c = g.shade(px, py);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            let px = image.pixel_mut(y, x);
            for k in 0..3 {
                px[k] = ((acc[k] * inv).clamp(0.0, 1.0)) as f32;
            }
            let center = g.to_local(x as f64 + 0.5, y as f64 + 0.5);
            face_mask.set(y, x, g.in_face(center));
            accessory_mask.set(y, x, g.in_glasses(center));
        }
    }
    Ok(RenderOutput {
        image,
        face_mask,
        keypoints: g.keypoints(),
        accessory_mask,
    })
}

/// Skin color before lighting; exposed for tests.
pub fn base_skin_color(spec: &FaceSpec) -> [f32; 3] {
    let g = Geometry::new(spec, 64);
    g.skin.map(|c| c.clamp(0.0, 1.0) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::synthdata::factors::{sample_attributes, sample_identity};

    fn spec(seed: u64) -> FaceSpec {
        FaceSpec {
            identity: sample_identity(seed, 3),
            attributes: sample_attributes(&mut rng::stream(seed, "render-test", 0)),
        }
    }

    #[test]
    fn rejects_unsupported_resolution() {
        assert!(matches!(render(&spec(0), 48), Err(Error::Config(_))));
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = spec(1);
        assert_eq!(render(&s, 64).unwrap(), render(&s, 64).unwrap());
    }

    #[test]
    fn zero_lighting_gives_uniform_skin() {
        let mut s = spec(2);
        s.attributes.lighting_strength = 0.0;
        s.attributes.skin_tone_shift = 0.0;
        s.attributes.has_glasses = false;
        s.attributes.makeup = 0.0;
        let out = render(&s, 64).unwrap();
        let skin = base_skin_color(&s);
        let mask = &out.face_mask;
        let (mut skin_px, mut other) = (0usize, 0usize);
        for y in 0..64 {
            for x in 0..64 {
                if mask.get(y, x) {
                    if out.image.pixel(y, x).iter().zip(&skin).all(|(a, b)| (a - b).abs() < 1e-6) {
                        skin_px += 1;
                    } else {
                        other += 1;
                    }
                }
            }
        }
        // every non-skin face pixel must be a feature or an anti-aliased edge
        assert!(skin_px > 3 * other, "skin {skin_px} other {other}");
    }

    #[test]
    fn glasses_absent_means_empty_accessory_mask() {
        let mut s = spec(3);
        s.attributes.has_glasses = false;
        assert!(render(&s, 64).unwrap().accessory_mask.is_empty());
        s.attributes.has_glasses = true;
        let out = render(&s, 64).unwrap();
        assert!(!out.accessory_mask.is_empty());
        let limit = (0.1 * 64.0) as usize;
        assert!(out.accessory_mask.is_subset_of(&out.face_mask.dilate(limit)));
    }

    #[test]
    fn masks_and_keypoints_are_consistent() {
        for seed in 0..20 {
            let s = spec(seed);
            for res in SUPPORTED_RESOLUTIONS {
                let out = render(&s, res).unwrap();
                for k in &out.keypoints {
                    assert!(k.x >= 0.0 && k.x < res as f64 && k.y >= 0.0 && k.y < res as f64);
                }
                for name in ["left_eye", "right_eye"] {
                    let k = out.keypoint(name).unwrap();
                    assert!(out.face_mask.get(k.y as usize, k.x as usize), "{name} outside face");
                }
                // mask is exactly the analytic ellipse at pixel centers
                let g = Geometry::new(&s, res);
                let expected = Mask::from_fn(res, res, |y, x| {
                    g.in_face(g.to_local(x as f64 + 0.5, y as f64 + 0.5))
                });
                assert_eq!(out.face_mask, expected);
            }
        }
    }
}
