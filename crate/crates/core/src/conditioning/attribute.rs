//! Attribute condition image: the degraded target with landmark dots and an
//! accessory tint burned in.

use serde::{Deserialize, Serialize};

use crate::degradation::{degrade, DegradationSpec};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::synthdata::RenderOutput;

const ACCESSORY_TINT: [f32; 3] = [0.0, 1.0, 0.0];
const TINT_OPACITY: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlays {
    pub keypoints: bool,
    pub accessory: bool,
}

impl Overlays {
    pub const NONE: Self = Self {
        keypoints: false,
        accessory: false,
    };
    pub const ALL: Self = Self {
        keypoints: true,
        accessory: true,
    };
}

impl Default for Overlays {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeCondition(ImageTensor);

impl AttributeCondition {
    pub fn new(image: ImageTensor) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::input("attribute condition must have 3 channels"));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::input("attribute condition values must lie in [0,1]"));
        }
        Ok(Self(image))
    }

    pub fn image(&self) -> &ImageTensor {
        &self.0
    }

    pub fn into_image(self) -> ImageTensor {
        self.0
    }
}

/// Pixel that a keypoint's dot is centred on, if inside the image.
pub fn dot_center(x: f64, y: f64, height: usize, width: usize) -> Option<(usize, usize)> {
    let (px, py) = (x.floor(), y.floor());
    (px >= 0.0 && py >= 0.0 && (px as usize) < width && (py as usize) < height)
        .then(|| (py as usize, px as usize))
}

pub fn build_attribute_condition(
    render: &RenderOutput,
    spec: DegradationSpec,
    overlays: Overlays,
) -> Result<AttributeCondition> {
    let mut img = degrade(&render.image, &render.face_mask, spec)?;
    let (h, w) = (img.height(), img.width());
    if overlays.accessory {
        for y in 0..h {
            for x in 0..w {
                if render.accessory_mask.get(y, x) {
                    for (v, t) in img.pixel_mut(y, x).iter_mut().zip(ACCESSORY_TINT) {
                        *v = (1.0 - TINT_OPACITY) * *v + TINT_OPACITY * t;
                    }
                }
            }
        }
    }
    // dots go last so their centres stay exactly white
    if overlays.keypoints {
        for kp in &render.keypoints {
            let Some((cy, cx)) = dot_center(kp.x, kp.y, h, w) else {
                continue;
            };
            for y in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                for x in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                    img.pixel_mut(y, x).iter_mut().for_each(|v| *v = 1.0);
                }
            }
        }
    }
    AttributeCondition::new(img.clamp01())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{dataset::record_spec, render};

    fn find(glasses: bool) -> RenderOutput {
        (0..200)
            .map(|i| render(&record_spec(3, (i % 7) as u32, i), 64).unwrap())
            .find(|r| r.accessory_mask.is_empty() != glasses)
            .unwrap()
    }

    #[test]
    fn no_overlays_equals_degrade() {
        let r = find(true);
        for spec in DegradationSpec::ablation_grid() {
            let c = build_attribute_condition(&r, spec, Overlays::NONE).unwrap();
            assert_eq!(c.image(), &degrade(&r.image, &r.face_mask, spec).unwrap());
        }
    }

    #[test]
    fn dot_centers_are_white() {
        let r = find(true);
        let c = build_attribute_condition(&r, DegradationSpec::downsample(8), Overlays::ALL).unwrap();
        for kp in &r.keypoints {
            let (y, x) = dot_center(kp.x, kp.y, 64, 64).unwrap();
            assert_eq!(c.image().pixel(y, x), &[1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn accessory_tint_without_glasses_is_noop() {
        let r = find(false);
        let on = build_attribute_condition(&r, DegradationSpec::gaussian_blur(8), Overlays::ALL).unwrap();
        let off = build_attribute_condition(
            &r,
            DegradationSpec::gaussian_blur(8),
            Overlays {
                keypoints: true,
                accessory: false,
            },
        )
        .unwrap();
        assert_eq!(on, off);
    }

    #[test]
    fn tint_is_half_green() {
        let r = find(true);
        let base = degrade(&r.image, &r.face_mask, DegradationSpec::NONE).unwrap();
        let c = build_attribute_condition(
            &r,
            DegradationSpec::NONE,
            Overlays {
                keypoints: false,
                accessory: true,
            },
        )
        .unwrap();
        let mut checked = 0;
        for y in 0..64 {
            for x in 0..64 {
                let (a, b) = (base.pixel(y, x), c.image().pixel(y, x));
                if r.accessory_mask.get(y, x) {
                    assert!((b[0] - 0.5 * a[0]).abs() < 1e-6);
                    assert!((b[1] - (0.5 * a[1] + 0.5)).abs() < 1e-6);
                    checked += 1;
                } else {
                    assert_eq!(a, b);
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn outside_face_only_dots_change() {
        let r = find(true);
        let c = build_attribute_condition(&r, DegradationSpec::MASKING, Overlays::ALL).unwrap();
        let mut dots = crate::image::Mask::new(64, 64);
        for kp in &r.keypoints {
            let (cy, cx) = dot_center(kp.x, kp.y, 64, 64).unwrap();
            for y in cy.saturating_sub(1)..=(cy + 1).min(63) {
                for x in cx.saturating_sub(1)..=(cx + 1).min(63) {
                    dots.set(y, x, true);
                }
            }
        }
        for y in 0..64 {
            for x in 0..64 {
                if !r.face_mask.get(y, x) && !dots.get(y, x) {
                    assert_eq!(c.image().pixel(y, x), r.image.pixel(y, x));
                }
            }
        }
    }
}
