use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Shape and chroma factors that define who a face belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityFactors {
    pub identity_id: u32,
    pub face_hue_base: f64,
    /// Ellipse width / height.
    pub face_aspect: f64,
    /// Eye-center offset as a fraction of the face half-width.
    pub eye_spacing: f64,
    /// Fraction of face height.
    pub nose_length: f64,
    pub mouth_width: f64,
    /// Radians.
    pub brow_angle: f64,
}

/// Appearance factors that a swap must carry over from the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeFactors {
    /// In-plane rotation, radians.
    pub pose_angle: f64,
    /// -1 frown .. 1 smile.
    pub expression: f64,
    pub gaze: [f64; 2],
    pub lighting_dir: f64,
    pub lighting_strength: f64,
    pub skin_tone_shift: f64,
    pub makeup: f64,
    pub has_glasses: bool,
    pub background_color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceSpec {
    pub identity: IdentityFactors,
    pub attributes: AttributeFactors,
}

pub mod ranges {
    pub const FACE_HUE_BASE: (f64, f64) = (0.0, 1.0);
    pub const FACE_ASPECT: (f64, f64) = (0.7, 1.3);
    pub const EYE_SPACING: (f64, f64) = (0.2, 0.45);
    pub const NOSE_LENGTH: (f64, f64) = (0.05, 0.25);
    pub const MOUTH_WIDTH: (f64, f64) = (0.2, 0.5);
    pub const BROW_ANGLE: (f64, f64) = (-0.4, 0.4);

    pub const POSE_ANGLE: (f64, f64) = (-0.6, 0.6);
    pub const EXPRESSION: (f64, f64) = (-1.0, 1.0);
    pub const GAZE: (f64, f64) = (-1.0, 1.0);
    pub const LIGHTING_DIR: (f64, f64) = (0.0, std::f64::consts::TAU);
    pub const LIGHTING_STRENGTH: (f64, f64) = (0.0, 0.5);
    pub const SKIN_TONE_SHIFT: (f64, f64) = (-0.15, 0.15);
    pub const MAKEUP: (f64, f64) = (0.0, 1.0);
    pub const BACKGROUND: (f64, f64) = (0.0, 1.0);

    pub const GLASSES_PROBABILITY: f64 = 0.3;
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..hi)
}

fn check(name: &str, v: f64, (lo, hi): (f64, f64), inclusive_hi: bool) -> Result<()> {
    let ok = v.is_finite() && v >= lo && if inclusive_hi { v <= hi } else { v < hi };
    if ok {
        Ok(())
    } else {
        Err(Error::input(format!("{name}={v} outside [{lo}, {hi}]")))
    }
}

/// Identity factors as a pure function of `(seed, identity_id)`.
pub fn sample_identity(seed: u64, identity_id: u32) -> IdentityFactors {
    let mut r = rng::stream(seed, "identity", u64::from(identity_id));
    IdentityFactors {
        identity_id,
        face_hue_base: uniform(&mut r, ranges::FACE_HUE_BASE),
        face_aspect: uniform(&mut r, ranges::FACE_ASPECT),
        eye_spacing: uniform(&mut r, ranges::EYE_SPACING),
        nose_length: uniform(&mut r, ranges::NOSE_LENGTH),
        mouth_width: uniform(&mut r, ranges::MOUTH_WIDTH),
        brow_angle: uniform(&mut r, ranges::BROW_ANGLE),
    }
}

pub fn sample_attributes(rng: &mut impl Rng) -> AttributeFactors {
    AttributeFactors {
        pose_angle: uniform(rng, ranges::POSE_ANGLE),
        expression: uniform(rng, ranges::EXPRESSION),
        gaze: [uniform(rng, ranges::GAZE), uniform(rng, ranges::GAZE)],
        lighting_dir: uniform(rng, ranges::LIGHTING_DIR),
        lighting_strength: uniform(rng, ranges::LIGHTING_STRENGTH),
        skin_tone_shift: uniform(rng, ranges::SKIN_TONE_SHIFT),
        makeup: uniform(rng, ranges::MAKEUP),
        has_glasses: rng.random_bool(ranges::GLASSES_PROBABILITY),
        background_color: [
            uniform(rng, ranges::BACKGROUND),
            uniform(rng, ranges::BACKGROUND),
            uniform(rng, ranges::BACKGROUND),
        ],
    }
}

impl IdentityFactors {
    pub fn validate(&self) -> Result<()> {
        check("face_hue_base", self.face_hue_base, ranges::FACE_HUE_BASE, true)?;
        check("face_aspect", self.face_aspect, ranges::FACE_ASPECT, true)?;
        check("eye_spacing", self.eye_spacing, ranges::EYE_SPACING, true)?;
        check("nose_length", self.nose_length, ranges::NOSE_LENGTH, true)?;
        check("mouth_width", self.mouth_width, ranges::MOUTH_WIDTH, true)?;
        check("brow_angle", self.brow_angle, ranges::BROW_ANGLE, true)
    }

    /// Factors as a vector, in declaration order (without the id label).
    pub fn to_vec(&self) -> [f64; 6] {
        [
            self.face_hue_base,
            self.face_aspect,
            self.eye_spacing,
            self.nose_length,
            self.mouth_width,
            self.brow_angle,
        ]
    }
}

impl AttributeFactors {
    pub fn validate(&self) -> Result<()> {
        check("pose_angle", self.pose_angle, ranges::POSE_ANGLE, true)?;
        check("expression", self.expression, ranges::EXPRESSION, true)?;
        check("gaze.x", self.gaze[0], ranges::GAZE, true)?;
        check("gaze.y", self.gaze[1], ranges::GAZE, true)?;
        check("lighting_dir", self.lighting_dir, ranges::LIGHTING_DIR, false)?;
        check("lighting_strength", self.lighting_strength, ranges::LIGHTING_STRENGTH, true)?;
        check("skin_tone_shift", self.skin_tone_shift, ranges::SKIN_TONE_SHIFT, true)?;
        check("makeup", self.makeup, ranges::MAKEUP, true)?;
        for (i, &c) in self.background_color.iter().enumerate() {
            check(&format!("background_color[{i}]"), c, ranges::BACKGROUND, true)?;
        }
        Ok(())
    }

    /// Lighting as a 2-vector `strength * (cos dir, sin dir)`.
    pub fn lighting_vector(&self) -> [f64; 2] {
        [
            self.lighting_strength * self.lighting_dir.cos(),
            self.lighting_strength * self.lighting_dir.sin(),
        ]
    }

    /// Continuous factors in declaration order, with lighting expanded to its vector form.
    pub fn to_vec(&self) -> Vec<f64> {
        let l = self.lighting_vector();
        let mut v = vec![
            self.pose_angle,
            self.expression,
            self.gaze[0],
            self.gaze[1],
            l[0],
            l[1],
            self.skin_tone_shift,
            self.makeup,
        ];
        v.extend_from_slice(&self.background_color);
        v
    }
}

impl FaceSpec {
    pub fn validate(&self) -> Result<()> {
        self.identity.validate()?;
        self.attributes.validate()
    }
}
