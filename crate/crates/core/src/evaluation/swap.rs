//! Face swapping: invert the target, then sample with the source identity
//! and the target's attribute condition.

use std::fmt;
use std::str::FromStr;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::conditioning::encoder::mask_background;
use crate::conditioning::{
    build_attribute_condition, make_bundle, AttributeCondition, ConditioningBundle,
    ConditioningMode, IdentityEmbedding, IdentityEncoder, Overlays,
};
use crate::degradation::DegradationSpec;
use crate::error::{Error, Result};
use crate::flowcore::{batch_conditioning, invert, sample, TimeGrid, VelocityField};
use crate::image::ImageTensor;
use crate::rng;
use crate::synthdata::RenderOutput;

/// Largest batch pushed through the velocity model at once.
pub const SWAP_CHUNK: usize = 16;

/// How the target is turned into the attribute condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "snake_case")]
pub enum ConditionStyle {
    /// Degraded target with overlays burned in (teacher).
    Degraded {
        degradation: DegradationSpec,
        overlays: Overlays,
    },
    /// The clean target image itself (student).
    Clean,
}

impl ConditionStyle {
    pub fn teacher(degradation: DegradationSpec) -> Self {
        ConditionStyle::Degraded {
            degradation,
            overlays: Overlays::default(),
        }
    }

    pub fn condition(&self, target: &RenderOutput) -> Result<AttributeCondition> {
        match *self {
            ConditionStyle::Degraded {
                degradation,
                overlays,
            } => build_attribute_condition(target, degradation, overlays),
            ConditionStyle::Clean => AttributeCondition::new(target.image.clone().clamp01()),
        }
    }
}

/// Where the sampling trajectory starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionMode {
    /// Invert the target under one of the four conditioning configurations.
    Invert(ConditioningMode),
    /// Skip inversion and start from fresh Gaussian noise.
    FreshNoise,
}

impl InversionMode {
    pub const ATTRIBUTE_ONLY: Self = InversionMode::Invert(ConditioningMode::AttributeOnly);
}

impl Default for InversionMode {
    fn default() -> Self {
        Self::ATTRIBUTE_ONLY
    }
}

impl fmt::Display for InversionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InversionMode::Invert(m) => f.write_str(m.as_str()),
            InversionMode::FreshNoise => f.write_str("fresh_noise"),
        }
    }
}

impl FromStr for InversionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "fresh_noise" {
            Ok(InversionMode::FreshNoise)
        } else {
            Ok(InversionMode::Invert(s.parse()?))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapSettings {
    pub condition: ConditionStyle,
    pub inversion: InversionMode,
    pub steps: usize,
    /// Seed for the fresh-noise path.
    pub seed: u64,
}

impl SwapSettings {
    pub fn teacher(degradation: DegradationSpec) -> Self {
        Self {
            condition: ConditionStyle::teacher(degradation),
            inversion: InversionMode::default(),
            steps: crate::flowcore::DEFAULT_STEPS,
            seed: 0,
        }
    }

    pub fn student() -> Self {
        Self {
            condition: ConditionStyle::Clean,
            ..Self::teacher(DegradationSpec::NONE)
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.steps)
    }
}

/// Masked identity embeddings for a batch of renders.
pub fn masked_embeddings(encoder: &IdentityEncoder, renders: &[&RenderOutput]) -> Result<Vec<IdentityEmbedding>> {
    let masked: Vec<ImageTensor> = renders
        .iter()
        .map(|r| mask_background(&r.image, &r.face_mask))
        .collect::<Result<_>>()?;
    encoder.embed_batch(&masked.iter().collect::<Vec<_>>())
}

/// Initial noise for a batch of targets under `settings.inversion`.
pub fn initial_noise(
    model: &dyn VelocityField,
    targets: &[&RenderOutput],
    target_ids: Option<&[IdentityEmbedding]>,
    atts: &[AttributeCondition],
    settings: &SwapSettings,
    noise_index: u64,
) -> Result<Tensor> {
    let device = Device::Cpu;
    let res = model.resolution();
    match settings.inversion {
        InversionMode::FreshNoise => {
            let mut r = rng::stream(settings.seed, "swap-fresh-noise", noise_index);
            rng::gaussian_tensor(&mut r, &[targets.len(), 3, res, res], &device, model.dtype())
        }
        InversionMode::Invert(mode) => {
            let bundles: Vec<ConditioningBundle> = (0..targets.len())
                .map(|i| {
                    make_bundle(
                        target_ids.map(|ids| ids[i].clone()),
                        Some(atts[i].clone()),
                        mode,
                    )
                })
                .collect::<Result<_>>()?;
            let cond = batch_conditioning(model, &bundles, &device)?;
            let imgs: Vec<&ImageTensor> = targets.iter().map(|t| &t.image).collect();
            let x = ImageTensor::stack(&imgs, &device, model.dtype())?;
            invert(model, &x, &cond, settings.grid()?)
        }
    }
}

/// Swap each `(source, target)` pair. Identity comes from the masked source,
/// attributes from the target.
pub fn swap_batch(
    model: &dyn VelocityField,
    encoder: &IdentityEncoder,
    pairs: &[(&RenderOutput, &RenderOutput)],
    settings: &SwapSettings,
) -> Result<Vec<ImageTensor>> {
    let sources: Vec<&RenderOutput> = pairs.iter().map(|p| p.0).collect();
    let targets: Vec<&RenderOutput> = pairs.iter().map(|p| p.1).collect();
    let src_ids = masked_embeddings(encoder, &sources)?;
    swap_with_embeddings(model, encoder, &src_ids, &targets, settings)
}

/// Like [`swap_batch`] with precomputed source embeddings.
pub fn swap_with_embeddings(
    model: &dyn VelocityField,
    encoder: &IdentityEncoder,
    source_ids: &[IdentityEmbedding],
    targets: &[&RenderOutput],
    settings: &SwapSettings,
) -> Result<Vec<ImageTensor>> {
    if source_ids.len() != targets.len() {
        return Err(Error::input("swap: source/target count mismatch"));
    }
    let device = Device::Cpu;
    let grid = settings.grid()?;
    let needs_tgt_id = matches!(settings.inversion, InversionMode::Invert(m) if m.uses_identity());
    let mut out = Vec::with_capacity(targets.len());
    for (chunk_i, (ids, tgts)) in source_ids
        .chunks(SWAP_CHUNK)
        .zip(targets.chunks(SWAP_CHUNK))
        .enumerate()
    {
        let atts: Vec<AttributeCondition> = tgts
            .iter()
            .map(|t| settings.condition.condition(t))
            .collect::<Result<_>>()?;
        let tgt_ids = if needs_tgt_id {
            Some(masked_embeddings(encoder, tgts)?)
        } else {
            None
        };
        let noise = initial_noise(model, tgts, tgt_ids.as_deref(), &atts, settings, chunk_i as u64)?;
        let bundles: Vec<ConditioningBundle> = ids
            .iter()
            .zip(&atts)
            .map(|(id, att)| make_bundle(Some(id.clone()), Some(att.clone()), ConditioningMode::Full))
            .collect::<Result<_>>()?;
        let cond = batch_conditioning(model, &bundles, &device)?;
        let s = sample(model, &noise, &cond, grid)?;
        out.extend(ImageTensor::unstack(&s.image)?);
    }
    Ok(out)
}

/// Swap a single pair.
pub fn swap(
    model: &dyn VelocityField,
    encoder: &IdentityEncoder,
    src: &RenderOutput,
    tgt: &RenderOutput,
    settings: &SwapSettings,
) -> Result<ImageTensor> {
    Ok(swap_batch(model, encoder, &[(src, tgt)], settings)?.remove(0))
}
