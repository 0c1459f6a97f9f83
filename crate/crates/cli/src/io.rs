//! Path resolution, output guards, model and image loading.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device};
use log::warn;

use swapflow::conditioning::IdentityEncoder;
use swapflow::evaluation::{ConditionStyle, SwapSettings};
use swapflow::flowcore::VelocityModel;
use swapflow::image::{load_mask_png, Mask};
use swapflow::nn;
use swapflow::synthdata::dataset::MANIFEST_FILE;
use swapflow::synthdata::{DatasetManifest, Keypoint, RenderOutput};
use swapflow::training::{Role, RunInfo, TeacherConfig, FINAL_CHECKPOINT};
use swapflow::ImageTensor;

/// Bad arguments or a refused overwrite; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<swapflow::Error>() {
        Some(swapflow::Error::Config(_) | swapflow::Error::Input(_)) => 2,
        _ => 3,
    }
}

pub fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Refuse to touch an existing output unless `force`, in which case it is
/// removed first.
pub fn claim_output(path: &Path, force: bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    if !force {
        return Err(usage(format!("{} already exists; pass --force to overwrite", path.display())));
    }
    if path.is_dir() {
        fs::remove_dir_all(path).with_context(|| format!("removing {}", path.display()))?;
    } else {
        fs::remove_file(path).with_context(|| format!("removing {}", path.display()))?;
    }
    Ok(())
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

/// A run directory resolves to its final checkpoint.
pub fn checkpoint_path(p: &Path) -> Result<PathBuf> {
    let path = if p.is_dir() { p.join(FINAL_CHECKPOINT) } else { p.to_path_buf() };
    if !path.exists() {
        return Err(usage(format!("no checkpoint at {}", path.display())));
    }
    Ok(path)
}

/// Directory that owns a checkpoint (the run directory).
pub fn run_dir(model: &Path) -> PathBuf {
    if model.is_dir() {
        model.to_path_buf()
    } else {
        model.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

pub struct LoadedModel {
    pub model: VelocityModel,
    pub info: RunInfo,
    pub path: PathBuf,
}

impl LoadedModel {
    pub fn load(p: &Path) -> Result<Self> {
        let path = checkpoint_path(p)?;
        let (model, meta) = VelocityModel::load(&path, &Device::Cpu, DType::F32)?;
        let info: RunInfo = serde_json::from_value(meta.extra)
            .with_context(|| format!("{} carries no training metadata", path.display()))?;
        Ok(Self { model, info, path })
    }

    pub fn teacher_config(&self) -> Result<TeacherConfig> {
        if self.info.role != Role::Teacher {
            bail!(usage(format!("{} is not a teacher checkpoint", self.path.display())));
        }
        Ok(serde_json::from_value(self.info.train_config.clone())?)
    }

    /// Swap settings matching how this model was trained.
    pub fn swap_settings(&self) -> Result<SwapSettings> {
        Ok(match self.info.role {
            Role::Student => SwapSettings::student(),
            Role::Teacher => {
                let cfg = self.teacher_config()?;
                SwapSettings {
                    condition: ConditionStyle::Degraded {
                        degradation: cfg.degradation,
                        overlays: cfg.overlays(),
                    },
                    ..SwapSettings::teacher(cfg.degradation)
                }
            }
        })
    }

    pub fn needs_annotations(&self) -> bool {
        self.info.role == Role::Teacher
    }
}

/// Load the identity encoder, checking it is the one a model was trained with.
pub fn load_encoder(path: &Path, expected_hash: Option<&str>) -> Result<(IdentityEncoder, String)> {
    if !path.exists() {
        return Err(usage(format!("no identity encoder at {}", path.display())));
    }
    let hash = nn::file_hash(path)?;
    if let Some(h) = expected_hash {
        if h != hash {
            return Err(swapflow::Error::Checkpoint(format!(
                "{} is not the encoder this model was trained with",
                path.display()
            ))
            .into());
        }
    }
    Ok((IdentityEncoder::load(path, &Device::Cpu, DType::F32)?, hash))
}

/// An image plus its annotations. PNGs inside a dataset's `images/` folder
/// pick up the recorded mask and keypoints; other files get a full face
/// mask and no keypoints.
pub struct LoadedImage {
    pub render: RenderOutput,
    pub annotated: bool,
}

pub fn load_image(path: &Path, resolution: usize) -> Result<LoadedImage> {
    let image = ImageTensor::load_png(path)?;
    if image.height() != resolution || image.width() != resolution || image.channels() != 3 {
        return Err(usage(format!(
            "{} must be a {resolution}x{resolution} RGB image",
            path.display()
        )));
    }
    if let Some(render) = dataset_annotations(path, &image)? {
        return Ok(LoadedImage {
            render,
            annotated: true,
        });
    }
    warn!("{} has no dataset annotations; using the whole frame as the face", path.display());
    Ok(LoadedImage {
        render: RenderOutput {
            face_mask: Mask::full(resolution, resolution),
            accessory_mask: Mask::new(resolution, resolution),
            keypoints: Vec::new(),
            image,
        },
        annotated: false,
    })
}

fn dataset_annotations(path: &Path, image: &ImageTensor) -> Result<Option<RenderOutput>> {
    let Ok(canon) = path.canonicalize() else { return Ok(None) };
    let (Some(images_dir), Some(name)) = (canon.parent(), canon.file_name()) else {
        return Ok(None);
    };
    if images_dir.file_name().is_none_or(|n| n != "images") {
        return Ok(None);
    }
    let Some(root) = images_dir.parent() else { return Ok(None) };
    if !root.join(MANIFEST_FILE).exists() {
        return Ok(None);
    }
    let manifest = DatasetManifest::load(root)?;
    let rel = format!("images/{}", name.to_string_lossy());
    let Some(rec) = manifest.records.iter().find(|r| r.image == rel) else {
        return Ok(None);
    };
    let [face_mask, accessory_mask, _] = load_mask_png(&root.join(&rec.mask))?;
    Ok(Some(RenderOutput {
        image: image.clone(),
        face_mask,
        accessory_mask,
        keypoints: rec
            .keypoints
            .iter()
            .map(|(name, x, y)| Keypoint {
                name: name.clone(),
                x: *x,
                y: *y,
            })
            .collect(),
    }))
}

pub fn write_toml<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, toml::to_string(value)?).with_context(|| format!("writing {}", path.display()))
}
