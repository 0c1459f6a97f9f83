//! Attribute probes: a small convolutional regressor predicting the
//! continuous attribute factors of a render. Its hidden layer doubles as the
//! feature space for the Fréchet distance.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{VarBuilder, VarMap};
use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{self, AdamW, AdamWConfig, CheckpointMeta, Conv, Dense};
use crate::rng;
use crate::synthdata::{render, sample_attributes, sample_identity, AttributeFactors, FaceSpec};

pub const CHECKPOINT_KIND: &str = "attribute-probe";
pub const FEATURE_DIM: usize = 64;

/// Probed outputs, each scaled to roughly `[-1, 1]`.
pub const PROBE_OUTPUTS: [&str; 7] = [
    "pose_angle",
    "expression",
    "gaze_x",
    "gaze_y",
    "lighting_x",
    "lighting_y",
    "skin_tone_shift",
];
const SCALE: [f64; 7] = [0.6, 1.0, 1.0, 1.0, 0.5, 0.5, 0.15];

/// Normalized probe targets of an attribute draw.
pub fn probe_targets(a: &AttributeFactors) -> [f64; 7] {
    let l = a.lighting_vector();
    let raw = [a.pose_angle, a.expression, a.gaze[0], a.gaze[1], l[0], l[1], a.skin_tone_shift];
    std::array::from_fn(|i| raw[i] / SCALE[i])
}

/// Probe predictions in factor units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeEstimate {
    pub pose_angle: f64,
    pub expression: f64,
    pub gaze: [f64; 2],
    pub lighting: [f64; 2],
    pub skin_tone_shift: f64,
}

impl AttributeEstimate {
    fn from_normalized(v: &[f64]) -> Self {
        let d: Vec<f64> = v.iter().zip(SCALE).map(|(x, s)| x * s).collect();
        Self {
            pose_angle: d[0],
            expression: d[1],
            gaze: [d[2], d[3]],
            lighting: [d[4], d[5]],
            skin_tone_shift: d[6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub resolution: usize,
    pub base_channels: usize,
}

pub struct AttributeProbe {
    config: ProbeConfig,
    convs: Vec<Conv>,
    hidden: Dense,
    head: Dense,
    device: Device,
    dtype: DType,
}

impl AttributeProbe {
    fn build(vb: VarBuilder, config: &ProbeConfig) -> Result<Self> {
        if config.resolution % 16 != 0 {
            return Err(Error::config("probe resolution must be a multiple of 16"));
        }
        let c = config.base_channels;
        let chans = [3, c, 2 * c, 4 * c, 4 * c];
        let convs = (0..4)
            .map(|i| Conv::new(vb.pp(format!("conv{i}")), chans[i], chans[i + 1], 3, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let side = config.resolution / 16;
        Ok(Self {
            config: config.clone(),
            convs,
            hidden: Dense::new(vb.pp("hidden"), 4 * c * side * side, FEATURE_DIM)?,
            head: Dense::new(vb.pp("head"), FEATURE_DIM, PROBE_OUTPUTS.len())?,
            device: vb.device().clone(),
            dtype: vb.dtype(),
        })
    }

    pub fn new_trainable(config: &ProbeConfig, seed: u64, device: &Device) -> Result<(Self, VarMap)> {
        let vm = VarMap::new();
        let p = Self::build(VarBuilder::from_varmap(&vm, DType::F32, device), config)?;
        nn::init_params(&vm, seed)?;
        Ok((p, vm))
    }

    pub fn from_tensors(config: &ProbeConfig, tensors: &HashMap<String, Tensor>, device: &Device) -> Result<Self> {
        let detached: HashMap<String, Tensor> = tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("adam."))
            .map(|(k, v)| Ok((k.clone(), v.detach().to_dtype(DType::F32)?)))
            .collect::<Result<_>>()?;
        Self::build(VarBuilder::from_tensors(detached, DType::F32, device), config)
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.config
    }

    /// Hidden features `(B, FEATURE_DIM)`.
    pub fn features_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.to_dtype(self.dtype)?;
        for conv in &self.convs {
            h = conv.forward(&h)?.silu()?;
        }
        Ok(self.hidden.forward(&h.flatten_from(1)?)?.silu()?)
    }

    fn predict_tensor(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(&self.features_tensor(x)?)?)
    }

    fn run_batched(&self, images: &[&ImageTensor], features: bool) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = ImageTensor::stack(chunk, &self.device, self.dtype)?;
            let y = if features { self.features_tensor(&x)? } else { self.predict_tensor(&x)? };
            out.extend(y.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok(out)
    }

    pub fn features(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
        self.run_batched(images, true)
    }

    pub fn predict(&self, images: &[&ImageTensor]) -> Result<Vec<AttributeEstimate>> {
        Ok(self
            .run_batched(images, false)?
            .iter()
            .map(|v| AttributeEstimate::from_normalized(v))
            .collect())
    }

    pub fn checkpoint_meta(&self, varmap: &VarMap, extra: serde_json::Value) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            arch_hash: nn::architecture_hash(CHECKPOINT_KIND, &self.config, varmap)?,
            config: serde_json::to_value(&self.config)?,
            extra,
        })
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let (meta, tensors) = nn::load_checkpoint(path, device)?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "{} holds a {:?} checkpoint, expected {CHECKPOINT_KIND}",
                path.display(),
                meta.kind
            )));
        }
        let config: ProbeConfig = serde_json::from_value(meta.config.clone())?;
        if nn::architecture_hash_of_tensors(CHECKPOINT_KIND, &config, &tensors)? != meta.arch_hash {
            return Err(Error::Checkpoint(format!("{}: architecture hash mismatch", path.display())));
        }
        Self::from_tensors(&config, &tensors, device)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrainConfig {
    pub resolution: usize,
    pub base_channels: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub val_size: usize,
    pub min_r2: f64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            base_channels: 16,
            steps: 2000,
            batch_size: 64,
            lr: 2e-3,
            seed: 0,
            val_size: 512,
            min_r2: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub final_loss: f64,
    /// Held-out R² per entry of [`PROBE_OUTPUTS`].
    pub r2: Vec<f64>,
}

/// A fresh render of a random identity under a random attribute draw.
fn random_face(seed: u64, tag: &str, index: u64, resolution: usize) -> Result<(ImageTensor, [f64; 7])> {
    let mut r = rng::stream(seed, tag, index);
    let id = sample_identity(seed ^ 0x5eed, r.random::<u32>() >> 1);
    let spec = FaceSpec {
        identity: id,
        attributes: sample_attributes(&mut r),
    };
    let out = render(&spec, resolution)?;
    Ok((out.image.quantized(), probe_targets(&spec.attributes)))
}

pub fn r_squared(pred: &[f64], truth: &[f64]) -> f64 {
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

/// Train the probe on fresh renders of random identities; fail when any
/// held-out R² is below `min_r2`.
pub fn train_attribute_probe(cfg: &ProbeTrainConfig) -> Result<(AttributeProbe, VarMap, ProbeReport)> {
    let device = Device::Cpu;
    let pc = ProbeConfig {
        resolution: cfg.resolution,
        base_channels: cfg.base_channels,
    };
    let (probe, vm) = AttributeProbe::new_trainable(&pc, cfg.seed, &device)?;
    let mut opt = AdamW::new(
        nn::sorted_vars(&vm),
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let k = PROBE_OUTPUTS.len();
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        opt.config.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        let mut imgs = Vec::with_capacity(cfg.batch_size);
        let mut ys = Vec::with_capacity(cfg.batch_size * k);
        for j in 0..cfg.batch_size {
            let (img, y) = random_face(cfg.seed, "probe-train", (step * cfg.batch_size + j) as u64, cfg.resolution)?;
            imgs.push(img);
            ys.extend(y.iter().map(|&v| v as f32));
        }
        let x = ImageTensor::stack(&imgs.iter().collect::<Vec<_>>(), &device, DType::F32)?;
        let y = Tensor::from_vec(ys, (cfg.batch_size, k), &device)?;
        let loss = (probe.predict_tensor(&x)? - y)?.sqr()?.mean_all()?;
        nn::ensure_finite(&loss, "probe loss")?;
        opt.backward_step(&loss)?;
        final_loss = f64::from(loss.to_scalar::<f32>()?);
        if step % 100 == 0 {
            info!("probe step {step}: loss {final_loss:.5}");
        }
    }
    let mut imgs = Vec::with_capacity(cfg.val_size);
    let mut truth = vec![Vec::with_capacity(cfg.val_size); k];
    for j in 0..cfg.val_size {
        let (img, y) = random_face(cfg.seed, "probe-val", j as u64, cfg.resolution)?;
        imgs.push(img);
        for (i, v) in y.iter().enumerate() {
            truth[i].push(*v);
        }
    }
    let pred = probe.run_batched(&imgs.iter().collect::<Vec<_>>(), false)?;
    let r2: Vec<f64> = (0..k)
        .map(|i| r_squared(&pred.iter().map(|p| p[i]).collect::<Vec<_>>(), &truth[i]))
        .collect();
    info!("probe held-out R²: {r2:?}");
    if let Some((i, v)) = r2.iter().enumerate().find(|(_, &v)| v < cfg.min_r2) {
        return Err(Error::TrainingQuality(format!(
            "attribute probe R² for {} is {v:.3} (< {}); final loss {final_loss:.5}",
            PROBE_OUTPUTS[i], cfg.min_r2
        )));
    }
    Ok((probe, vm, ProbeReport { final_loss, r2 }))
}
