//! Identity encoder: four strided convolutions, an MLP head, and an
//! L2-normalized embedding trained by cosine-softmax identity classification.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{VarBuilder, VarMap};
use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Mask};
use crate::nn::{self, AdamW, AdamWConfig, CheckpointMeta, Conv, Dense};
use crate::rng;
use crate::synthdata::{render, sample_attributes, Dataset, FaceSpec, IdentityFactors};

pub const CHECKPOINT_KIND: &str = "identity-encoder";
const LOGIT_SCALE: f64 = 16.0;

/// Unit-norm identity embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedding(Vec<f32>);

impl IdentityEmbedding {
    /// Normalizes `v`; fails on a zero or non-finite vector.
    pub fn new(v: Vec<f32>) -> Result<Self> {
        let n = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Numeric("cannot normalize identity embedding".into()));
        }
        Ok(Self(v.into_iter().map(|x| (f64::from(x) / n) as f32).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        let dot: f64 = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum();
        let na = self.0.iter().map(|&a| f64::from(a).powi(2)).sum::<f64>().sqrt();
        let nb = other.0.iter().map(|&b| f64::from(b).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    pub fn negated(&self) -> Self {
        Self(self.0.iter().map(|&x| -x).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub resolution: usize,
    pub embed_dim: usize,
    pub base_channels: usize,
    pub num_classes: usize,
}

pub struct IdentityEncoder {
    config: EncoderConfig,
    convs: Vec<Conv>,
    hidden: Dense,
    head: Dense,
    classifier: Tensor,
    device: Device,
    dtype: DType,
}

impl IdentityEncoder {
    fn build(vb: VarBuilder, config: &EncoderConfig) -> Result<Self> {
        let c = config.base_channels;
        let chans = [3, c, 2 * c, 4 * c, 4 * c];
        let convs = (0..4)
            .map(|i| Conv::new(vb.pp(format!("conv{i}")), chans[i], chans[i + 1], 3, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let side = config.resolution / 16;
        let flat = 4 * c * side * side;
        let hidden = Dense::new(vb.pp("hidden"), flat, 128)?;
        let head = Dense::new(vb.pp("head"), 128, config.embed_dim)?;
        let classifier = vb.get_with_hints(
            (config.num_classes, config.embed_dim),
            "classifier.weight",
            candle_nn::Init::Const(0.0),
        )?;
        Ok(Self {
            config: config.clone(),
            convs,
            hidden,
            head,
            classifier,
            device: vb.device().clone(),
            dtype: vb.dtype(),
        })
    }

    /// A trainable encoder with seeded weights.
    pub fn new_trainable(config: &EncoderConfig, seed: u64, device: &Device) -> Result<(Self, VarMap)> {
        if config.resolution % 16 != 0 {
            return Err(Error::config("encoder resolution must be a multiple of 16"));
        }
        let vm = VarMap::new();
        let enc = Self::build(VarBuilder::from_varmap(&vm, DType::F32, device), config)?;
        nn::init_params(&vm, seed)?;
        Ok((enc, vm))
    }

    /// A frozen encoder over constant tensors; gradients never reach it.
    pub fn from_tensors(
        config: &EncoderConfig,
        tensors: &HashMap<String, Tensor>,
        device: &Device,
        dtype: DType,
    ) -> Result<Self> {
        let detached: HashMap<String, Tensor> = tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("adam."))
            .map(|(k, v)| Ok((k.clone(), v.detach().to_dtype(dtype)?)))
            .collect::<Result<_>>()?;
        Self::build(VarBuilder::from_tensors(detached, dtype, device), config)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Penultimate convolutional feature map, `(B, 4c, H/16, W/16)`.
    pub fn feature_map(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.to_dtype(self.dtype)?;
        for conv in &self.convs {
            h = conv.forward(&h)?.silu()?;
        }
        Ok(h)
    }

    /// Differentiable unit-norm embeddings, `(B, d)`.
    pub fn embed_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.feature_map(x)?.flatten_from(1)?;
        let e = self.head.forward(&self.hidden.forward(&f)?.silu()?)?;
        nn::l2_normalize(&e)
    }

    fn logits(&self, emb: &Tensor) -> Result<Tensor> {
        let w = nn::l2_normalize(&self.classifier)?;
        Ok((emb.matmul(&w.t()?)? * LOGIT_SCALE)?)
    }

    pub fn embed_batch(&self, images: &[&ImageTensor]) -> Result<Vec<IdentityEmbedding>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = ImageTensor::stack(chunk, &self.device, self.dtype)?;
            let e = self.embed_tensor(&x)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
            for row in e {
                out.push(IdentityEmbedding::new(row)?);
            }
        }
        Ok(out)
    }

    pub fn checkpoint_meta(&self, varmap: &VarMap, extra: serde_json::Value) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            arch_hash: nn::architecture_hash(CHECKPOINT_KIND, &self.config, varmap)?,
            config: serde_json::to_value(&self.config)?,
            extra,
        })
    }

    /// Load a frozen encoder, refusing checkpoints of another kind or architecture.
    pub fn load(path: &Path, device: &Device, dtype: DType) -> Result<Self> {
        let (meta, tensors) = nn::load_checkpoint(path, device)?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "{} holds a {:?} checkpoint, expected {CHECKPOINT_KIND}",
                path.display(),
                meta.kind
            )));
        }
        let config: EncoderConfig = serde_json::from_value(meta.config.clone())?;
        let hash = nn::architecture_hash_of_tensors(CHECKPOINT_KIND, &config, &tensors)?;
        if hash != meta.arch_hash {
            return Err(Error::Checkpoint(format!(
                "{}: architecture hash mismatch",
                path.display()
            )));
        }
        Self::from_tensors(&config, &tensors, device, dtype)
    }
}

/// Zero the background when a mask is given, then embed.
pub fn embed_identity(
    encoder: &IdentityEncoder,
    image: &ImageTensor,
    source_mask: Option<&Mask>,
) -> Result<IdentityEmbedding> {
    let input = match source_mask {
        Some(m) => mask_background(image, m)?,
        None => image.clone(),
    };
    Ok(encoder.embed_batch(&[&input])?.remove(0))
}

/// Keep the face, zero everything else.
pub fn mask_background(image: &ImageTensor, face_mask: &Mask) -> Result<ImageTensor> {
    if face_mask.height() != image.height() || face_mask.width() != image.width() {
        return Err(Error::input("mask_background: shape mismatch"));
    }
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if !face_mask.get(y, x) {
                out.pixel_mut(y, x).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub embed_dim: usize,
    pub base_channels: usize,
    /// Held-out renders per identity for validation.
    pub val_per_identity: usize,
    /// Fraction of training inputs with the background zeroed.
    pub mask_probability: f64,
    /// Below this validation accuracy training is reported as failed.
    pub min_accuracy: f64,
    pub target_accuracy: f64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 64,
            lr: 2e-3,
            weight_decay: 1e-4,
            seed: 0,
            embed_dim: 32,
            base_channels: 32,
            val_per_identity: 10,
            mask_probability: 0.5,
            min_accuracy: 0.80,
            target_accuracy: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub val_top1: f64,
    pub same_identity_cosine: f64,
    pub different_identity_cosine: f64,
    pub reached_target: bool,
}

/// Fresh render of a known identity under a new attribute draw, optionally
/// with its background zeroed.
fn fresh_sample(
    identity: &IdentityFactors,
    resolution: usize,
    rng: &mut impl Rng,
    mask_probability: f64,
) -> Result<ImageTensor> {
    let spec = FaceSpec {
        identity: identity.clone(),
        attributes: sample_attributes(rng),
    };
    let out = render(&spec, resolution)?;
    let img = out.image.quantized();
    if rng.random_bool(mask_probability) {
        mask_background(&img, &out.face_mask)
    } else {
        Ok(img)
    }
}

/// Train on fresh renders of the dataset's identities (new attribute draws
/// every step), validate on a disjoint stream of renders.
pub fn train_identity_encoder(
    dataset: &Dataset,
    cfg: &EncoderTrainConfig,
) -> Result<(IdentityEncoder, VarMap, EncoderTrainReport)> {
    let by_id = dataset.by_identity();
    if by_id.values().any(|v| v.len() < 2) {
        return Err(Error::input("identity encoder needs >= 2 images per identity"));
    }
    let identities: Vec<IdentityFactors> = by_id
        .values()
        .map(|idx| dataset.spec(idx[0]).identity.clone())
        .collect();
    let labels: HashMap<u32, u32> = identities
        .iter()
        .enumerate()
        .map(|(i, f)| (f.identity_id, i as u32))
        .collect();
    let res = dataset.resolution();
    let config = EncoderConfig {
        resolution: res,
        embed_dim: cfg.embed_dim,
        base_channels: cfg.base_channels,
        num_classes: identities.len(),
    };
    let device = Device::Cpu;
    let (enc, vm) = IdentityEncoder::new_trainable(&config, cfg.seed, &device)?;
    let mut opt = AdamW::new(
        nn::sorted_vars(&vm),
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let mut r = rng::stream(cfg.seed, "encoder-train", step as u64);
        let mut imgs = Vec::with_capacity(cfg.batch_size);
        let mut ys = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let k = r.random_range(0..identities.len());
            imgs.push(fresh_sample(&identities[k], res, &mut r, cfg.mask_probability)?);
            ys.push(labels[&identities[k].identity_id]);
        }
        let refs: Vec<&ImageTensor> = imgs.iter().collect();
        let x = ImageTensor::stack(&refs, &device, DType::F32)?;
        let y = Tensor::new(ys.as_slice(), &device)?;
        let logits = enc.logits(&enc.embed_tensor(&x)?)?;
        let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
        nn::ensure_finite(&loss, "identity encoder loss")?;
        opt.backward_step(&loss)?;
        final_loss = loss.to_scalar::<f32>()? as f64;
        if step % 100 == 0 {
            info!("encoder step {step}: loss {final_loss:.4}");
        }
    }

    // validation on unseen attribute draws, unmasked
    let mut val_imgs = Vec::new();
    let mut val_labels = Vec::new();
    for (k, ident) in identities.iter().enumerate() {
        for j in 0..cfg.val_per_identity {
            let mut r = rng::stream(cfg.seed, "encoder-val", (k * 10_000 + j) as u64);
            val_imgs.push(fresh_sample(ident, res, &mut r, 0.0)?);
            val_labels.push(k);
        }
    }
    let refs: Vec<&ImageTensor> = val_imgs.iter().collect();
    let mut correct = 0usize;
    let mut embs = Vec::with_capacity(refs.len());
    for (chunk_i, chunk) in refs.chunks(64).enumerate() {
        let x = ImageTensor::stack(chunk, &device, DType::F32)?;
        let e = enc.embed_tensor(&x)?;
        let pred = enc.logits(&e)?.argmax(1)?.to_vec1::<u32>()?;
        for (i, p) in pred.iter().enumerate() {
            if *p as usize == val_labels[chunk_i * 64 + i] {
                correct += 1;
            }
        }
        for row in e.to_vec2::<f32>()? {
            embs.push(IdentityEmbedding::new(row)?);
        }
    }
    let val_top1 = correct as f64 / refs.len() as f64;
    let (mut same, mut ns, mut diff, mut nd) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..embs.len() {
        for j in (i + 1)..embs.len() {
            let c = embs[i].cosine(&embs[j]);
            if val_labels[i] == val_labels[j] {
                same += c;
                ns += 1;
            } else {
                diff += c;
                nd += 1;
            }
        }
    }
    let report = EncoderTrainReport {
        steps: cfg.steps,
        final_loss,
        val_top1,
        same_identity_cosine: same / ns.max(1) as f64,
        different_identity_cosine: diff / nd.max(1) as f64,
        reached_target: val_top1 >= cfg.target_accuracy,
    };
    info!("identity encoder validation top-1 {val_top1:.3}");
    if val_top1 < cfg.min_accuracy {
        return Err(Error::TrainingQuality(format!(
            "identity encoder reached only {:.1}% validation top-1 (< {:.0}%); loss {final_loss:.4}, \
             same/diff cosine {:.3}/{:.3}",
            100.0 * val_top1,
            100.0 * cfg.min_accuracy,
            report.same_identity_cosine,
            report.different_identity_cosine
        )));
    }
    if !report.reached_target {
        warn!(
            "identity encoder validation top-1 {:.1}% is below the {:.0}% target",
            100.0 * val_top1,
            100.0 * cfg.target_accuracy
        );
    }
    Ok((enc, vm, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_normalization_and_cosine() {
        let e = IdentityEmbedding::new(vec![3.0, 4.0]).unwrap();
        assert!((e.as_slice()[0] - 0.6).abs() < 1e-7);
        assert!((e.cosine(&e) - 1.0).abs() < 1e-12);
        assert!((e.cosine(&e.negated()) + 1.0).abs() < 1e-12);
        assert!(IdentityEmbedding::new(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn untrained_encoder_is_deterministic_and_unit_norm() {
        let cfg = EncoderConfig {
            resolution: 32,
            embed_dim: 8,
            base_channels: 4,
            num_classes: 3,
        };
        let (enc, _) = IdentityEncoder::new_trainable(&cfg, 1, &Device::Cpu).unwrap();
        let spec = crate::synthdata::dataset::record_spec(0, 0, 0);
        let r = render(&spec, 32).unwrap();
        let a = embed_identity(&enc, &r.image, None).unwrap();
        let b = embed_identity(&enc, &r.image, None).unwrap();
        assert_eq!(a, b);
        let n: f64 = a.as_slice().iter().map(|&x| f64::from(x).powi(2)).sum();
        assert!((n - 1.0).abs() < 1e-6);
        // an image whose background is already zero is unchanged by masking
        let clean = mask_background(&r.image, &r.face_mask).unwrap();
        assert_eq!(
            embed_identity(&enc, &clean, Some(&r.face_mask)).unwrap(),
            embed_identity(&enc, &clean, None).unwrap()
        );
    }
}
