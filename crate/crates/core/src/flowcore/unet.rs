//! Conditional U-Net velocity model.
//!
//! Identity enters through FiLM modulation of every residual block (added to
//! the sinusoidal time embedding); the attribute condition image is
//! concatenated to `z_t` at the input. Absent slots are replaced by learned
//! null tokens selected per sample by the batch's null indicators.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{GroupNorm, Init, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use super::VelocityField;
use crate::conditioning::BatchConditioning;
use crate::error::{Error, Result};
use crate::nn::{self, CheckpointMeta, Conv, Dense};

pub const CHECKPOINT_KIND: &str = "velocity-model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityConfig {
    pub resolution: usize,
    pub embed_dim: usize,
    pub base_channels: usize,
    /// Per-level channel multipliers; one level per entry.
    pub channel_mult: Vec<usize>,
    /// Width of the shared time/identity embedding.
    pub emb_width: usize,
}

impl Default for VelocityConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            embed_dim: 32,
            base_channels: 32,
            channel_mult: vec![1, 2, 4, 4],
            emb_width: 128,
        }
    }
}

impl VelocityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return Err(Error::config("channel_mult must be non-empty and positive"));
        }
        let div = 1usize << (self.channel_mult.len() - 1);
        if self.resolution == 0 || self.resolution % div != 0 {
            return Err(Error::config(format!(
                "resolution {} not divisible by {div}",
                self.resolution
            )));
        }
        if self.base_channels == 0 || self.embed_dim == 0 || self.emb_width < 2 {
            return Err(Error::config("velocity model widths must be positive"));
        }
        Ok(())
    }
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    film: Dense,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
    cout: usize,
}

impl ResBlock {
    fn new(vb: VarBuilder, cin: usize, cout: usize, emb: usize) -> Result<Self> {
        Ok(Self {
            norm1: nn::group_norm(vb.pp("norm1"), cin)?,
            conv1: Conv::same(vb.pp("conv1"), cin, cout)?,
            film: Dense::new(vb.pp("film"), emb, 2 * cout)?,
            norm2: nn::group_norm(vb.pp("norm2"), cout)?,
            conv2: Conv::same(vb.pp("conv2"), cout, cout)?,
            skip: if cin != cout {
                Some(Conv::new(vb.pp("skip"), cin, cout, 1, 1, 0)?)
            } else {
                None
            },
            cout,
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let film = self.film.forward(emb)?;
        let b = film.dim(0)?;
        let scale = film.narrow(1, 0, self.cout)?.reshape((b, self.cout, 1, 1))?;
        let shift = film.narrow(1, self.cout, self.cout)?.reshape((b, self.cout, 1, 1))?;
        let h = self.norm2.forward(&h)?;
        let h = (h.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift))?;
        let h = self.conv2.forward(&h.silu()?)?;
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((s + h)?)
    }
}

pub struct VelocityModel {
    config: VelocityConfig,
    null_id: Tensor,
    null_att: Tensor,
    time1: Dense,
    time2: Dense,
    id_proj: Dense,
    conv_in: Conv,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    norm_out: GroupNorm,
    conv_out: Conv,
    dtype: DType,
}

/// Sinusoidal features of `t * 1000`, shape `(B, dim)`.
pub fn time_embedding(t: &Tensor, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let freqs = Tensor::from_vec(freqs, (1, half), t.device())?.to_dtype(t.dtype())?;
    let arg = (t.reshape(((), 1))? * 1000.0)?.broadcast_mul(&freqs)?;
    Ok(Tensor::cat(&[arg.sin()?, arg.cos()?], 1)?)
}

impl VelocityModel {
    fn build(vb: VarBuilder, config: &VelocityConfig) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let e = config.emb_width;
        let chans: Vec<usize> = config.channel_mult.iter().map(|m| m * c).collect();
        let null_id = vb.get_with_hints(config.embed_dim, "null_id", Init::Const(0.0))?;
        let r = config.resolution;
        let null_att = vb.get_with_hints((3, r, r), "null_att", Init::Const(0.5))?;
        let mut down = Vec::new();
        let mut prev = c;
        for (i, &ch) in chans.iter().enumerate() {
            down.push(ResBlock::new(vb.pp(format!("down{i}")), prev, ch, e)?);
            prev = ch;
        }
        let mid = ResBlock::new(vb.pp("mid"), prev, prev, e)?;
        let mut up = Vec::new();
        for (i, &ch) in chans.iter().enumerate().rev() {
            up.push(ResBlock::new(vb.pp(format!("up{i}")), prev + ch, ch, e)?);
            prev = ch;
        }
        Ok(Self {
            config: config.clone(),
            null_id,
            null_att,
            time1: Dense::new(vb.pp("time1"), e, e)?,
            time2: Dense::new(vb.pp("time2"), e, e)?,
            id_proj: Dense::new(vb.pp("id_proj"), config.embed_dim, e)?,
            conv_in: Conv::same(vb.pp("conv_in"), 6, c)?,
            down,
            mid,
            up,
            norm_out: nn::group_norm(vb.pp("norm_out"), c)?,
            conv_out: Conv::same(vb.pp("zero_out"), c, 3)?,
            dtype: vb.dtype(),
        })
    }

    /// Seeded trainable model. The output convolution starts at zero.
    pub fn new_trainable(
        config: &VelocityConfig,
        seed: u64,
        device: &Device,
        dtype: DType,
    ) -> Result<(Self, VarMap)> {
        let vm = VarMap::new();
        let model = Self::build(VarBuilder::from_varmap(&vm, dtype, device), config)?;
        nn::init_params(&vm, seed)?;
        Ok((model, vm))
    }

    /// Frozen model over detached copies of `tensors`.
    pub fn from_tensors(
        config: &VelocityConfig,
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

    pub fn config(&self) -> &VelocityConfig {
        &self.config
    }

    pub fn checkpoint_meta(&self, varmap: &VarMap, extra: serde_json::Value) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            arch_hash: nn::architecture_hash(CHECKPOINT_KIND, &self.config, varmap)?,
            config: serde_json::to_value(&self.config)?,
            extra,
        })
    }

    /// Read and validate a checkpoint; returns its metadata, config and tensors.
    pub fn read_checkpoint(
        path: &Path,
        device: &Device,
    ) -> Result<(CheckpointMeta, VelocityConfig, HashMap<String, Tensor>)> {
        let (meta, tensors) = nn::load_checkpoint(path, device)?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "{} holds a {:?} checkpoint, expected {CHECKPOINT_KIND}",
                path.display(),
                meta.kind
            )));
        }
        let config: VelocityConfig = serde_json::from_value(meta.config.clone())?;
        let hash = nn::architecture_hash_of_tensors(CHECKPOINT_KIND, &config, &tensors)?;
        if hash != meta.arch_hash {
            return Err(Error::Checkpoint(format!(
                "{}: architecture hash mismatch",
                path.display()
            )));
        }
        Ok((meta, config, tensors))
    }

    /// Frozen model from a checkpoint, with its metadata.
    pub fn load(path: &Path, device: &Device, dtype: DType) -> Result<(Self, CheckpointMeta)> {
        let (meta, config, tensors) = Self::read_checkpoint(path, device)?;
        Ok((Self::from_tensors(&config, &tensors, device, dtype)?, meta))
    }

    /// The identity vector actually fed to the network, `(B, d)`.
    fn effective_id(&self, cond: &BatchConditioning) -> Result<Tensor> {
        let null = cond.id_null.to_dtype(self.dtype)?;
        let keep = null.affine(-1.0, 1.0)?;
        let id = cond.id.to_dtype(self.dtype)?.broadcast_mul(&keep)?;
        let tok = self.null_id.unsqueeze(0)?.broadcast_mul(&null)?;
        Ok((id + tok)?)
    }

    fn effective_att(&self, cond: &BatchConditioning) -> Result<Tensor> {
        let null = cond.att_null.to_dtype(self.dtype)?;
        let keep = null.affine(-1.0, 1.0)?;
        let att = cond.att.to_dtype(self.dtype)?.broadcast_mul(&keep)?;
        let tok = self.null_att.unsqueeze(0)?.broadcast_mul(&null)?;
        Ok((att + tok)?)
    }

    pub fn forward(&self, z: &Tensor, t: &Tensor, cond: &BatchConditioning) -> Result<Tensor> {
        let r = self.config.resolution;
        let b = z.dim(0)?;
        if z.dims() != [b, 3, r, r] {
            return Err(Error::input(format!(
                "latent shape {:?}, model expects (B, 3, {r}, {r})",
                z.dims()
            )));
        }
        if cond.batch_size()? != b || t.dims() != [b] {
            return Err(Error::input("conditioning/time batch size mismatch"));
        }
        let z = z.to_dtype(self.dtype)?;
        let t = t.to_dtype(self.dtype)?;
        let temb = time_embedding(&t, self.config.emb_width)?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;
        let emb = (temb + self.id_proj.forward(&self.effective_id(cond)?)?)?.silu()?;

        let x = Tensor::cat(&[&z, &self.effective_att(cond)?], 1)?;
        let mut h = self.conv_in.forward(&x)?;
        let last = self.down.len() - 1;
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, block) in self.down.iter().enumerate() {
            h = block.forward(&h, &emb)?;
            skips.push(h.clone());
            if i < last {
                h = h.avg_pool2d(2)?;
            }
        }
        h = self.mid.forward(&h, &emb)?;
        for (j, block) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = block.forward(&Tensor::cat(&[&h, &skip], 1)?, &emb)?;
            if j < last {
                let (hh, ww) = (h.dim(2)?, h.dim(3)?);
                h = h.upsample_nearest2d(hh * 2, ww * 2)?;
            }
        }
        Ok(self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?)
    }
}

impl VelocityField for VelocityModel {
    fn velocity(&self, z: &Tensor, t: &Tensor, cond: &BatchConditioning) -> Result<Tensor> {
        self.forward(z, t, cond)
    }

    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn resolution(&self) -> usize {
        self.config.resolution
    }

    fn dtype(&self) -> DType {
        self.dtype
    }
}
