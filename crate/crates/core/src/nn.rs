//! Small neural-network toolkit on top of candle: layers with deterministic
//! seeded initialization, an AdamW optimizer whose state can be checkpointed,
//! and a single-file checkpoint format carrying an architecture hash.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Init, VarBuilder, VarMap};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// 2-D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv {
    pub fn new(
        vb: VarBuilder,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let weight = vb.get_with_hints((cout, cin, kernel, kernel), "weight", Init::Const(0.0))?;
        let bias = vb.get_with_hints(cout, "bias", Init::Const(0.0))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// 3×3, stride 1, same padding.
    pub fn same(vb: VarBuilder, cin: usize, cout: usize) -> Result<Self> {
        Self::new(vb, cin, cout, 3, 1, 1)
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

/// Fully connected layer, `y = x Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    weight: Tensor,
    bias: Tensor,
}

impl Dense {
    pub fn new(vb: VarBuilder, din: usize, dout: usize) -> Result<Self> {
        let weight = vb.get_with_hints((dout, din), "weight", Init::Const(0.0))?;
        let bias = vb.get_with_hints(dout, "bias", Init::Const(0.0))?;
        Ok(Self { weight, bias })
    }
}

impl Module for Dense {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

pub fn group_norm(vb: VarBuilder, channels: usize) -> Result<candle_nn::GroupNorm> {
    let groups = [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1);
    let weight = vb.get_with_hints(channels, "weight", Init::Const(1.0))?;
    let bias = vb.get_with_hints(channels, "bias", Init::Const(0.0))?;
    Ok(candle_nn::GroupNorm::new(weight, bias, channels, groups, 1e-5)?)
}

/// Rows scaled to unit L2 norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let eps = Tensor::new(1e-12f64, x.device())?.to_dtype(x.dtype())?;
    Ok(x.broadcast_div(&norm.broadcast_maximum(&eps)?)?)
}

/// Seeded re-initialization of every `*.weight` that is not a norm scale and
/// not under a `zero` scope: uniform in ±1/√fan_in, drawn from a stream keyed
/// by the parameter name so the result does not depend on HashMap order.
pub fn init_params(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        if !name.ends_with(".weight") || name.contains("norm") || name.contains("zero") {
            continue;
        }
        let var = &data[name];
        let dims = var.dims().to_vec();
        if dims.len() < 2 {
            continue;
        }
        let numel: usize = dims.iter().product();
        let fan_in = numel / dims[0];
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut r = rng::stream(seed, name, 0);
        let vals: Vec<f64> = (0..numel).map(|_| r.random_range(-bound..bound)).collect();
        let t = Tensor::from_vec(vals, dims, var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

/// Parameters sorted by name.
pub fn sorted_vars(varmap: &VarMap) -> Vec<(String, Var)> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let mut v: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

pub fn param_count(varmap: &VarMap) -> usize {
    sorted_vars(varmap).iter().map(|(_, v)| v.elem_count()).sum()
}

/// Hash of the architecture description plus every parameter name and shape.
pub fn architecture_hash(kind: &str, config: &impl Serialize, varmap: &VarMap) -> Result<String> {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update(serde_json::to_vec(config)?);
    for (name, var) in sorted_vars(varmap) {
        h.update(name.as_bytes());
        h.update(format!("{:?}", var.dims()).as_bytes());
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Same as [`architecture_hash`] but for a plain name→tensor map.
pub fn architecture_hash_of_tensors(
    kind: &str,
    config: &impl Serialize,
    tensors: &HashMap<String, Tensor>,
) -> Result<String> {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update(serde_json::to_vec(config)?);
    let sorted: BTreeMap<_, _> = tensors.iter().filter(|(k, _)| !k.starts_with("adam.")).collect();
    for (name, t) in sorted {
        h.update(name.as_bytes());
        h.update(format!("{:?}", t.dims()).as_bytes());
    }
    Ok(format!("{:x}", h.finalize()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// Decoupled-weight-decay Adam with checkpointable moments.
pub struct AdamW {
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub config: AdamWConfig,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, config: AdamWConfig) -> Result<Self> {
        let m = params
            .iter()
            .map(|(_, p)| p.zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            params,
            m,
            v,
            step: 0,
            config,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.apply(&grads)
    }

    pub fn apply(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (_, var)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(var) else { continue };
            // Gradients carry their backward graph; without detaching, the
            // moment buffers would chain every step's graph together.
            let g = g.detach();
            let m = ((&self.m[i] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&self.v[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let decayed = (var.as_tensor() * (1.0 - c.lr * c.weight_decay))?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            var.set(&(decayed - (update * c.lr)?)?.detach())?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.params.len());
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.push((format!("adam.m.{name}"), self.m[i].clone()));
            out.push((format!("adam.v.{name}"), self.v[i].clone()));
        }
        out
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, step: u64) -> Result<()> {
        for (i, (name, p)) in self.params.iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut self.m[i]), ("adam.v.", &mut self.v[i])] {
                let t = tensors
                    .get(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {name}")))?;
                *slot = t.to_dtype(p.dtype())?.to_device(p.device())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Header stored in a checkpoint's metadata block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub arch_hash: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub extra: serde_json::Value,
}

const META_KEY: &str = "swapflow";

/// Write tensors plus header to a single safetensors file. The file is
/// written to a sibling temp path and renamed, so an interrupted save never
/// clobbers the previous checkpoint.
pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, tensors: &[(String, Tensor)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut sorted: Vec<(String, Tensor)> = tensors
        .iter()
        .map(|(n, t)| Ok((n.clone(), t.to_dtype(DType::F32)?.contiguous()?)))
        .collect::<Result<_>>()?;
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut info = HashMap::new();
    info.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(sorted.iter().map(|(n, t)| (n.as_str(), t)), Some(info), &tmp)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(CheckpointMeta, HashMap<String, Tensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing header", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_json)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    Ok((meta, tensors))
}

/// Copy checkpoint tensors into a freshly built varmap; names and shapes must
/// match one-to-one.
pub fn load_into_varmap(varmap: &VarMap, tensors: &HashMap<String, Tensor>) -> Result<()> {
    for (name, var) in sorted_vars(varmap) {
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {name}")))?;
        if t.dims() != var.dims() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}

/// Snapshot of all parameters, sorted by name.
pub fn varmap_tensors(varmap: &VarMap) -> Vec<(String, Tensor)> {
    sorted_vars(varmap)
        .into_iter()
        .map(|(n, v)| (n, v.as_tensor().clone()))
        .collect()
}

/// Fail loudly if a tensor holds NaN or ±inf.
pub fn ensure_finite(t: &Tensor, context: &str) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in {context}")))
    }
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> (VarMap, Conv, Dense) {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
        let conv = Conv::same(vb.pp("conv"), 3, 4).unwrap();
        let dense = Dense::new(vb.pp("dense"), 4, 2).unwrap();
        init_params(&vm, seed).unwrap();
        (vm, conv, dense)
    }

    #[test]
    fn init_is_seeded() {
        let (a, _, _) = tiny(3);
        let (b, _, _) = tiny(3);
        let (c, _, _) = tiny(4);
        let flat = |vm: &VarMap| {
            varmap_tensors(vm)
                .iter()
                .flat_map(|(_, t)| t.flatten_all().unwrap().to_vec1::<f32>().unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn adamw_reduces_quadratic_and_checkpoints_round_trip() {
        let (vm, _, dense) = tiny(1);
        let x = Tensor::ones((5, 4), DType::F32, &Device::Cpu).unwrap();
        let mut opt = AdamW::new(sorted_vars(&vm), AdamWConfig { lr: 1e-2, ..Default::default() }).unwrap();
        let loss = |d: &Dense| d.forward(&x).unwrap().sqr().unwrap().mean_all().unwrap();
        let first = loss(&dense).to_scalar::<f32>().unwrap();
        for _ in 0..50 {
            let l = loss(&dense);
            opt.backward_step(&l).unwrap();
        }
        assert!(loss(&dense).to_scalar::<f32>().unwrap() < first);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.safetensors");
        let meta = CheckpointMeta {
            kind: "tiny".into(),
            arch_hash: architecture_hash("tiny", &(), &vm).unwrap(),
            config: serde_json::json!({}),
            extra: serde_json::json!({"step": opt.step_count()}),
        };
        let mut tensors = varmap_tensors(&vm);
        tensors.extend(opt.state_tensors());
        save_checkpoint(&p, &meta, &tensors).unwrap();
        let (m2, t2) = load_checkpoint(&p, &Device::Cpu).unwrap();
        assert_eq!(m2, meta);
        let (vm2, _, _) = tiny(99);
        load_into_varmap(&vm2, &t2).unwrap();
        assert_eq!(
            architecture_hash_of_tensors("tiny", &(), &t2).unwrap(),
            meta.arch_hash
        );
        for ((_, a), (_, b)) in varmap_tensors(&vm).iter().zip(varmap_tensors(&vm2).iter()) {
            assert_eq!(a.to_vec1::<f32>().ok(), b.to_vec1::<f32>().ok());
            assert_eq!(
                a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
        let mut opt2 = AdamW::new(sorted_vars(&vm2), opt.config).unwrap();
        opt2.load_state(&t2, 50).unwrap();
        assert_eq!(opt2.step_count(), 50);
    }
}
