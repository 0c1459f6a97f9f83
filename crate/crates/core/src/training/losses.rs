//! Flow-matching, gated identity and perceptual losses, and the combined
//! objective evaluated on one prepared batch.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::conditioning::{BatchConditioning, IdentityEncoder};
use crate::error::{Error, Result};
use crate::flowcore::{flow_target, interpolate_batch, predict_x0_batch, VelocityField};

/// Mean squared error between `v_pred` and `eps - x0`.
pub fn flow_loss(v_pred: &Tensor, x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let target = flow_target(x0, eps)?;
    if v_pred.dims() != target.dims() {
        return Err(Error::input("flow_loss: shape mismatch"));
    }
    Ok((v_pred - target)?.sqr()?.mean_all()?)
}

/// Indices of samples inside the identity gate (`t <= gate`) that are also
/// marked active.
pub fn gated_indices(t: &[f64], active: &[bool], gate: f64) -> Vec<u32> {
    t.iter()
        .zip(active)
        .enumerate()
        .filter(|(_, (&ti, &a))| a && ti <= gate)
        .map(|(i, _)| i as u32)
        .collect()
}

/// Batch identity loss: `1 - cos(F(x0_hat_i), e_i)` for gated samples, zero
/// for the rest, averaged over the whole batch. A batch with no gated sample
/// yields an exact, parameter-independent zero.
pub fn id_loss_batch(
    encoder: &IdentityEncoder,
    x0_hat: &Tensor,
    source_embeddings: &Tensor,
    t: &[f64],
    active: &[bool],
    gate: f64,
) -> Result<Tensor> {
    let b = x0_hat.dim(0)?;
    let idx = gated_indices(t, active, gate);
    if idx.is_empty() {
        return Ok(Tensor::zeros((), x0_hat.dtype(), x0_hat.device())?);
    }
    let sel = Tensor::new(idx.as_slice(), x0_hat.device())?;
    let x = x0_hat.index_select(&sel, 0)?;
    let e = source_embeddings.index_select(&sel, 0)?.to_dtype(encoder.dtype())?;
    let f = encoder.embed_tensor(&x)?;
    let cos = (f * e)?.sum(1)?;
    let per = cos.affine(-1.0, 1.0)?;
    Ok((per.sum_all()? / b as f64)?.to_dtype(x0_hat.dtype())?)
}

/// Identity loss for one sample, as a plain number in `[0, 2]`.
pub fn id_loss(
    encoder: &IdentityEncoder,
    x0_hat: &Tensor,
    source_embedding: &Tensor,
    t: f64,
    gate: f64,
) -> Result<f64> {
    if t > gate {
        return Ok(0.0);
    }
    let x = if x0_hat.rank() == 3 { x0_hat.unsqueeze(0)? } else { x0_hat.clone() };
    let e = if source_embedding.rank() == 1 {
        source_embedding.unsqueeze(0)?
    } else {
        source_embedding.clone()
    };
    let l = id_loss_batch(encoder, &x, &e, &[t], &[true], gate)?;
    Ok(l.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean squared distance between encoder feature maps of selected samples,
/// averaged over the whole batch like the identity loss.
pub fn perceptual_loss(encoder: &IdentityEncoder, x0_hat: &Tensor, reference: &Tensor, selected: &[u32]) -> Result<Tensor> {
    let b = x0_hat.dim(0)?;
    if selected.is_empty() {
        return Ok(Tensor::zeros((), x0_hat.dtype(), x0_hat.device())?);
    }
    let sel = Tensor::new(selected, x0_hat.device())?;
    let fa = encoder.feature_map(&x0_hat.index_select(&sel, 0)?)?;
    let fb = encoder.feature_map(&reference.index_select(&sel, 0)?.detach())?;
    let per = (fa - fb)?.sqr()?.flatten_from(1)?.mean(1)?;
    Ok((per.sum_all()? / b as f64)?.to_dtype(x0_hat.dtype())?)
}

/// Everything one optimization step needs, drawn ahead of time.
#[derive(Debug, Clone)]
pub struct StepInputs {
    /// Clean images `(B, 3, H, W)`.
    pub x0: Tensor,
    pub eps: Tensor,
    pub t: Vec<f64>,
    /// Conditioning with dropout already applied.
    pub cond: BatchConditioning,
    /// Source identity embeddings `(B, d)` for the identity loss.
    pub id_targets: Tensor,
    /// Samples whose identity slot survived dropout.
    pub id_active: Vec<bool>,
    /// Samples eligible for the perceptual term.
    pub perceptual: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub use_id: bool,
    pub id_gate_fraction: f64,
    pub lambda_id: f64,
    pub use_perceptual: bool,
    pub lambda_perceptual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub flow_loss: f64,
    pub id_loss: f64,
    pub perceptual_loss: f64,
    pub total: f64,
    pub t_mean: f64,
    pub t_min: f64,
    pub t_max: f64,
    /// Share of the batch inside the identity gate.
    pub gated_fraction: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// The combined objective `flow + λ_id·id (+ λ_p·perceptual)` as a tensor,
/// with its decomposition.
pub fn combined_loss(
    model: &dyn VelocityField,
    encoder: Option<&IdentityEncoder>,
    inputs: &StepInputs,
    weights: &LossWeights,
) -> Result<(Tensor, LossReport)> {
    let dev = inputs.x0.device();
    let dtype = model.dtype();
    let x0 = inputs.x0.to_dtype(dtype)?;
    let eps = inputs.eps.to_dtype(dtype)?;
    let t = Tensor::from_vec(inputs.t.clone(), inputs.t.len(), dev)?.to_dtype(dtype)?;
    let z = interpolate_batch(&x0, &eps, &t)?;
    let v = model.velocity(&z, &t, &inputs.cond)?;
    let flow = flow_loss(&v, &x0, &eps)?;
    let needs_x0 = weights.use_id || weights.use_perceptual;
    let x0_hat = if needs_x0 { Some(predict_x0_batch(&z, &v, &t)?) } else { None };
    let zero = Tensor::zeros((), dtype, dev)?;
    let gated = gated_indices(&inputs.t, &inputs.id_active, weights.id_gate_fraction);
    let id = match (&x0_hat, weights.use_id) {
        (Some(x), true) => {
            let enc = encoder.ok_or_else(|| Error::config("identity loss needs an encoder"))?;
            id_loss_batch(enc, x, &inputs.id_targets, &inputs.t, &inputs.id_active, weights.id_gate_fraction)?
        }
        _ => zero.clone(),
    };
    let perc = match (&x0_hat, weights.use_perceptual) {
        (Some(x), true) => {
            let enc = encoder.ok_or_else(|| Error::config("perceptual loss needs an encoder"))?;
            let sel: Vec<u32> = (0..inputs.t.len())
                .filter(|&i| inputs.perceptual[i] && inputs.t[i] <= weights.id_gate_fraction)
                .map(|i| i as u32)
                .collect();
            perceptual_loss(enc, x, &x0, &sel)?
        }
        _ => zero.clone(),
    };
    let total = ((&flow + (&id * weights.lambda_id)?)? + (&perc * weights.lambda_perceptual)?)?;
    let (fl, il, pl, tl) = (scalar(&flow)?, scalar(&id)?, scalar(&perc)?, scalar(&total)?);
    let expect = fl + weights.lambda_id * il + weights.lambda_perceptual * pl;
    if !tl.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss: flow {fl}, id {il}, perceptual {pl}"
        )));
    }
    if (tl - expect).abs() > 1e-5 * (1.0 + expect.abs()) {
        return Err(Error::Numeric(format!("loss composition broken: {tl} vs {expect}")));
    }
    let n = inputs.t.len() as f64;
    let report = LossReport {
        flow_loss: fl,
        id_loss: il,
        perceptual_loss: pl,
        total: tl,
        t_mean: inputs.t.iter().sum::<f64>() / n,
        t_min: inputs.t.iter().copied().fold(f64::INFINITY, f64::min),
        t_max: inputs.t.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        gated_fraction: gated.len() as f64 / n,
    };
    Ok((total, report))
}

/// Uniform times, Gaussian noise and per-slot dropout for a batch.
pub struct BatchNoise {
    pub t: Vec<f64>,
    pub eps: Tensor,
    pub drop_id: Vec<bool>,
    pub drop_att: Vec<bool>,
}

pub fn draw_batch_noise(
    rng: &mut crate::rng::Rng,
    batch: usize,
    resolution: usize,
    dropout: f64,
    device: &Device,
) -> Result<BatchNoise> {
    use rand::Rng;
    let t: Vec<f64> = (0..batch).map(|_| rng.random_range(0.0..1.0)).collect();
    let drop_id: Vec<bool> = (0..batch).map(|_| rng.random_bool(dropout)).collect();
    let drop_att: Vec<bool> = (0..batch).map(|_| rng.random_bool(dropout)).collect();
    let eps = crate::rng::gaussian_tensor(rng, &[batch, 3, resolution, resolution], device, DType::F32)?;
    Ok(BatchNoise {
        t,
        eps,
        drop_id,
        drop_att,
    })
}

/// Apply slot dropout to a conditioning batch.
pub fn apply_dropout(cond: &BatchConditioning, drop_id: &[bool], drop_att: &[bool]) -> Result<BatchConditioning> {
    let b = drop_id.len();
    let dev = cond.id.device();
    let f = |v: &[bool]| v.iter().map(|&d| if d { 1.0f32 } else { 0.0 }).collect::<Vec<f32>>();
    let di = Tensor::from_vec(f(drop_id), (b, 1), dev)?.to_dtype(cond.id.dtype())?;
    let da = Tensor::from_vec(f(drop_att), (b, 1, 1, 1), dev)?.to_dtype(cond.att.dtype())?;
    cond.with_dropped(&di, &da)
}
