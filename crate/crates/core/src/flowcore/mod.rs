//! Rectified-flow mathematics and samplers.
//!
//! Convention: `t = 0` is data, `t = 1` is pure noise, and
//! `z_t = (1 - t) x0 + t eps`, so the flow velocity is `eps - x0`.

pub mod unet;

use candle_core::{DType, Tensor};

use crate::conditioning::{
    build_attribute_condition, make_bundle, BatchConditioning, ConditioningBundle, ConditioningMode,
    Overlays,
};
use crate::degradation::DegradationSpec;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::ensure_finite;
use crate::synthdata::RenderOutput;

pub use unet::{VelocityConfig, VelocityModel};

pub const DEFAULT_STEPS: usize = 28;

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::input(format!("t = {t} outside [0, 1]")))
    }
}

fn check_shapes(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::input(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Reshape a `(B,)` time tensor so it broadcasts over `like`.
fn broadcast_t(t: &Tensor, like: &Tensor) -> Result<Tensor> {
    let b = like.dim(0)?;
    let mut shape = vec![b];
    shape.extend(std::iter::repeat_n(1, like.rank() - 1));
    Ok(t.to_dtype(like.dtype())?.reshape(shape)?)
}

/// `(1 - t) x0 + t eps`.
pub fn interpolate(x0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    check_shapes(x0, eps, "interpolate")?;
    check_t(t)?;
    Ok(((x0 * (1.0 - t))? + (eps * t)?)?)
}

/// Per-sample interpolation with `t` of shape `(B,)`.
pub fn interpolate_batch(x0: &Tensor, eps: &Tensor, t: &Tensor) -> Result<Tensor> {
    check_shapes(x0, eps, "interpolate")?;
    let t = broadcast_t(t, x0)?;
    let one_minus = t.affine(-1.0, 1.0)?;
    Ok((x0.broadcast_mul(&one_minus)? + eps.broadcast_mul(&t)?)?)
}

/// Regression target `eps - x0`.
pub fn flow_target(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    check_shapes(x0, eps, "flow_target")?;
    Ok((eps - x0)?)
}

/// `z_t - t v`.
pub fn predict_x0(z_t: &Tensor, v: &Tensor, t: f64) -> Result<Tensor> {
    check_shapes(z_t, v, "predict_x0")?;
    check_t(t)?;
    Ok((z_t - (v * t)?)?)
}

pub fn predict_x0_batch(z_t: &Tensor, v: &Tensor, t: &Tensor) -> Result<Tensor> {
    check_shapes(z_t, v, "predict_x0")?;
    let t = broadcast_t(t, z_t)?;
    Ok((z_t - v.broadcast_mul(&t)?)?)
}

/// Uniform grid `t_k = k / steps`, `k = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeGrid {
    steps: usize,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("time grid needs at least one step"));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn t(&self, k: usize) -> f64 {
        k as f64 / self.steps as f64
    }

    pub fn values(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.t(k)).collect()
    }
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
        }
    }
}

/// A conditional velocity field `v(z_t, t, cond)` over `(B, 3, H, W)` tensors.
pub trait VelocityField {
    /// `t` has shape `(B,)`.
    fn velocity(&self, z: &Tensor, t: &Tensor, cond: &BatchConditioning) -> Result<Tensor>;
    fn embed_dim(&self) -> usize;
    fn resolution(&self) -> usize;
    fn dtype(&self) -> DType;
}

fn eval_velocity(
    model: &dyn VelocityField,
    z: &Tensor,
    t: f64,
    cond: &BatchConditioning,
) -> Result<Tensor> {
    let b = z.dim(0)?;
    let tt = Tensor::full(t, b, z.device())?.to_dtype(z.dtype())?;
    let v = model.velocity(z, &tt, cond)?;
    if v.dims() != z.dims() {
        return Err(Error::Numeric(format!(
            "velocity shape {:?} differs from latent shape {:?}",
            v.dims(),
            z.dims()
        )));
    }
    ensure_finite(&v, &format!("velocity at t = {t:.4}"))?;
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Clamped to `[0, 1]`.
    pub image: Tensor,
    pub raw: Tensor,
}

/// Euler integration from `t = 1` down to `t = 0`.
pub fn sample(
    model: &dyn VelocityField,
    eps_init: &Tensor,
    cond: &BatchConditioning,
    grid: TimeGrid,
) -> Result<SampleOutput> {
    let mut z = eps_init.to_dtype(model.dtype())?;
    for k in (1..=grid.steps()).rev() {
        let (t, t_prev) = (grid.t(k), grid.t(k - 1));
        let v = eval_velocity(model, &z, t, cond)?;
        z = (z - (v * (t - t_prev))?)?;
    }
    Ok(SampleOutput {
        image: z.clamp(0.0, 1.0)?,
        raw: z,
    })
}

/// Euler integration from `t = 0` up to `t = 1`; returns `z_1`.
pub fn invert(
    model: &dyn VelocityField,
    image: &Tensor,
    cond: &BatchConditioning,
    grid: TimeGrid,
) -> Result<Tensor> {
    let mut z = image.to_dtype(model.dtype())?;
    for k in 0..grid.steps() {
        let (t, t_next) = (grid.t(k), grid.t(k + 1));
        let v = eval_velocity(model, &z, t, cond)?;
        z = (z + (v * (t_next - t))?)?;
    }
    Ok(z)
}

/// Bundles to the model's batch layout.
pub fn batch_conditioning(
    model: &dyn VelocityField,
    bundles: &[ConditioningBundle],
    device: &candle_core::Device,
) -> Result<BatchConditioning> {
    BatchConditioning::from_bundles(
        bundles,
        model.embed_dim(),
        model.resolution(),
        device,
        model.dtype(),
    )
}

/// The attribute-only bundle built from a target's own render.
pub fn attribute_only_bundle(
    target_render: &RenderOutput,
    spec: DegradationSpec,
    overlays: Overlays,
) -> Result<ConditioningBundle> {
    let att = build_attribute_condition(target_render, spec, overlays)?;
    make_bundle(None, Some(att), ConditioningMode::AttributeOnly)
}

/// Invert a target image with only its attribute condition active. The
/// result is the noise initializer for swapping.
pub fn attribute_aware_invert(
    model: &dyn VelocityField,
    target_render: &RenderOutput,
    spec: DegradationSpec,
    grid: TimeGrid,
) -> Result<Tensor> {
    let device = candle_core::Device::Cpu;
    let bundle = attribute_only_bundle(target_render, spec, Overlays::default())?;
    let cond = batch_conditioning(model, &[bundle], &device)?;
    let x = ImageTensor::stack(&[&target_render.image], &device, model.dtype())?;
    invert(model, &x, &cond, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    struct Constant {
        c: Tensor,
    }

    impl VelocityField for Constant {
        fn velocity(&self, z: &Tensor, _t: &Tensor, _c: &BatchConditioning) -> Result<Tensor> {
            Ok(self.c.broadcast_as(z.shape())?.contiguous()?)
        }
        fn embed_dim(&self) -> usize {
            2
        }
        fn resolution(&self) -> usize {
            4
        }
        fn dtype(&self) -> DType {
            DType::F64
        }
    }

    /// `v(z) = A z` acting on the flattened image of each batch element.
    struct Linear {
        a: Tensor,
    }

    impl VelocityField for Linear {
        fn velocity(&self, z: &Tensor, _t: &Tensor, _c: &BatchConditioning) -> Result<Tensor> {
            let b = z.dim(0)?;
            let flat = z.reshape((b, ()))?;
            Ok(flat.matmul(&self.a.t()?)?.reshape(z.shape())?)
        }
        fn embed_dim(&self) -> usize {
            2
        }
        fn resolution(&self) -> usize {
            2
        }
        fn dtype(&self) -> DType {
            DType::F64
        }
    }

    fn null_cond(b: usize, res: usize) -> BatchConditioning {
        let bundle = make_bundle(None, None, ConditioningMode::None).unwrap();
        BatchConditioning::from_bundles(&vec![bundle; b], 2, res, &Device::Cpu, DType::F64).unwrap()
    }

    fn randn(seed: u64, shape: &[usize]) -> Tensor {
        use rand_distr::{Distribution, StandardNormal};
        let mut r = crate::rng::stream(seed, "flowcore-test", 0);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn interpolation_endpoints() {
        let x0 = randn(1, &[2, 3, 4, 4]);
        let eps = randn(2, &[2, 3, 4, 4]);
        assert_eq!(max_abs(&interpolate(&x0, &eps, 0.0).unwrap(), &x0), 0.0);
        assert_eq!(max_abs(&interpolate(&x0, &eps, 1.0).unwrap(), &eps), 0.0);
        let z = Tensor::zeros((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let o = Tensor::ones((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let mid = interpolate(&z, &o, 0.5).unwrap();
        assert_eq!(max_abs(&mid, &(o.clone() * 0.5).unwrap()), 0.0);
        assert!(interpolate(&x0, &z, 0.5).is_err());
        assert!(interpolate(&x0, &eps, 1.5).is_err());
    }

    #[test]
    fn flow_target_cases() {
        let x0 = randn(3, &[1, 3, 4, 4]);
        let eps = randn(4, &[1, 3, 4, 4]);
        assert_eq!(flow_target(&x0, &x0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let zero = x0.zeros_like().unwrap();
        assert_eq!(max_abs(&flow_target(&zero, &eps).unwrap(), &eps), 0.0);
        let a = 2.5;
        let lhs = flow_target(&(&x0 * a).unwrap(), &(&eps * a).unwrap()).unwrap();
        let rhs = (flow_target(&x0, &eps).unwrap() * a).unwrap();
        assert!(max_abs(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn x0_recovery_at_037() {
        let x0 = randn(5, &[2, 3, 8, 8]);
        let eps = randn(6, &[2, 3, 8, 8]);
        let t = 0.37;
        let z = interpolate(&x0, &eps, t).unwrap();
        let v = flow_target(&x0, &eps).unwrap();
        assert!(max_abs(&predict_x0(&z, &v, t).unwrap(), &x0) < 1e-14);
        assert_eq!(max_abs(&predict_x0(&z, &eps, 0.0).unwrap(), &z), 0.0);
    }

    proptest! {
        #[test]
        fn x0_recovery_property(seed in 0u64..10_000, t in 0.0f64..=1.0) {
            let x0 = randn(seed, &[2, 3, 4, 4]);
            let eps = randn(seed + 1, &[2, 3, 4, 4]);
            let z = interpolate(&x0, &eps, t).unwrap();
            let v = flow_target(&x0, &eps).unwrap();
            prop_assert!(max_abs(&predict_x0(&z, &v, t).unwrap(), &x0) < 1e-12);
            // batched variants agree with the scalar ones
            let tb = Tensor::new(&[t, t], &Device::Cpu).unwrap();
            prop_assert!(max_abs(&interpolate_batch(&x0, &eps, &tb).unwrap(), &z) < 1e-15);
            prop_assert!(max_abs(&predict_x0_batch(&z, &v, &tb).unwrap(), &x0) < 1e-12);
        }
    }

    #[test]
    fn grid_shape() {
        assert!(TimeGrid::new(0).is_err());
        let g = TimeGrid::default();
        let v = g.values();
        assert_eq!(v.len(), 29);
        assert_eq!((v[0], v[28]), (0.0, 1.0));
        assert!(v.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn constant_field_sample_and_invert() {
        let c = randn(7, &[1, 3, 4, 4]);
        let model = Constant { c: c.clone() };
        let eps = randn(8, &[2, 3, 4, 4]);
        let cond = null_cond(2, 4);
        for steps in [1, 7, 28] {
            let g = TimeGrid::new(steps).unwrap();
            let out = sample(&model, &eps, &cond, g).unwrap();
            let expect = eps.broadcast_sub(&c).unwrap();
            assert!(max_abs(&out.raw, &expect) < 1e-12);
            let back = invert(&model, &out.raw, &cond, g).unwrap();
            assert!(max_abs(&back, &eps) < 1e-12);
            let img = out.image.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn linear_field_inversion_matches_matrix_exponential() {
        // 2x2 image, 3 channels -> 12-dim state
        let n = 12;
        let mut r = crate::rng::stream(9, "linear-field", 0);
        use rand::Rng;
        let a_vals: Vec<f64> = (0..n * n).map(|_| r.random_range(-0.3..0.3)).collect();
        let a_mat = DMatrix::from_row_slice(n, n, &a_vals);
        let model = Linear {
            a: Tensor::from_vec(a_vals, (n, n), &Device::Cpu).unwrap(),
        };
        let x = randn(10, &[1, 3, 2, 2]);
        let cond = null_cond(1, 2);
        let expm = a_mat.exp();
        let x_vec = nalgebra::DVector::from_vec(x.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        let exact = &expm * &x_vec;
        let err = |steps: usize| {
            let z = invert(&model, &x, &cond, TimeGrid::new(steps).unwrap()).unwrap();
            let z = nalgebra::DVector::from_vec(z.flatten_all().unwrap().to_vec1::<f64>().unwrap());
            (z - &exact).norm()
        };
        let (e500, e1000) = (err(500), err(1000));
        // first order: halving the step halves the error
        assert!(e1000 < 0.6 * e500, "{e500} {e1000}");
        assert!(e1000 < 1e-2 * exact.norm(), "{e1000}");
        // sampling integrates the same flow backwards: exp(-A)
        let s = sample(&model, &x, &cond, TimeGrid::new(1000).unwrap()).unwrap();
        let s = nalgebra::DVector::from_vec(s.raw.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        let back = a_mat.scale(-1.0).exp() * &x_vec;
        assert!((s - back).norm() < 1e-2 * x_vec.norm());
    }

    #[test]
    fn single_step_sample() {
        let c = randn(11, &[1, 3, 4, 4]);
        let model = Constant { c: c.clone() };
        let eps = randn(12, &[1, 3, 4, 4]);
        let out = sample(&model, &eps, &null_cond(1, 4), TimeGrid::new(1).unwrap()).unwrap();
        assert!(max_abs(&out.raw, &(&eps - &c).unwrap()) < 1e-15);
    }
}
