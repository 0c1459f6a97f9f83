//! Fixtures shared by the benchmarks.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use swapflow::conditioning::{make_bundle, AttributeCondition, ConditioningMode, IdentityEmbedding};
use swapflow::flowcore::{batch_conditioning, VelocityConfig, VelocityModel};
use swapflow::synthdata::{render, sample_attributes, sample_identity, FaceSpec, RenderOutput};
use swapflow::conditioning::BatchConditioning;

pub fn face(resolution: usize, index: u64) -> RenderOutput {
    let mut rng = swapflow::rng::stream(1, "bench-face", index);
    let spec = FaceSpec {
        identity: sample_identity(1, index as u32),
        attributes: sample_attributes(&mut rng),
    };
    render(&spec, resolution).expect("render")
}

/// An untrained velocity model of the reduced-benchmark width.
pub fn model(resolution: usize) -> VelocityModel {
    let cfg = VelocityConfig {
        resolution,
        embed_dim: 32,
        base_channels: 16,
        channel_mult: vec![1, 2, 2, 4],
        emb_width: 64,
    };
    VelocityModel::new_trainable(&cfg, 0, &Device::Cpu, DType::F32).expect("model").0
}

/// Full conditioning for `batch` faces.
pub fn conditioning(model: &VelocityModel, faces: &[RenderOutput]) -> BatchConditioning {
    let bundles: Vec<_> = faces
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut rng = swapflow::rng::stream(2, "bench-id", i as u64);
            let id = IdentityEmbedding::new((0..32).map(|_| rng.random::<f32>() - 0.5).collect()).expect("embedding");
            let att = AttributeCondition::new(f.image.clone()).expect("condition");
            make_bundle(Some(id), Some(att), ConditioningMode::Full).expect("bundle")
        })
        .collect();
    batch_conditioning(model, &bundles, &Device::Cpu).expect("batch conditioning")
}

pub fn gaussian(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = swapflow::rng::stream(seed, "bench-noise", 0);
    swapflow::rng::gaussian_tensor(&mut rng, shape, &Device::Cpu, DType::F32).expect("noise")
}

pub fn features(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = swapflow::rng::stream(seed, "bench-features", 0);
    (0..n).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect()
}
