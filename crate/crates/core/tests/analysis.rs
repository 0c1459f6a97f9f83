use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

use swapflow::analysis::{
    compare_inversion_modes, gaussian_batch, gaussian_reference, noise_pca, GAUSSIAN_LABEL, REPORT_FILE,
};
use swapflow::conditioning::{ConditioningMode, EncoderConfig, IdentityEncoder};
use swapflow::degradation::DegradationSpec;
use swapflow::evaluation::ConditionStyle;
use swapflow::flowcore::{TimeGrid, VelocityConfig, VelocityModel};
use swapflow::nn;
use swapflow::synthdata::{build_dataset, Dataset, DatasetConfig};

/// Sylvester Hadamard matrix of order `n` (a power of two).
fn hadamard(n: usize) -> Vec<Vec<f64>> {
    let mut h = vec![vec![1.0]];
    while h.len() < n {
        let m = h.len();
        let mut next = vec![vec![0.0; 2 * m]; 2 * m];
        for i in 0..m {
            for j in 0..m {
                next[i][j] = h[i][j];
                next[i][j + m] = h[i][j];
                next[i + m][j] = h[i][j];
                next[i + m][j + m] = -h[i][j];
            }
        }
        h = next;
    }
    h
}

#[test]
fn known_covariance_ratios_are_recovered() {
    let (n, c, side) = (16, 3, 4);
    let d = c * side * side;
    let h = hadamard(n);
    let scales = [3.0, 2.0, 1.5, 1.0, 0.5];
    // Columns 1..=5 of H are centred and mutually orthogonal, so the sample
    // covariance has eigenvalues proportional to scale^2 along axes 7k+1.
    let mut data = vec![0.0f32; n * d];
    for i in 0..n {
        for (k, s) in scales.iter().enumerate() {
            data[i * d + 7 * k + 1] += (s * h[i][k + 1]) as f32;
        }
        for j in 0..d {
            data[i * d + j] += 0.25; // constant offset, removed by centring
        }
    }
    let t = Tensor::from_vec(data, (n, c, side, side), &Device::Cpu).unwrap();
    let s = noise_pca(&t).unwrap();
    let total: f64 = scales.iter().map(|v| v * v).sum();
    for (k, v) in scales.iter().enumerate() {
        assert!((s.explained_variance_ratios[k] - v * v / total).abs() < 1e-6);
    }
    assert!(s.explained_variance_ratios[scales.len()..].iter().all(|&r| r == 0.0));
    assert!((s.structure_score - 1.0).abs() < 1e-6);
    assert_eq!(s.rank, 5);
    assert_eq!(s.explained_variance_ratios.len(), n);
}

#[test]
fn shared_pattern_dominates() {
    let (n, shape) = (24, [3, 8, 8]);
    let pattern = gaussian_batch(3, 0, 1, shape).unwrap();
    let noise = (gaussian_batch(3, 1, n, shape).unwrap() * 0.05).unwrap();
    let coeffs: Vec<f32> = (0..n).map(|i| (i as f32 - 11.5) / 4.0).collect();
    let a = Tensor::from_vec(coeffs, (n, 1, 1, 1), &Device::Cpu).unwrap();
    let batch = (a.broadcast_mul(&pattern).unwrap() + noise).unwrap();
    let s = noise_pca(&batch).unwrap();
    assert!(s.explained_variance_ratios[0] > 0.9, "{}", s.explained_variance_ratios[0]);
    // leading component reproduces the pattern up to affine scaling
    let img = s.leading_component_image.unwrap();
    let p = pattern.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let chw = img.to_tensor(&Device::Cpu).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let corr = pearson(&p, &chw);
    assert!(corr.abs() > 0.99, "{corr}");
}

fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - ma) * (y as f64 - mb)).sum();
    let va: f64 = a.iter().map(|&x| (x as f64 - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|&y| (y as f64 - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn gaussian_batches_are_unstructured_and_calibrated() {
    let (n, shape) = (32, [3, 16, 16]);
    let reference = gaussian_reference(n, shape, 40, 11).unwrap();
    let flat = 5.0 / (n - 1) as f64;
    // finite dimension inflates the leading eigenvalues slightly above the flat level
    assert!(reference.mean > flat && reference.mean < 1.4 * flat, "{reference:?}");
    assert_eq!(reference, gaussian_reference(n, shape, 40, 11).unwrap());

    let s = noise_pca(&gaussian_batch(99, 0, n, shape).unwrap()).unwrap();
    assert!(reference.within_two_sigma(s.structure_score));
    assert!(s.marginal_kurtosis.abs() < 0.2 && s.marginal_mean.abs() < 0.05);
    assert!((s.marginal_std - 1.0).abs() < 0.05);
    assert!(s.explained_variance_ratios[0] < 2.0 / (n - 1) as f64);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ratios_are_a_descending_subdistribution(seed in 0u64..500, n in 8usize..20, scale in 0.1f32..5.0) {
        let t = (gaussian_batch(seed, 0, n, [1, 4, 4]).unwrap() * scale as f64).unwrap();
        let s = noise_pca(&t).unwrap();
        let r = &s.explained_variance_ratios;
        prop_assert!(r.iter().all(|&v| v >= 0.0));
        prop_assert!(r.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(r.iter().sum::<f64>() <= 1.0 + 1e-6);
    }
}

#[test]
fn comparison_covers_all_modes_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(
        &DatasetConfig {
            identity_count: 4,
            images_per_identity: 3,
            resolution: 32,
            seed: 8,
            split: Default::default(),
        },
        &dir.path().join("data"),
    )
    .unwrap();
    let ds = Dataset::load(&dir.path().join("data")).unwrap();
    let ecfg = EncoderConfig {
        resolution: 32,
        embed_dim: 8,
        base_channels: 4,
        num_classes: 4,
    };
    let (_, vm) = IdentityEncoder::new_trainable(&ecfg, 1, &Device::Cpu).unwrap();
    let t: HashMap<String, Tensor> = nn::varmap_tensors(&vm).into_iter().collect();
    let enc = IdentityEncoder::from_tensors(&ecfg, &t, &Device::Cpu, DType::F32).unwrap();
    let vcfg = VelocityConfig {
        resolution: 32,
        embed_dim: 8,
        base_channels: 8,
        channel_mult: vec![1, 2],
        emb_width: 16,
    };
    let model = VelocityModel::new_trainable(&vcfg, 2, &Device::Cpu, DType::F32).unwrap().0;
    let style = ConditionStyle::teacher(DegradationSpec::downsample(8));
    let grid = TimeGrid::new(2).unwrap();

    let cmp = compare_inversion_modes(&model, &enc, &ds, style, &ConditioningMode::ALL, grid, 10, 4, 5).unwrap();
    assert_eq!(cmp.rows.len(), 5);
    for m in ConditioningMode::ALL {
        assert!(cmp.row(m.as_str()).is_some());
    }
    assert!(cmp.row(GAUSSIAN_LABEL).is_some());
    assert!(compare_inversion_modes(&model, &enc, &ds, style, &ConditioningMode::ALL, grid, 13, 4, 5).is_err());

    let again = compare_inversion_modes(&model, &enc, &ds, style, &ConditioningMode::ALL, grid, 10, 4, 5).unwrap();
    assert_eq!(cmp.to_toml().unwrap(), again.to_toml().unwrap());

    let out = dir.path().join("noise");
    cmp.write(&out).unwrap();
    assert!(out.join(REPORT_FILE).exists());
    assert!(out.join("pc1_attribute_only.png").exists());
    assert!(out.join("pc1_gaussian.png").exists());
}
