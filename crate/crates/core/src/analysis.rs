//! PCA diagnostics of inverted noise under each conditioning configuration.
//!
//! `structure_score` (share of variance in the top five principal
//! components) is an instrument defined by this crate: a scalar stand-in for
//! "the noise shows facial structure".

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditioningMode, IdentityEncoder};
use crate::error::{Error, Result};
use crate::evaluation::swap::{initial_noise, masked_embeddings, ConditionStyle, InversionMode, SwapSettings, SWAP_CHUNK};
use crate::flowcore::{TimeGrid, VelocityField};
use crate::image::ImageTensor;
use crate::rng;
use crate::synthdata::{Dataset, RenderOutput};

pub const MIN_BATCH: usize = 8;
pub const STRUCTURE_COMPONENTS: usize = 5;
pub const REPORT_FILE: &str = "noise_report.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    /// Descending; one entry per sample, zero-padded past the batch rank.
    pub explained_variance_ratios: Vec<f64>,
    /// Leading principal direction, min-max scaled into [0,1] for viewing.
    #[serde(skip)]
    pub leading_component_image: Option<ImageTensor>,
    pub structure_score: f64,
    /// Excess kurtosis of all values pooled (0 for a Gaussian).
    pub marginal_kurtosis: f64,
    pub marginal_mean: f64,
    pub marginal_std: f64,
    pub rank: usize,
}

/// Flattened rows of an `(N, C, H, W)` tensor as f64.
fn rows_of(noise: &Tensor) -> Result<(Vec<Vec<f64>>, [usize; 3])> {
    let dims = noise.dims();
    if dims.len() != 4 {
        return Err(Error::input(format!("noise batch must be (N,C,H,W), got {dims:?}")));
    }
    let shape = [dims[1], dims[2], dims[3]];
    let rows = noise.to_dtype(DType::F64)?.flatten_from(1)?.to_vec2::<f64>()?;
    Ok((rows, shape))
}

pub fn noise_pca(noise: &Tensor) -> Result<NoiseStats> {
    let (rows, [c, h, w]) = rows_of(noise)?;
    let n = rows.len();
    if n < MIN_BATCH {
        return Err(Error::input(format!("noise PCA needs a batch of at least {MIN_BATCH}, got {n}")));
    }
    let d = c * h * w;
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);

    let all = x.as_slice();
    let total = all.len() as f64;
    let mean = all.iter().sum::<f64>() / total;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / total;
    let m4 = all.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / total;
    let kurtosis = if var > 0.0 { m4 / (var * var) - 3.0 } else { 0.0 };

    let col_mean = x.row_mean();
    let xc = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - col_mean[j]);
    // n << d, so decompose the n x n Gram matrix instead of the covariance.
    let gram = &xc * xc.transpose();
    let eig = SymmetricEigen::new((&gram + gram.transpose()) * 0.5);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambdas: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let trace = gram.trace();
    let tol = 1e-10 * trace.max(f64::MIN_POSITIVE);
    let rank = lambdas.iter().filter(|&&l| l > tol).count();
    if rank < n - 1 {
        warn!("noise batch is rank deficient: rank {rank} < {}", n - 1);
    }
    let ratios: Vec<f64> = if trace > 0.0 {
        lambdas.iter().map(|&l| if l > tol { l / trace } else { 0.0 }).collect()
    } else {
        vec![0.0; n]
    };

    let leading = if rank > 0 {
        let u = eig.eigenvectors.column(order[0]);
        let mut v = xc.transpose() * u;
        // fix the sign: the largest-magnitude entry is positive
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
        let (lo, hi) = (v.min(), v.max());
        let span = (hi - lo).max(f64::MIN_POSITIVE);
        let mut img = ImageTensor::zeros(h, w, c);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    img.set(y, xx, ch, ((v[(ch * h + y) * w + xx] - lo) / span) as f32);
                }
            }
        }
        Some(img)
    } else {
        Some(ImageTensor::filled(h, w, c, 0.5))
    };

    Ok(NoiseStats {
        structure_score: ratios.iter().take(STRUCTURE_COMPONENTS).sum(),
        explained_variance_ratios: ratios,
        leading_component_image: leading,
        marginal_kurtosis: kurtosis,
        marginal_mean: mean,
        marginal_std: var.sqrt(),
        rank,
    })
}

/// Monte Carlo distribution of `structure_score` over fresh Gaussian batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianReference {
    pub trials: usize,
    pub mean: f64,
    pub std: f64,
}

impl GaussianReference {
    pub fn within_two_sigma(&self, score: f64) -> bool {
        (score - self.mean).abs() <= 2.0 * self.std
    }
}

pub fn gaussian_batch(seed: u64, index: u64, n: usize, shape: [usize; 3]) -> Result<Tensor> {
    let mut r = rng::stream(seed, "gaussian-noise-batch", index);
    rng::gaussian_tensor(&mut r, &[n, shape[0], shape[1], shape[2]], &Device::Cpu, DType::F32)
}

pub fn gaussian_reference(n: usize, shape: [usize; 3], trials: usize, seed: u64) -> Result<GaussianReference> {
    if trials < 2 {
        return Err(Error::input("a Gaussian reference needs at least two trials"));
    }
    let scores: Vec<f64> = (0..trials)
        .map(|k| Ok(noise_pca(&gaussian_batch(seed, k as u64 + 1, n, shape)?)?.structure_score))
        .collect::<Result<_>>()?;
    let mean = scores.iter().sum::<f64>() / trials as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    Ok(GaussianReference {
        trials,
        mean,
        std: var.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    /// A conditioning mode name or `gaussian`.
    pub label: String,
    pub stats: NoiseStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseComparison {
    pub n: usize,
    pub steps: usize,
    pub seed: u64,
    pub note: String,
    pub target_indices: Vec<usize>,
    pub gaussian_reference: GaussianReference,
    pub baseline_within_two_sigma: bool,
    pub rows: Vec<NoiseRow>,
}

impl NoiseComparison {
    pub fn row(&self, label: &str) -> Option<&NoiseStats> {
        self.rows.iter().find(|r| r.label == label).map(|r| &r.stats)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Report plus one `pc1_<label>.png` per row.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(REPORT_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        for row in &self.rows {
            if let Some(img) = &row.stats.leading_component_image {
                img.save_png(&dir.join(format!("pc1_{}.png", row.label)))?;
            }
        }
        Ok(())
    }
}

pub const GAUSSIAN_LABEL: &str = "gaussian";

/// `n` distinct target indices drawn deterministically from `seed`.
pub fn pick_targets(dataset: &Dataset, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > dataset.len() {
        return Err(Error::input(format!("asked for {n} targets from {} images", dataset.len())));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng::stream(seed, "noise-targets", 0));
    idx.truncate(n);
    Ok(idx)
}

/// Invert `targets` under one conditioning configuration.
pub fn invert_targets(
    model: &dyn VelocityField,
    encoder: &IdentityEncoder,
    targets: &[&RenderOutput],
    condition: ConditionStyle,
    mode: ConditioningMode,
    grid: TimeGrid,
) -> Result<Tensor> {
    let settings = SwapSettings {
        condition,
        inversion: InversionMode::Invert(mode),
        steps: grid.steps(),
        seed: 0,
    };
    let mut chunks = Vec::new();
    for (k, chunk) in targets.chunks(SWAP_CHUNK).enumerate() {
        let atts = chunk.iter().map(|t| condition.condition(t)).collect::<Result<Vec<_>>>()?;
        let ids = if mode.uses_identity() {
            Some(masked_embeddings(encoder, chunk)?)
        } else {
            None
        };
        chunks.push(initial_noise(model, chunk, ids.as_deref(), &atts, &settings, k as u64)?);
    }
    Ok(Tensor::cat(&chunks, 0)?)
}

/// Noise statistics for each requested configuration plus a fresh Gaussian
/// batch, calibrated against `mc_trials` Gaussian batches.
#[allow(clippy::too_many_arguments)]
pub fn compare_inversion_modes(
    model: &dyn VelocityField,
    encoder: &IdentityEncoder,
    dataset: &Dataset,
    condition: ConditionStyle,
    modes: &[ConditioningMode],
    grid: TimeGrid,
    n: usize,
    seed: u64,
    mc_trials: usize,
) -> Result<NoiseComparison> {
    let target_indices = pick_targets(dataset, n, seed)?;
    let targets: Vec<&RenderOutput> = target_indices.iter().map(|&i| &dataset.renders[i]).collect();
    let mut rows = Vec::with_capacity(modes.len() + 1);
    for &mode in modes {
        let z = invert_targets(model, encoder, &targets, condition, mode, grid)?;
        rows.push(NoiseRow {
            label: mode.as_str().to_string(),
            stats: noise_pca(&z)?,
        });
    }
    let res = model.resolution();
    let shape = [3, res, res];
    let baseline = noise_pca(&gaussian_batch(seed, 0, n, shape)?)?;
    let reference = gaussian_reference(n, shape, mc_trials, seed)?;
    let within = reference.within_two_sigma(baseline.structure_score);
    rows.push(NoiseRow {
        label: GAUSSIAN_LABEL.into(),
        stats: baseline,
    });
    Ok(NoiseComparison {
        n,
        steps: grid.steps(),
        seed,
        note: format!(
            "structure_score is the explained-variance share of the top {STRUCTURE_COMPONENTS} principal components; \
             it is an instrument defined by this tool, not a standard metric"
        ),
        target_indices,
        gaussian_reference: reference,
        baseline_within_two_sigma: within,
        rows,
    })
}
