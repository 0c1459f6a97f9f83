//! Identity similarity, retrieval, attribute-factor errors and the Fréchet
//! distance between Gaussian fits of feature sets.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::probes::AttributeEstimate;
use crate::conditioning::{IdentityEmbedding, IdentityEncoder};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::synthdata::AttributeFactors;

pub const MIN_FID_SET: usize = 64;

/// Cosine between the embeddings of two images.
pub fn identity_similarity(encoder: &IdentityEncoder, swapped: &ImageTensor, source: &ImageTensor) -> Result<f64> {
    let e = encoder.embed_batch(&[swapped, source])?;
    Ok(e[0].cosine(&e[1]))
}

/// 0-based rank of `source[i]` among all sources for query `swapped[i]`,
/// by descending cosine with ties going to the lower index.
pub fn retrieval_ranks(swapped: &[IdentityEmbedding], sources: &[IdentityEmbedding]) -> Result<Vec<usize>> {
    if swapped.len() != sources.len() {
        return Err(Error::input(format!(
            "retrieval sets differ in size: {} vs {}",
            swapped.len(),
            sources.len()
        )));
    }
    Ok(swapped
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let sims: Vec<f64> = sources.iter().map(|s| q.cosine(s)).collect();
            let own = sims[i];
            sims.iter()
                .enumerate()
                .filter(|&(j, &s)| s > own || (s == own && j < i))
                .count()
        })
        .collect())
}

/// `(top1, top5)` accuracy in percent.
pub fn id_retrieval(swapped: &[IdentityEmbedding], sources: &[IdentityEmbedding]) -> Result<(f64, f64)> {
    let ranks = retrieval_ranks(swapped, sources)?;
    Ok(topk_from_ranks(&ranks))
}

pub fn topk_from_ranks(ranks: &[usize]) -> (f64, f64) {
    if ranks.is_empty() {
        return (0.0, 0.0);
    }
    let n = ranks.len() as f64;
    let hits = |k: usize| 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / n;
    (hits(1), hits(5))
}

/// Image-level retrieval with the encoder.
pub fn id_retrieval_images(
    encoder: &IdentityEncoder,
    swapped: &[&ImageTensor],
    sources: &[&ImageTensor],
) -> Result<(f64, f64)> {
    if swapped.len() != sources.len() {
        return Err(Error::input("retrieval sets differ in size"));
    }
    id_retrieval(&encoder.embed_batch(swapped)?, &encoder.embed_batch(sources)?)
}

/// Absolute per-factor errors of a probe estimate against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct AttributeErrors {
    pub pose: f64,
    pub expression: f64,
    /// L2 over the 2-D gaze offset.
    pub gaze: f64,
    /// L2 over the lighting vector `strength * (cos, sin)`.
    pub lighting: f64,
    pub skin_tone: f64,
}

impl AttributeErrors {
    /// Errors divided by each factor's range span, then averaged.
    pub fn normalized_mean(&self) -> f64 {
        (self.pose / 1.2 + self.expression / 2.0 + self.gaze / 2.0 + self.lighting / 1.0 + self.skin_tone / 0.3) / 5.0
    }

    pub fn mean_of(all: &[AttributeErrors]) -> AttributeErrors {
        let n = all.len().max(1) as f64;
        let mut m = AttributeErrors::default();
        for e in all {
            m.pose += e.pose / n;
            m.expression += e.expression / n;
            m.gaze += e.gaze / n;
            m.lighting += e.lighting / n;
            m.skin_tone += e.skin_tone / n;
        }
        m
    }
}

pub fn attribute_error(estimate: &AttributeEstimate, truth: &AttributeFactors) -> AttributeErrors {
    let l = truth.lighting_vector();
    AttributeErrors {
        pose: (estimate.pose_angle - truth.pose_angle).abs(),
        expression: (estimate.expression - truth.expression).abs(),
        gaze: (estimate.gaze[0] - truth.gaze[0]).hypot(estimate.gaze[1] - truth.gaze[1]),
        lighting: (estimate.lighting[0] - l[0]).hypot(estimate.lighting[1] - l[1]),
        skin_tone: (estimate.skin_tone_shift - truth.skin_tone_shift).abs(),
    }
}

/// Mean and unbiased covariance of row features.
pub fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::input("a Gaussian fit needs at least two samples"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::input("feature rows differ in length"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    Ok((mean, cov))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Principal square root of a symmetric PSD matrix, eigenvalues clamped at 0.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-300);
    let clamped = eig.eigenvalues.iter().any(|&v| v < -1e-9 * scale);
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose();
    (root, clamped)
}

/// `tr sqrt(A^½ B A^½)`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> (f64, bool) {
    let (ra, c1) = sqrtm_psd(a);
    let inner = symmetrize(&(&ra * b * &ra));
    let eig = SymmetricEigen::new(inner);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |acc, &v| acc.max(v.abs())).max(1e-300);
    let c2 = eig.eigenvalues.iter().any(|&v| v < -1e-9 * scale);
    (eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).sum(), c1 || c2)
}

/// Fréchet distance between two Gaussians. The cross term is averaged over
/// both argument orders so the result is exactly symmetric.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    if mu1.len() != mu2.len() || s1.shape() != s2.shape() || s1.nrows() != mu1.len() {
        return Err(Error::input("Fréchet distance: dimension mismatch"));
    }
    let (c12, w1) = trace_sqrt_product(s1, s2);
    let (c21, w2) = trace_sqrt_product(s2, s1);
    if w1 || w2 {
        warn!("feature covariance is not positive semi-definite; negative eigenvalues clamped");
    }
    let diff = (mu1 - mu2).norm_squared();
    // each pair is summed on its own so swapping the arguments is bit-exact
    let d = diff + (s1.trace() + s2.trace()) - (c12 + c21);
    Ok(d.max(0.0))
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn feature_fid(generated: &[Vec<f64>], real: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = gaussian_fit(generated)?;
    let (m2, s2) = gaussian_fit(real)?;
    if generated.len() <= m1.len() || real.len() <= m2.len() {
        warn!(
            "feature covariance is rank deficient ({} / {} samples for {} dims)",
            generated.len(),
            real.len(),
            m1.len()
        );
    }
    frechet_distance(&m1, &s1, &m2, &s2)
}

/// Fréchet distance between probe features of two image sets of at least
/// [`MIN_FID_SET`] images each.
pub fn feature_fid_images(
    probe: &super::probes::AttributeProbe,
    generated: &[&ImageTensor],
    real: &[&ImageTensor],
) -> Result<f64> {
    if generated.len() < MIN_FID_SET || real.len() < MIN_FID_SET {
        return Err(Error::input(format!(
            "feature distance needs >= {MIN_FID_SET} images per set (got {} and {})",
            generated.len(),
            real.len()
        )));
    }
    feature_fid(&probe.features(generated)?, &probe.features(real)?)
}
