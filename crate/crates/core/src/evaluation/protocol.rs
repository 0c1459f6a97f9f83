//! End-to-end evaluation over sampled cross-identity pairs.

use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::metrics::{attribute_error, feature_fid, retrieval_ranks, topk_from_ranks, AttributeErrors, MIN_FID_SET};
use super::probes::AttributeProbe;
use super::swap::{masked_embeddings, swap_with_embeddings, SwapSettings};
use crate::conditioning::IdentityEncoder;
use crate::error::{Error, Result};
use crate::flowcore::VelocityField;
use crate::image::ImageTensor;
use crate::rng;
use crate::synthdata::{Dataset, RenderOutput};

/// Upper bound on the retrieval gallery size.
pub const MAX_RETRIEVAL_GROUP: usize = 100;
pub const REPORT_FILE: &str = "report.toml";
pub const GRID_FILE: &str = "grid.png";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_pairs: usize,
    pub seed: u64,
    pub swap: SwapSettings,
}

/// A sampled `(source, target)` pair plus the retrieval group it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub source_index: usize,
    pub target_index: usize,
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub source_index: usize,
    pub target_index: usize,
    pub source_identity: u32,
    pub target_identity: u32,
    pub retrieval_group: usize,
    pub id_similarity: f64,
    /// 0-based rank of the true source within its retrieval group.
    pub retrieval_rank: usize,
    pub pose_error: f64,
    pub expression_error: f64,
    pub gaze_error: f64,
    pub lighting_error: f64,
    pub skin_tone_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_pairs: usize,
    pub seed: u64,
    pub settings: String,
    pub id_similarity_mean: f64,
    pub retrieval_top1: f64,
    pub retrieval_top5: f64,
    /// Expected top-1 of a random ranking, percent.
    pub retrieval_chance_top1: f64,
    pub pose_error: f64,
    pub expression_error: f64,
    pub gaze_error: f64,
    pub lighting_error: f64,
    pub skin_tone_error: f64,
    pub mean_attribute_error: f64,
    /// Absent when fewer than [`MIN_FID_SET`] pairs were evaluated.
    pub feature_fid: Option<f64>,
    pub pairs: Vec<PairRecord>,
}

impl EvalReport {
    pub fn attribute_errors(&self) -> AttributeErrors {
        AttributeErrors {
            pose: self.pose_error,
            expression: self.expression_error,
            gaze: self.gaze_error,
            lighting: self.lighting_error,
            skin_tone: self.skin_tone_error,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Deterministic cross-identity pairs. Sources inside one retrieval group
/// have distinct identities, so "the true source" is well defined.
pub fn sample_eval_pairs(dataset: &Dataset, n_pairs: usize, seed: u64) -> Result<Vec<EvalPair>> {
    if n_pairs == 0 {
        return Err(Error::input("evaluation needs n_pairs >= 1"));
    }
    let groups = dataset.by_identity();
    let ids: Vec<u32> = groups.keys().copied().collect();
    if ids.len() < 2 {
        return Err(Error::input("evaluation needs at least two identities"));
    }
    let group_size = ids.len().min(MAX_RETRIEVAL_GROUP);
    let mut r = rng::stream(seed, "eval-pairs", 0);
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut group = 0;
    while pairs.len() < n_pairs {
        let mut order = ids.clone();
        order.shuffle(&mut r);
        for &sid in order.iter().take(group_size.min(n_pairs - pairs.len())) {
            let s_imgs = &groups[&sid];
            let sp = ids.binary_search(&sid).expect("identity listed");
            let mut j = r.random_range(0..ids.len() - 1);
            if j >= sp {
                j += 1;
            }
            let tid = ids[j];
            let t_imgs = &groups[&tid];
            pairs.push(EvalPair {
                source_index: s_imgs[r.random_range(0..s_imgs.len())],
                target_index: t_imgs[r.random_range(0..t_imgs.len())],
                group,
            });
        }
        group += 1;
    }
    Ok(pairs)
}

/// Everything produced by one protocol run.
pub struct EvalOutput {
    pub report: EvalReport,
    pub pairs: Vec<EvalPair>,
    pub swapped: Vec<ImageTensor>,
}

pub fn evaluate_protocol(
    model: &dyn VelocityField,
    encoder: &IdentityEncoder,
    probe: &AttributeProbe,
    dataset: &Dataset,
    config: &EvalConfig,
) -> Result<EvalOutput> {
    let pairs = sample_eval_pairs(dataset, config.n_pairs, config.seed)?;
    let sources: Vec<&RenderOutput> = pairs.iter().map(|p| &dataset.renders[p.source_index]).collect();
    let targets: Vec<&RenderOutput> = pairs.iter().map(|p| &dataset.renders[p.target_index]).collect();
    info!("evaluating {} pairs ({})", pairs.len(), settings_label(&config.swap));

    let src_ids = masked_embeddings(encoder, &sources)?;
    let swapped = swap_with_embeddings(model, encoder, &src_ids, &targets, &config.swap)?;
    let swapped_refs: Vec<&ImageTensor> = swapped.iter().collect();

    // Both sides use unmasked embeddings: the swapped image has no mask.
    let src_images: Vec<&ImageTensor> = sources.iter().map(|r| &r.image).collect();
    let emb_swapped = encoder.embed_batch(&swapped_refs)?;
    let emb_sources = encoder.embed_batch(&src_images)?;

    let n_groups = pairs.last().map_or(0, |p| p.group + 1);
    let mut ranks = vec![0usize; pairs.len()];
    let mut group_len = vec![0usize; n_groups];
    for p in &pairs {
        group_len[p.group] += 1;
    }
    for g in 0..n_groups {
        let members: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].group == g).collect();
        let q: Vec<_> = members.iter().map(|&i| emb_swapped[i].clone()).collect();
        let s: Vec<_> = members.iter().map(|&i| emb_sources[i].clone()).collect();
        for (&i, rank) in members.iter().zip(retrieval_ranks(&q, &s)?) {
            ranks[i] = rank;
        }
    }
    let chance_top1 = pairs.iter().map(|p| 100.0 / group_len[p.group] as f64).sum::<f64>() / pairs.len() as f64;
    let (top1, top5) = topk_from_ranks(&ranks);

    let estimates = probe.predict(&swapped_refs)?;
    let mut records = Vec::with_capacity(pairs.len());
    let mut errs = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let e = attribute_error(&estimates[i], &dataset.spec(p.target_index).attributes);
        errs.push(e);
        records.push(PairRecord {
            source_index: p.source_index,
            target_index: p.target_index,
            source_identity: dataset.identity_of(p.source_index),
            target_identity: dataset.identity_of(p.target_index),
            retrieval_group: p.group,
            id_similarity: emb_swapped[i].cosine(&emb_sources[i]),
            retrieval_rank: ranks[i],
            pose_error: e.pose,
            expression_error: e.expression,
            gaze_error: e.gaze,
            lighting_error: e.lighting,
            skin_tone_error: e.skin_tone,
        });
    }
    let mean = AttributeErrors::mean_of(&errs);

    let feature_fid = if pairs.len() >= MIN_FID_SET {
        let tgt_images: Vec<&ImageTensor> = targets.iter().map(|r| &r.image).collect();
        Some(feature_fid(&probe.features(&swapped_refs)?, &probe.features(&tgt_images)?)?)
    } else {
        warn!("feature distance skipped: {} pairs < {MIN_FID_SET}", pairs.len());
        None
    };

    let report = EvalReport {
        n_pairs: pairs.len(),
        seed: config.seed,
        settings: settings_label(&config.swap),
        id_similarity_mean: records.iter().map(|r| r.id_similarity).sum::<f64>() / records.len() as f64,
        retrieval_top1: top1,
        retrieval_top5: top5,
        retrieval_chance_top1: chance_top1,
        pose_error: mean.pose,
        expression_error: mean.expression,
        gaze_error: mean.gaze,
        lighting_error: mean.lighting,
        skin_tone_error: mean.skin_tone,
        mean_attribute_error: mean.normalized_mean(),
        feature_fid,
        pairs: records,
    };
    Ok(EvalOutput { report, pairs, swapped })
}

pub fn settings_label(s: &SwapSettings) -> String {
    serde_json::to_string(s).unwrap_or_default()
}

/// Rows of `[source | target | swapped]` panels separated by white gutters.
pub fn panel_grid(rows: &[[&ImageTensor; 3]]) -> Result<ImageTensor> {
    const GAP: usize = 2;
    let Some(first) = rows.first() else {
        return Err(Error::input("panel grid needs at least one row"));
    };
    let (h, w) = (first[0].height(), first[0].width());
    if rows.iter().flatten().any(|p| p.height() != h || p.width() != w || p.channels() != 3) {
        return Err(Error::input("panel grid images must share one 3-channel size"));
    }
    let gw = 3 * w + 2 * GAP;
    let gh = rows.len() * h + (rows.len() - 1) * GAP;
    let mut out = ImageTensor::filled(gh, gw, 3, 1.0);
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            let (oy, ox) = (ri * (h + GAP), ci * (w + GAP));
            for y in 0..h {
                for x in 0..w {
                    out.pixel_mut(oy + y, ox + x).copy_from_slice(img.pixel(y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Write `report.toml` and a panel grid of the first `grid_rows` pairs.
pub fn write_eval_output(out: &EvalOutput, dataset: &Dataset, dir: &Path, grid_rows: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.report.write(&dir.join(REPORT_FILE))?;
    let rows: Vec<[&ImageTensor; 3]> = out
        .pairs
        .iter()
        .zip(&out.swapped)
        .take(grid_rows)
        .map(|(p, s)| [&dataset.renders[p.source_index].image, &dataset.renders[p.target_index].image, s])
        .collect();
    if !rows.is_empty() {
        panel_grid(&rows)?.save_png(&dir.join(GRID_FILE))?;
    }
    Ok(())
}
