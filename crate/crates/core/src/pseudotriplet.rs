//! Pseudo-triplets `(source A, teacher swap of target A with identity B,
//! original target A)` and their on-disk store.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditioningMode, IdentityEncoder, Overlays};
use crate::degradation::DegradationSpec;
use crate::error::{Error, Result};
use crate::evaluation::swap::{
    masked_embeddings, swap_with_embeddings, ConditionStyle, InversionMode, SwapSettings,
};
use crate::flowcore::VelocityField;
use crate::image::{load_mask_png, save_mask_png, ImageTensor, Mask};
use crate::rng;
use crate::synthdata::dataset::{create_dir, read_json, read_lines, write_json, write_lines};
use crate::synthdata::{render, sample_occluder, Dataset, FaceSpec, RenderOutput};

pub const STORE_META_FILE: &str = "store.json";
pub const STORE_MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTriplet {
    pub source_image: ImageTensor,
    pub swapped_image: ImageTensor,
    pub target_image: ImageTensor,
    pub source_spec: FaceSpec,
    pub target_spec: FaceSpec,
    pub donor_identity_id: u32,
    pub occlusion_mask: Option<Mask>,
}

impl PseudoTriplet {
    pub fn validate(&self) -> Result<()> {
        let a = self.source_spec.identity.identity_id;
        if self.target_spec.identity != self.source_spec.identity {
            return Err(Error::input("triplet source and target identities differ"));
        }
        if self.donor_identity_id == a {
            return Err(Error::input("triplet donor identity equals the source identity"));
        }
        if !self.source_image.same_shape(&self.swapped_image) || !self.source_image.same_shape(&self.target_image) {
            return Err(Error::input("triplet images differ in shape"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub degradation: DegradationSpec,
    pub overlays: Overlays,
    pub inversion_mode: ConditioningMode,
    pub steps: usize,
    pub seed: u64,
    /// Donor draws per triplet before it is given up.
    pub max_attempts: usize,
    /// Set-level share of triplets that must pass the donor-dominance check.
    pub min_pass_rate: f64,
    /// Reject and resample triplets failing the donor-dominance check.
    pub quality_gate: bool,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            degradation: DegradationSpec::downsample(8),
            overlays: Overlays::default(),
            inversion_mode: ConditioningMode::AttributeOnly,
            steps: crate::flowcore::DEFAULT_STEPS,
            seed: 0,
            max_attempts: 3,
            min_pass_rate: 0.7,
            quality_gate: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreStatus {
    Complete,
    /// Fewer triplets than requested survived the quality gate.
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub teacher_hash: String,
    pub config: TripletConfig,
    pub requested: usize,
    pub status: StoreStatus,
    pub first_attempt_pass_rate: f64,
    pub rejected_attempts: usize,
    pub occlusion_fraction: f64,
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub index: usize,
    pub dir: String,
    pub source_index: usize,
    pub target_index: usize,
    pub donor_index: usize,
    pub source_spec: FaceSpec,
    pub target_spec: FaceSpec,
    pub donor_identity_id: u32,
    pub donor_cosine: f64,
    pub source_cosine: f64,
    pub attempts: usize,
    pub has_occlusion: bool,
}

#[derive(Debug, Clone)]
pub struct TripletStore {
    pub root: PathBuf,
    pub meta: StoreMeta,
    pub records: Vec<TripletRecord>,
    pub triplets: Vec<PseudoTriplet>,
}

impl TripletStore {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    fn write_record(root: &Path, rec: &TripletRecord, t: &PseudoTriplet) -> Result<()> {
        let dir = root.join(&rec.dir);
        create_dir(&dir)?;
        t.source_image.save_png(&dir.join("source.png"))?;
        t.swapped_image.save_png(&dir.join("swapped.png"))?;
        t.target_image.save_png(&dir.join("target.png"))?;
        if let Some(m) = &t.occlusion_mask {
            save_mask_png(&dir.join("occlusion.png"), [None, None, Some(m)])?;
        }
        Ok(())
    }

    /// Write every record and then the manifest.
    pub fn write(&self) -> Result<()> {
        create_dir(&self.root.join("triplets"))?;
        for (rec, t) in self.records.iter().zip(&self.triplets) {
            Self::write_record(&self.root, rec, t)?;
        }
        write_lines(&self.root.join(STORE_MANIFEST_FILE), &self.records)?;
        write_json(&self.root.join(STORE_META_FILE), &self.meta)
    }

    /// Load a store; with `expected_teacher_hash`, refuse stores generated by
    /// another teacher checkpoint.
    pub fn load(root: &Path, expected_teacher_hash: Option<&str>) -> Result<Self> {
        let meta: StoreMeta = read_json(&root.join(STORE_META_FILE))?;
        if let Some(h) = expected_teacher_hash {
            if h != meta.teacher_hash {
                return Err(Error::Checkpoint(format!(
                    "{} was generated by teacher {}, not {h}",
                    root.display(),
                    meta.teacher_hash
                )));
            }
        }
        let records: Vec<TripletRecord> = read_lines(&root.join(STORE_MANIFEST_FILE))?;
        let mut triplets = Vec::with_capacity(records.len());
        for rec in &records {
            let dir = root.join(&rec.dir);
            let occlusion_mask = if rec.has_occlusion {
                let [_, _, m] = load_mask_png(&dir.join("occlusion.png"))?;
                Some(m)
            } else {
                None
            };
            let t = PseudoTriplet {
                source_image: ImageTensor::load_png(&dir.join("source.png"))?,
                swapped_image: ImageTensor::load_png(&dir.join("swapped.png"))?,
                target_image: ImageTensor::load_png(&dir.join("target.png"))?,
                source_spec: rec.source_spec.clone(),
                target_spec: rec.target_spec.clone(),
                donor_identity_id: rec.donor_identity_id,
                occlusion_mask,
            };
            t.validate()?;
            triplets.push(t);
        }
        Ok(Self {
            root: root.to_path_buf(),
            meta,
            records,
            triplets,
        })
    }
}

struct Plan {
    identity: u32,
    source: usize,
    target: usize,
}

fn plan_triplet(dataset: &Dataset, ids: &[u32], groups: &BTreeMap<u32, Vec<usize>>, seed: u64, i: usize) -> Plan {
    let mut r = rng::stream(seed, "triplet-plan", i as u64);
    let identity = ids[r.random_range(0..ids.len())];
    let members = &groups[&identity];
    let target = members[r.random_range(0..members.len())];
    let mut source = members[r.random_range(0..members.len() - 1)];
    if source >= target {
        // skip over the target so source != target
        let pos = members.iter().position(|&m| m == source).unwrap();
        source = members[pos + 1];
    }
    debug_assert_eq!(dataset.identity_of(source), dataset.identity_of(target));
    Plan {
        identity,
        source,
        target,
    }
}

fn draw_donor(ids: &[u32], groups: &BTreeMap<u32, Vec<usize>>, exclude: u32, seed: u64, i: usize, attempt: usize) -> usize {
    let mut r = rng::stream(seed, "triplet-donor", (i * 64 + attempt) as u64);
    let others: Vec<u32> = ids.iter().copied().filter(|&k| k != exclude).collect();
    let b = others[r.random_range(0..others.len())];
    let members = &groups[&b];
    members[r.random_range(0..members.len())]
}

/// Swap `targets` to the identities of `donors` with the teacher and assemble
/// triplets. Fails when a donor shares the source identity.
#[allow(clippy::too_many_arguments)]
pub fn build_triplets(
    teacher: &dyn VelocityField,
    encoder: &IdentityEncoder,
    sources: &[(&FaceSpec, &RenderOutput)],
    targets: &[(&FaceSpec, &RenderOutput)],
    donors: &[(&FaceSpec, &RenderOutput)],
    spec: DegradationSpec,
    overlays: Overlays,
    inversion_mode: ConditioningMode,
    steps: usize,
) -> Result<Vec<PseudoTriplet>> {
    if sources.len() != targets.len() || sources.len() != donors.len() {
        return Err(Error::input("build_triplets: argument lengths differ"));
    }
    for ((s, t), d) in sources.iter().zip(targets).zip(donors) {
        if s.0.identity.identity_id != t.0.identity.identity_id {
            return Err(Error::input("source and target must share an identity"));
        }
        if d.0.identity.identity_id == s.0.identity.identity_id {
            return Err(Error::input("donor must differ from the source identity"));
        }
    }
    let settings = SwapSettings {
        condition: ConditionStyle::Degraded {
            degradation: spec,
            overlays,
        },
        inversion: InversionMode::Invert(inversion_mode),
        steps,
        seed: 0,
    };
    let donor_renders: Vec<&RenderOutput> = donors.iter().map(|d| d.1).collect();
    let donor_ids = masked_embeddings(encoder, &donor_renders)?;
    let target_renders: Vec<&RenderOutput> = targets.iter().map(|t| t.1).collect();
    let swapped = swap_with_embeddings(teacher, encoder, &donor_ids, &target_renders, &settings)?;
    Ok(swapped
        .into_iter()
        .enumerate()
        .map(|(i, sw)| PseudoTriplet {
            source_image: sources[i].1.image.clone(),
            swapped_image: sw.quantized(),
            target_image: targets[i].1.image.clone(),
            source_spec: sources[i].0.clone(),
            target_spec: targets[i].0.clone(),
            donor_identity_id: donors[i].0.identity.identity_id,
            occlusion_mask: None,
        })
        .collect())
}

/// Single-triplet form of [`build_triplets`].
#[allow(clippy::too_many_arguments)]
pub fn build_triplet(
    teacher: &dyn VelocityField,
    encoder: &IdentityEncoder,
    src: (&FaceSpec, &RenderOutput),
    tgt: (&FaceSpec, &RenderOutput),
    donor: (&FaceSpec, &RenderOutput),
    spec: DegradationSpec,
    inversion_mode: ConditioningMode,
    steps: usize,
) -> Result<PseudoTriplet> {
    Ok(build_triplets(
        teacher,
        encoder,
        &[src],
        &[tgt],
        &[donor],
        spec,
        Overlays::default(),
        inversion_mode,
        steps,
    )?
    .remove(0))
}

/// Unmasked cosine of the swapped image to the donor and to the source.
fn gate_cosines(encoder: &IdentityEncoder, swapped: &ImageTensor, donor: &ImageTensor, source: &ImageTensor) -> Result<(f64, f64)> {
    let e = encoder.embed_batch(&[swapped, donor, source])?;
    Ok((e[0].cosine(&e[1]), e[0].cosine(&e[2])))
}

/// Build and persist `n` triplets. Triplets whose swap is closer to the
/// source identity than to the donor are retried with fresh donors.
pub fn build_triplet_set(
    teacher: &dyn VelocityField,
    teacher_hash: &str,
    encoder: &IdentityEncoder,
    dataset: &Dataset,
    n: usize,
    config: &TripletConfig,
    out_dir: &Path,
) -> Result<TripletStore> {
    let groups = dataset.by_identity();
    let ids: Vec<u32> = groups.keys().copied().collect();
    if n > 0 && ids.len() < 2 {
        return Err(Error::input("triplets need at least two identities"));
    }
    if n > 0 && groups.values().any(|g| g.len() < 2) {
        return Err(Error::input("triplets need at least two images per identity"));
    }
    let face = |i: usize| (dataset.spec(i), &dataset.renders[i]);
    let plans: Vec<Plan> = (0..n).map(|i| plan_triplet(dataset, &ids, &groups, config.seed, i)).collect();
    let mut accepted: Vec<Option<(PseudoTriplet, usize, f64, f64, usize)>> = vec![None; n];
    let mut pending: Vec<usize> = (0..n).collect();
    let mut rejected = 0usize;
    let mut first_pass = 0usize;
    for attempt in 0..config.max_attempts.max(1) {
        if pending.is_empty() {
            break;
        }
        let donors: Vec<usize> = pending
            .iter()
            .map(|&i| draw_donor(&ids, &groups, plans[i].identity, config.seed, i, attempt))
            .collect();
        let built = build_triplets(
            teacher,
            encoder,
            &pending.iter().map(|&i| face(plans[i].source)).collect::<Vec<_>>(),
            &pending.iter().map(|&i| face(plans[i].target)).collect::<Vec<_>>(),
            &donors.iter().map(|&d| face(d)).collect::<Vec<_>>(),
            config.degradation,
            config.overlays,
            config.inversion_mode,
            config.steps,
        )?;
        let mut still = Vec::new();
        for ((&i, &d), t) in pending.iter().zip(&donors).zip(built) {
            let (dc, sc) = gate_cosines(encoder, &t.swapped_image, &dataset.renders[d].image, &t.source_image)?;
            let pass = dc > sc;
            if attempt == 0 && pass {
                first_pass += 1;
            }
            if pass || !config.quality_gate {
                accepted[i] = Some((t, d, dc, sc, attempt + 1));
            } else {
                rejected += 1;
                still.push(i);
            }
        }
        pending = still;
    }
    let rate = if n == 0 { 1.0 } else { first_pass as f64 / n as f64 };
    info!("triplets: first-attempt pass rate {:.1}%, {rejected} rejected attempts", 100.0 * rate);
    if rate < config.min_pass_rate {
        warn!(
            "triplet pass rate {:.1}% is below the {:.0}% quality target",
            100.0 * rate,
            100.0 * config.min_pass_rate
        );
    }
    let mut records = Vec::new();
    let mut triplets = Vec::new();
    for (i, slot) in accepted.into_iter().enumerate() {
        let Some((t, donor, dc, sc, attempts)) = slot else { continue };
        let index = records.len();
        records.push(TripletRecord {
            index,
            dir: format!("triplets/{index:06}"),
            source_index: plans[i].source,
            target_index: plans[i].target,
            donor_index: donor,
            source_spec: t.source_spec.clone(),
            target_spec: t.target_spec.clone(),
            donor_identity_id: t.donor_identity_id,
            donor_cosine: dc,
            source_cosine: sc,
            attempts,
            has_occlusion: false,
        });
        triplets.push(t);
    }
    let status = if triplets.len() == n {
        StoreStatus::Complete
    } else {
        warn!("only {} of {n} triplets passed the quality gate", triplets.len());
        StoreStatus::Partial
    };
    let store = TripletStore {
        root: out_dir.to_path_buf(),
        meta: StoreMeta {
            teacher_hash: teacher_hash.to_string(),
            config: config.clone(),
            requested: n,
            status,
            first_attempt_pass_rate: rate,
            rejected_attempts: rejected,
            occlusion_fraction: 0.0,
            resolution: dataset.resolution(),
        },
        records,
        triplets,
    };
    store.write()?;
    Ok(store)
}

/// Copy of `store` at `out_dir` where exactly `round(fraction * n)` records
/// carry one occluder composited identically onto the swapped and target
/// images.
pub fn augment_with_occlusion(store: &TripletStore, fraction: f64, seed: u64, out_dir: &Path) -> Result<TripletStore> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!("occlusion fraction {fraction} outside [0, 1]")));
    }
    if out_dir == store.root {
        return Err(Error::input("augment_with_occlusion must write a new store"));
    }
    let n = store.len();
    let k = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "occlusion-subset", 0));
    let mut chosen = vec![false; n];
    order[..k].iter().for_each(|&i| chosen[i] = true);
    let mut out = store.clone();
    out.root = out_dir.to_path_buf();
    out.meta.occlusion_fraction = fraction;
    for i in 0..n {
        if !chosen[i] {
            continue;
        }
        let t = &mut out.triplets[i];
        let tgt_render = render(&t.target_spec, t.target_image.height())?;
        let occ = sample_occluder(&tgt_render, &mut rng::stream(seed, "occlusion", i as u64));
        t.swapped_image = occ.apply(&t.swapped_image);
        t.target_image = occ.apply(&t.target_image);
        t.occlusion_mask = Some(occ.mask);
        out.records[i].has_occlusion = true;
    }
    out.write()?;
    Ok(out)
}
