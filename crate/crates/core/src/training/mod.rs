//! Teacher training on the conditional-deblurring proxy task (two phases,
//! gated identity loss in the second) and student training on pseudo-triplets
//! with the clean swapped image as the attribute condition.

pub mod config;
pub mod losses;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    build_attribute_condition, make_bundle, AttributeCondition, BatchConditioning, ConditioningMode,
    IdentityEmbedding, IdentityEncoder,
};
use crate::error::{Error, Result};
use crate::evaluation::swap::masked_embeddings;
use crate::flowcore::{VelocityConfig, VelocityModel};
use crate::image::ImageTensor;
use crate::nn::{self, AdamW, AdamWConfig};
use crate::pseudotriplet::TripletStore;
use crate::rng;
use crate::synthdata::dataset::{create_dir, read_lines};
use crate::synthdata::{render, Dataset, RenderOutput};

pub use config::{load_config, parse_config, StudentConfig, TeacherConfig};
pub use losses::{
    combined_loss, flow_loss, id_loss, id_loss_batch, perceptual_loss, LossReport, LossWeights, StepInputs,
};

pub const PHASE1_CHECKPOINT: &str = "phase1.safetensors";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";
pub const LATEST_CHECKPOINT: &str = "latest.safetensors";
pub const LOG_FILE: &str = "log.jsonl";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

/// Training metadata stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub role: Role,
    /// Phase of the last completed step (the student only has phase 1).
    pub phase: u8,
    /// Number of completed optimizer steps.
    pub step: usize,
    pub train_config: serde_json::Value,
    pub encoder_hash: String,
    pub teacher_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub phase: u8,
    #[serde(flatten)]
    pub loss: LossReport,
    pub timestamp: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub phase1_checkpoint: Option<PathBuf>,
    /// Loss of every step run in this invocation, in order.
    pub losses: Vec<LossReport>,
    pub start_step: usize,
}

/// A model under training with its optimizer.
pub struct Run {
    pub model: VelocityModel,
    pub varmap: VarMap,
    pub opt: AdamW,
    pub step: usize,
}

impl Run {
    pub fn new(config: &VelocityConfig, seed: u64, opt: AdamWConfig) -> Result<Self> {
        let (model, varmap) = VelocityModel::new_trainable(config, seed, &Device::Cpu, DType::F32)?;
        let opt = AdamW::new(nn::sorted_vars(&varmap), opt)?;
        Ok(Self {
            model,
            varmap,
            opt,
            step: 0,
        })
    }

    pub fn save(&self, path: &Path, info: &RunInfo) -> Result<()> {
        let meta = self.model.checkpoint_meta(&self.varmap, serde_json::to_value(info)?)?;
        let mut tensors = nn::varmap_tensors(&self.varmap);
        tensors.extend(self.opt.state_tensors());
        nn::save_checkpoint(path, &meta, &tensors)
    }

    /// Restore weights, optimizer state and step from a checkpoint.
    pub fn restore(&mut self, path: &Path) -> Result<RunInfo> {
        let (meta, config, tensors) = VelocityModel::read_checkpoint(path, &Device::Cpu)?;
        if &config != self.model.config() {
            return Err(Error::Checkpoint(format!(
                "{}: architecture differs from the configured model",
                path.display()
            )));
        }
        let info: RunInfo = serde_json::from_value(meta.extra)?;
        nn::load_into_varmap(&self.varmap, &tensors)?;
        self.opt.load_state(&tensors, info.step as u64)?;
        self.step = info.step;
        Ok(info)
    }
}

fn now() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Append-only loss log. On resume, records past the resume step are dropped.
struct LossLog {
    file: fs::File,
}

impl LossLog {
    fn open(path: &Path, keep_below: usize) -> Result<Self> {
        let kept: Vec<LogRecord> = if keep_below > 0 && path.exists() {
            read_lines::<LogRecord>(path)?
                .into_iter()
                .filter(|r| r.step < keep_below)
                .collect()
        } else {
            Vec::new()
        };
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in kept {
            writeln!(file, "{}", serde_json::to_string(&r)?).map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { file })
    }

    fn push(&mut self, rec: &LogRecord) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(rec)?)
            .map_err(|e| Error::io(Path::new(LOG_FILE), e))
    }
}

pub fn read_log(dir: &Path) -> Result<Vec<LogRecord>> {
    read_lines(&dir.join(LOG_FILE))
}

/// One source/target pair for a teacher step.
#[derive(Debug, Clone, Copy)]
pub struct TeacherPair<'a> {
    pub source_identity: u32,
    pub source_embedding: &'a IdentityEmbedding,
    pub target_identity: u32,
    pub target: &'a RenderOutput,
}

fn embeddings_tensor(e: &[&IdentityEmbedding], device: &Device) -> Result<Tensor> {
    let d = e[0].dim();
    let flat: Vec<f32> = e.iter().flat_map(|x| x.as_slice().iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (e.len(), d), device)?)
}

/// Assemble the step inputs shared by the teacher and the student.
fn prepare_inputs(
    model: &VelocityModel,
    x0: &[&ImageTensor],
    ids: &[&IdentityEmbedding],
    atts: Vec<AttributeCondition>,
    perceptual: Vec<bool>,
    dropout: f64,
    rng: &mut rng::Rng,
) -> Result<StepInputs> {
    let dev = Device::Cpu;
    let b = x0.len();
    let bundles = ids
        .iter()
        .zip(atts)
        .map(|(id, att)| make_bundle(Some((*id).clone()), Some(att), ConditioningMode::Full))
        .collect::<Result<Vec<_>>>()?;
    let cfg = model.config();
    let cond = BatchConditioning::from_bundles(&bundles, cfg.embed_dim, cfg.resolution, &dev, DType::F32)?;
    let noise = losses::draw_batch_noise(rng, b, cfg.resolution, dropout, &dev)?;
    Ok(StepInputs {
        x0: ImageTensor::stack(x0, &dev, DType::F32)?,
        eps: noise.eps,
        t: noise.t,
        cond: losses::apply_dropout(&cond, &noise.drop_id, &noise.drop_att)?,
        id_targets: embeddings_tensor(ids, &dev)?,
        id_active: noise.drop_id.iter().map(|d| !d).collect(),
        perceptual,
    })
}

/// Draw the step inputs for a teacher batch.
pub fn teacher_inputs(
    model: &VelocityModel,
    pairs: &[TeacherPair],
    config: &TeacherConfig,
    rng: &mut rng::Rng,
) -> Result<StepInputs> {
    if pairs.is_empty() {
        return Err(Error::input("empty teacher batch"));
    }
    for p in pairs {
        if p.source_identity != p.target_identity {
            return Err(Error::input(format!(
                "teacher pair mixes identities {} and {}",
                p.source_identity, p.target_identity
            )));
        }
    }
    let atts = pairs
        .iter()
        .map(|p| build_attribute_condition(p.target, config.degradation, config.overlays()))
        .collect::<Result<Vec<_>>>()?;
    let x0: Vec<&ImageTensor> = pairs.iter().map(|p| &p.target.image).collect();
    let ids: Vec<&IdentityEmbedding> = pairs.iter().map(|p| p.source_embedding).collect();
    prepare_inputs(model, &x0, &ids, atts, vec![false; pairs.len()], config.condition_dropout, rng)
}

pub fn teacher_weights(config: &TeacherConfig, phase: u8) -> LossWeights {
    LossWeights {
        use_id: phase >= 2,
        id_gate_fraction: config.id_gate_fraction,
        lambda_id: config.lambda_id,
        use_perceptual: false,
        lambda_perceptual: 0.0,
    }
}

/// One teacher optimizer update.
pub fn teacher_step(
    run: &mut Run,
    encoder: &IdentityEncoder,
    pairs: &[TeacherPair],
    config: &TeacherConfig,
    phase: u8,
    rng: &mut rng::Rng,
) -> Result<LossReport> {
    let inputs = teacher_inputs(&run.model, pairs, config, rng)?;
    let (loss, report) = combined_loss(&run.model, Some(encoder), &inputs, &teacher_weights(config, phase))?;
    run.opt.backward_step(&loss)?;
    run.step += 1;
    Ok(report)
}

/// Teacher training data: the dataset plus cached masked source embeddings.
pub struct TeacherData<'a> {
    pub dataset: &'a Dataset,
    pub embeddings: Vec<IdentityEmbedding>,
    groups: Vec<Vec<usize>>,
}

impl<'a> TeacherData<'a> {
    pub fn new(dataset: &'a Dataset, encoder: &IdentityEncoder) -> Result<Self> {
        let groups: Vec<Vec<usize>> = dataset.by_identity().into_values().collect();
        if groups.is_empty() || groups.iter().any(|g| g.len() < 2) {
            return Err(Error::input("teacher training needs >= 2 images per identity"));
        }
        let renders: Vec<&RenderOutput> = dataset.renders.iter().collect();
        let embeddings = masked_embeddings(encoder, &renders)?;
        Ok(Self {
            dataset,
            embeddings,
            groups,
        })
    }

    /// Same-identity `(source, target)` index pairs with `source != target`.
    pub fn sample_pairs(&self, seed: u64, step: usize, batch: usize) -> Vec<(usize, usize)> {
        let mut r = rng::stream(seed, "teacher-pairs", step as u64);
        (0..batch)
            .map(|_| {
                let g = &self.groups[r.random_range(0..self.groups.len())];
                let ti = r.random_range(0..g.len());
                let mut si = r.random_range(0..g.len() - 1);
                if si >= ti {
                    si += 1;
                }
                (g[si], g[ti])
            })
            .collect()
    }

    pub fn pairs(&self, idx: &[(usize, usize)]) -> Vec<TeacherPair<'_>> {
        idx.iter()
            .map(|&(s, t)| TeacherPair {
                source_identity: self.dataset.identity_of(s),
                source_embedding: &self.embeddings[s],
                target_identity: self.dataset.identity_of(t),
                target: &self.dataset.renders[t],
            })
            .collect()
    }
}

/// Write the config snapshot once; a later run in the same directory must
/// use an identical config.
fn write_snapshot<T: Serialize>(out_dir: &Path, config: &T) -> Result<()> {
    let path = out_dir.join(CONFIG_SNAPSHOT);
    let text = config::config_to_string(config)?;
    if path.exists() {
        let prev = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if prev != text {
            return Err(Error::config(format!(
                "{} holds a different config; use a fresh output directory",
                path.display()
            )));
        }
        return Ok(());
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Run both teacher phases, checkpointing at the phase boundary, every
/// `checkpoint_every` steps and at completion.
pub fn train_teacher(
    dataset: &Dataset,
    encoder: &IdentityEncoder,
    encoder_hash: &str,
    config: &TeacherConfig,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainSummary> {
    config.validate()?;
    create_dir(out_dir)?;
    let vcfg = config.velocity_config(dataset.resolution(), encoder.config().embed_dim);
    let mut run = Run::new(
        &vcfg,
        config.seed,
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
    )?;
    if let Some(p) = resume_from {
        let info = run.restore(p)?;
        if info.role != Role::Teacher {
            return Err(Error::Checkpoint(format!("{} is not a teacher checkpoint", p.display())));
        }
        info!("resuming teacher from step {}", run.step);
    }
    write_snapshot(out_dir, config)?;
    let data = TeacherData::new(dataset, encoder)?;
    let mut log = LossLog::open(&out_dir.join(LOG_FILE), run.step)?;
    let info = |phase: u8, step: usize| RunInfo {
        role: Role::Teacher,
        phase,
        step,
        train_config: serde_json::to_value(config).unwrap_or_default(),
        encoder_hash: encoder_hash.to_string(),
        teacher_hash: None,
    };
    let start = run.step;
    let total = config.total_steps();
    let mut losses = Vec::new();
    let phase1_path = out_dir.join(PHASE1_CHECKPOINT);
    if start == config.phase1_steps && !phase1_path.exists() {
        run.save(&phase1_path, &info(1, start))?;
    }
    while run.step < total {
        let step = run.step;
        let phase = if step < config.phase1_steps { 1 } else { 2 };
        let idx = data.sample_pairs(config.seed, step, config.batch_size);
        let pairs = data.pairs(&idx);
        let mut r = rng::stream(config.seed, "teacher-step", step as u64);
        let report = teacher_step(&mut run, encoder, &pairs, config, phase, &mut r)?;
        log.push(&LogRecord {
            step,
            phase,
            loss: report,
            timestamp: now(),
        })?;
        losses.push(report);
        if config.log_every > 0 && step % config.log_every == 0 {
            info!(
                "teacher step {step} (phase {phase}): flow {:.4} id {:.4} total {:.4}",
                report.flow_loss, report.id_loss, report.total
            );
        }
        if run.step == config.phase1_steps {
            run.save(&phase1_path, &info(1, run.step))?;
        }
        if config.checkpoint_every > 0 && run.step % config.checkpoint_every == 0 {
            run.save(&out_dir.join(LATEST_CHECKPOINT), &info(phase, run.step))?;
        }
    }
    let phase = if config.phase2_steps > 0 { 2 } else { 1 };
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    run.save(&final_path, &info(phase, run.step))?;
    run.save(&out_dir.join(LATEST_CHECKPOINT), &info(phase, run.step))?;
    Ok(TrainSummary {
        final_checkpoint: final_path,
        phase1_checkpoint: phase1_path.exists().then_some(phase1_path),
        losses,
        start_step: start,
    })
}

/// Student training data with cached masked source embeddings.
pub struct StudentData<'a> {
    pub store: &'a TripletStore,
    pub embeddings: Vec<IdentityEmbedding>,
}

impl<'a> StudentData<'a> {
    pub fn new(store: &'a TripletStore, encoder: &IdentityEncoder) -> Result<Self> {
        if store.is_empty() {
            return Err(Error::input("student training needs a non-empty triplet store"));
        }
        let mut embeddings = Vec::with_capacity(store.len());
        for chunk in store.triplets.chunks(64) {
            let masked = chunk
                .iter()
                .map(|t| {
                    let r = render(&t.source_spec, t.source_image.height())?;
                    crate::conditioning::encoder::mask_background(&t.source_image, &r.face_mask)
                })
                .collect::<Result<Vec<_>>>()?;
            embeddings.extend(encoder.embed_batch(&masked.iter().collect::<Vec<_>>())?);
        }
        Ok(Self { store, embeddings })
    }

    pub fn sample(&self, seed: u64, step: usize, batch: usize) -> Vec<usize> {
        let mut r = rng::stream(seed, "student-batch", step as u64);
        (0..batch).map(|_| r.random_range(0..self.store.len())).collect()
    }
}

/// Draw the step inputs for a student batch of triplet indices.
pub fn student_inputs(
    model: &VelocityModel,
    data: &StudentData,
    idx: &[usize],
    config: &StudentConfig,
    rng: &mut rng::Rng,
) -> Result<StepInputs> {
    let trip: Vec<_> = idx.iter().map(|&i| &data.store.triplets[i]).collect();
    let atts = trip
        .iter()
        .map(|t| AttributeCondition::new(t.swapped_image.clone().clamp01()))
        .collect::<Result<Vec<_>>>()?;
    let x0: Vec<&ImageTensor> = trip.iter().map(|t| &t.target_image).collect();
    let ids: Vec<&IdentityEmbedding> = idx.iter().map(|&i| &data.embeddings[i]).collect();
    let perceptual = trip.iter().map(|t| t.occlusion_mask.is_some()).collect();
    prepare_inputs(model, &x0, &ids, atts, perceptual, config.condition_dropout, rng)
}

pub fn student_weights(config: &StudentConfig) -> LossWeights {
    LossWeights {
        use_id: true,
        id_gate_fraction: config.id_gate_fraction,
        lambda_id: config.lambda_id,
        use_perceptual: config.perceptual_loss_enabled,
        lambda_perceptual: if config.perceptual_loss_enabled { config.lambda_perceptual } else { 0.0 },
    }
}

pub fn student_step(
    run: &mut Run,
    encoder: &IdentityEncoder,
    data: &StudentData,
    idx: &[usize],
    config: &StudentConfig,
    rng: &mut rng::Rng,
) -> Result<LossReport> {
    let inputs = student_inputs(&run.model, data, idx, config, rng)?;
    let (loss, report) = combined_loss(&run.model, Some(encoder), &inputs, &student_weights(config))?;
    run.opt.backward_step(&loss)?;
    run.step += 1;
    Ok(report)
}

/// Initialize from the teacher checkpoint and train on the triplet store.
pub fn train_student(
    teacher_checkpoint: &Path,
    store: &TripletStore,
    encoder: &IdentityEncoder,
    encoder_hash: &str,
    config: &StudentConfig,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainSummary> {
    config.validate()?;
    create_dir(out_dir)?;
    let (_, vcfg, teacher_tensors) = VelocityModel::read_checkpoint(teacher_checkpoint, &Device::Cpu)?;
    let teacher_hash = nn::file_hash(teacher_checkpoint)?;
    let mut run = Run::new(
        &vcfg,
        config.seed,
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
    )?;
    let weights: std::collections::HashMap<String, Tensor> = teacher_tensors
        .into_iter()
        .filter(|(k, _)| !k.starts_with("adam."))
        .collect();
    nn::load_into_varmap(&run.varmap, &weights)?;
    if let Some(p) = resume_from {
        let info = run.restore(p)?;
        if info.role != Role::Student {
            return Err(Error::Checkpoint(format!("{} is not a student checkpoint", p.display())));
        }
        info!("resuming student from step {}", run.step);
    }
    write_snapshot(out_dir, config)?;
    let data = StudentData::new(store, encoder)?;
    let mut log = LossLog::open(&out_dir.join(LOG_FILE), run.step)?;
    let info = |step: usize| RunInfo {
        role: Role::Student,
        phase: 1,
        step,
        train_config: serde_json::to_value(config).unwrap_or_default(),
        encoder_hash: encoder_hash.to_string(),
        teacher_hash: Some(teacher_hash.clone()),
    };
    let start = run.step;
    let mut losses = Vec::new();
    while run.step < config.steps {
        let step = run.step;
        let idx = data.sample(config.seed, step, config.batch_size);
        let mut r = rng::stream(config.seed, "student-step", step as u64);
        let report = student_step(&mut run, encoder, &data, &idx, config, &mut r)?;
        log.push(&LogRecord {
            step,
            phase: 1,
            loss: report,
            timestamp: now(),
        })?;
        losses.push(report);
        if config.log_every > 0 && step % config.log_every == 0 {
            info!(
                "student step {step}: flow {:.4} id {:.4} perceptual {:.4}",
                report.flow_loss, report.id_loss, report.perceptual_loss
            );
        }
        if config.checkpoint_every > 0 && run.step % config.checkpoint_every == 0 {
            run.save(&out_dir.join(LATEST_CHECKPOINT), &info(run.step))?;
        }
    }
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    run.save(&final_path, &info(run.step))?;
    run.save(&out_dir.join(LATEST_CHECKPOINT), &info(run.step))?;
    Ok(TrainSummary {
        final_checkpoint: final_path,
        phase1_checkpoint: None,
        losses,
        start_step: start,
    })
}

/// Running mean of `values` over windows of `window`.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// Identity ids seen by a dataset, in order.
pub fn identity_groups(dataset: &Dataset) -> BTreeMap<u32, Vec<usize>> {
    dataset.by_identity()
}
