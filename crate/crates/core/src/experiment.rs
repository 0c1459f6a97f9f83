//! Multi-seed benchmark harness for the directional trend checks.
//!
//! Every stage caches its artifact under the experiment root and is skipped
//! when the artifact already exists, so an interrupted run picks up where it
//! stopped. Teacher training resumes from its latest checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use log::info;
use serde::{Deserialize, Serialize};

use crate::analysis::{compare_inversion_modes, NoiseComparison};
use crate::conditioning::{
    train_identity_encoder, ConditioningMode, EncoderTrainConfig, IdentityEncoder, Overlays,
};
use crate::degradation::DegradationSpec;
use crate::error::{Error, Result};
use crate::evaluation::probes::{train_attribute_probe, AttributeProbe, ProbeTrainConfig};
use crate::evaluation::protocol::{evaluate_protocol, EvalConfig, EvalReport};
use crate::evaluation::swap::{swap_batch, InversionMode, SwapSettings};
use crate::flowcore::{TimeGrid, VelocityModel};
use crate::image::ImageTensor;
use crate::nn;
use crate::pseudotriplet::{augment_with_occlusion, build_triplet_set, TripletConfig, TripletStore};
use crate::rng;
use crate::synthdata::{apply_occlusion, build_dataset, Dataset, DatasetConfig, RenderOutput, Split};
use crate::training::{train_student, train_teacher, StudentConfig, TeacherConfig, FINAL_CHECKPOINT, LATEST_CHECKPOINT};

pub const SCALE_FILE: &str = "scale.toml";

/// Identity-gate fractions swept by the gate trend.
pub const GATE_SWEEP: [f64; 3] = [0.35, 0.5, 0.75];

/// Trend keys accepted by [`Benchmark::run_trend`], in run order.
pub const TRENDS: [&str; 6] = ["a", "b", "c", "d", "e", "occlusion"];

/// Sizes and schedules of one benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkScale {
    pub name: String,
    pub identity_count: u32,
    pub images_per_identity: u32,
    pub resolution: usize,
    pub dataset_seed: u64,
    pub encoder: EncoderTrainConfig,
    pub probe: ProbeTrainConfig,
    /// Template; degradation, gate and seed are set per variant.
    pub teacher: TeacherConfig,
    /// Template; seed and the perceptual switch are set per variant.
    pub student: StudentConfig,
    pub triplets: usize,
    pub occlusion_fraction: f64,
    pub n_pairs: usize,
    pub sampling_steps: usize,
    pub seeds: Vec<u64>,
    pub noise_n: usize,
    pub noise_mc_trials: usize,
    pub occlusion_eval: usize,
}

impl BenchmarkScale {
    /// The reference toy benchmark: 40 identities x 8 images at 64x64,
    /// teachers trained 5k + 2k steps, three seeds.
    pub fn full() -> Self {
        Self {
            name: "full".into(),
            identity_count: 40,
            images_per_identity: 8,
            resolution: 64,
            dataset_seed: 7,
            encoder: EncoderTrainConfig::default(),
            probe: ProbeTrainConfig::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            triplets: 320,
            occlusion_fraction: 0.5,
            n_pairs: 200,
            sampling_steps: crate::flowcore::DEFAULT_STEPS,
            seeds: vec![0, 1, 2],
            noise_n: 64,
            noise_mc_trials: 50,
            occlusion_eval: 64,
        }
    }

    /// Same pipeline shrunk to fit a single CPU core in a few hours: smaller
    /// networks, shorter schedules, larger learning rates.
    pub fn reduced() -> Self {
        let full = Self::full();
        Self {
            name: "reduced".into(),
            identity_count: 24,
            images_per_identity: 8,
            encoder: EncoderTrainConfig {
                steps: 600,
                batch_size: 32,
                base_channels: 16,
                ..full.encoder
            },
            probe: ProbeTrainConfig { ..full.probe },
            teacher: TeacherConfig {
                phase1_steps: 700,
                phase2_steps: 300,
                batch_size: 16,
                lr: 1e-3,
                base_channels: 16,
                channel_mult: vec![1, 2, 2, 4],
                emb_width: 64,
                checkpoint_every: 100,
                log_every: 50,
                ..full.teacher
            },
            student: StudentConfig {
                steps: 300,
                batch_size: 16,
                lr: 5e-4,
                checkpoint_every: 100,
                log_every: 50,
                ..full.student
            },
            triplets: 96,
            n_pairs: 64,
            sampling_steps: 14,
            noise_n: 32,
            noise_mc_trials: 30,
            occlusion_eval: 32,
            ..full
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("benchmark needs at least one seed"));
        }
        if self.n_pairs < crate::evaluation::metrics::MIN_FID_SET {
            return Err(Error::config(format!(
                "benchmark n_pairs must be >= {} for the feature distance",
                crate::evaluation::metrics::MIN_FID_SET
            )));
        }
        self.teacher.validate()?;
        self.student.validate()
    }
}

/// One teacher training configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherVariant {
    pub degradation: DegradationSpec,
    pub id_gate_fraction: f64,
}

impl TeacherVariant {
    pub fn new(degradation: DegradationSpec, id_gate_fraction: f64) -> Self {
        Self {
            degradation,
            id_gate_fraction,
        }
    }

    pub fn slug(&self) -> String {
        format!(
            "{}_gate{:03}",
            self.degradation.to_string().replace(':', "-"),
            (self.id_gate_fraction * 100.0).round() as u32
        )
    }
}

/// `lower` should lie below `higher`. It holds when the mean gap is on the
/// expected side after allowing one pooled standard error across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub label: String,
    pub lower: Vec<f64>,
    pub higher: Vec<f64>,
    pub mean_lower: f64,
    pub mean_higher: f64,
    pub pooled_se: f64,
    pub holds: bool,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn sample_var(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Standard error of the difference of two seed means.
pub fn pooled_standard_error(a: &[f64], b: &[f64]) -> f64 {
    (sample_var(a) / a.len().max(1) as f64 + sample_var(b) / b.len().max(1) as f64).sqrt()
}

pub fn expect_less(label: impl Into<String>, lower: &[f64], higher: &[f64]) -> Comparison {
    let (ml, mh) = (mean(lower), mean(higher));
    let se = pooled_standard_error(lower, higher);
    Comparison {
        label: label.into(),
        lower: lower.to_vec(),
        higher: higher.to_vec(),
        mean_lower: ml,
        mean_higher: mh,
        pooled_se: se,
        holds: ml < mh + se,
    }
}

/// A scalar check against a fixed limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub label: String,
    pub value: f64,
    pub limit: f64,
    pub holds: bool,
}

impl Bound {
    pub fn at_most(label: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            label: label.into(),
            value,
            limit,
            holds: value <= limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendOutcome {
    pub name: String,
    pub comparisons: Vec<Comparison>,
    pub bounds: Vec<Bound>,
}

impl TrendOutcome {
    pub fn passed(&self) -> bool {
        self.comparisons.iter().all(|c| c.holds) && self.bounds.iter().all(|b| b.holds)
    }

    pub fn summary(&self) -> String {
        let mut parts: Vec<String> = self
            .comparisons
            .iter()
            .map(|c| {
                format!(
                    "{}: {:.4} < {:.4} (+se {:.4}) {}",
                    c.label,
                    c.mean_lower,
                    c.mean_higher,
                    c.pooled_se,
                    if c.holds { "ok" } else { "FAIL" }
                )
            })
            .collect();
        parts.extend(self.bounds.iter().map(|b| {
            format!(
                "{}: {:.4} <= {:.4} {}",
                b.label,
                b.value,
                b.limit,
                if b.holds { "ok" } else { "FAIL" }
            )
        }));
        parts.join("; ")
    }
}

/// Frozen measuring instruments shared by all variants and seeds.
pub struct Instruments {
    pub train: Dataset,
    pub eval: Dataset,
    pub encoder: IdentityEncoder,
    pub encoder_hash: String,
    pub probe: AttributeProbe,
}

pub struct Benchmark {
    pub scale: BenchmarkScale,
    pub root: PathBuf,
    instruments: Option<Instruments>,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&s).map_err(|e| Error::Serde(e.to_string()))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let s = toml::to_string(value).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

impl Benchmark {
    /// Open or create an experiment root. An existing root must have been
    /// created with the same scale.
    pub fn open(root: &Path, scale: BenchmarkScale) -> Result<Self> {
        scale.validate()?;
        let snap = root.join(SCALE_FILE);
        if snap.exists() {
            let prev: BenchmarkScale = read_toml(&snap)?;
            if prev != scale {
                return Err(Error::config(format!(
                    "{} was created with a different benchmark scale",
                    root.display()
                )));
            }
        } else {
            write_toml(&snap, &scale)?;
        }
        Ok(Self {
            scale,
            root: root.to_path_buf(),
            instruments: None,
        })
    }

    fn dataset(&self, split: Split) -> Result<Dataset> {
        let dir = self.root.join("data").join(match split {
            Split::Train => "train",
            Split::Eval => "eval",
        });
        if !dir.join(crate::synthdata::dataset::MANIFEST_FILE).exists() {
            info!("generating {split:?} dataset");
            build_dataset(
                &DatasetConfig {
                    identity_count: self.scale.identity_count,
                    images_per_identity: self.scale.images_per_identity,
                    resolution: self.scale.resolution,
                    seed: self.scale.dataset_seed,
                    split,
                },
                &dir,
            )?;
        }
        Dataset::load(&dir)
    }

    /// Datasets, identity encoder and attribute probe, trained on first use.
    pub fn instruments(&mut self) -> Result<&Instruments> {
        if self.instruments.is_none() {
            let train = self.dataset(Split::Train)?;
            let eval = self.dataset(Split::Eval)?;
            let enc_path = self.root.join("encoder.safetensors");
            if !enc_path.exists() {
                info!("training identity encoder");
                let (enc, vm, _) = train_identity_encoder(&train, &self.scale.encoder)?;
                let meta = enc.checkpoint_meta(&vm, serde_json::Value::Null)?;
                nn::save_checkpoint(&enc_path, &meta, &nn::varmap_tensors(&vm))?;
            }
            let probe_path = self.root.join("probe.safetensors");
            if !probe_path.exists() {
                info!("training attribute probe");
                let cfg = ProbeTrainConfig {
                    resolution: self.scale.resolution,
                    ..self.scale.probe.clone()
                };
                let (probe, vm, report) = train_attribute_probe(&cfg)?;
                let meta = probe.checkpoint_meta(&vm, serde_json::to_value(&report)?)?;
                nn::save_checkpoint(&probe_path, &meta, &nn::varmap_tensors(&vm))?;
            }
            self.instruments = Some(Instruments {
                train,
                eval,
                encoder: IdentityEncoder::load(&enc_path, &Device::Cpu, DType::F32)?,
                encoder_hash: nn::file_hash(&enc_path)?,
                probe: AttributeProbe::load(&probe_path, &Device::Cpu)?,
            });
        }
        Ok(self.instruments.as_ref().expect("set above"))
    }

    fn teacher_dir(&self, v: TeacherVariant, seed: u64) -> PathBuf {
        self.root.join("teachers").join(format!("{}_s{seed}", v.slug()))
    }

    pub fn teacher_config(&self, v: TeacherVariant, seed: u64) -> TeacherConfig {
        TeacherConfig {
            degradation: v.degradation,
            id_gate_fraction: v.id_gate_fraction,
            seed,
            ..self.scale.teacher.clone()
        }
    }

    /// Final checkpoint of a teacher, training (or resuming) it if needed.
    pub fn teacher(&mut self, v: TeacherVariant, seed: u64) -> Result<PathBuf> {
        let dir = self.teacher_dir(v, seed);
        let final_path = dir.join(FINAL_CHECKPOINT);
        if final_path.exists() {
            return Ok(final_path);
        }
        let cfg = self.teacher_config(v, seed);
        let latest = dir.join(LATEST_CHECKPOINT);
        let resume = latest.exists().then_some(latest);
        info!("training teacher {} seed {seed}", v.slug());
        let inst = self.instruments()?;
        train_teacher(&inst.train, &inst.encoder, &inst.encoder_hash, &cfg, &dir, resume.as_deref())?;
        Ok(final_path)
    }

    fn triplet_store(&mut self, v: TeacherVariant, seed: u64) -> Result<TripletStore> {
        let teacher = self.teacher(v, seed)?;
        let hash = nn::file_hash(&teacher)?;
        let dir = self.root.join("triplets").join(format!("{}_s{seed}", v.slug()));
        if dir.join(crate::pseudotriplet::STORE_META_FILE).exists() {
            return TripletStore::load(&dir, Some(&hash));
        }
        let (model, _) = VelocityModel::load(&teacher, &Device::Cpu, DType::F32)?;
        let cfg = TripletConfig {
            degradation: v.degradation,
            overlays: Overlays::ALL,
            inversion_mode: ConditioningMode::AttributeOnly,
            steps: self.scale.sampling_steps,
            seed,
            ..Default::default()
        };
        let n = self.scale.triplets;
        let inst = self.instruments()?;
        build_triplet_set(&model, &hash, &inst.encoder, &inst.train, n, &cfg, &dir)
    }

    fn occluded_store(&mut self, v: TeacherVariant, seed: u64) -> Result<TripletStore> {
        let base = self.triplet_store(v, seed)?;
        let dir = self.root.join("triplets").join(format!("{}_s{seed}_occluded", v.slug()));
        if dir.join(crate::pseudotriplet::STORE_META_FILE).exists() {
            return TripletStore::load(&dir, Some(&base.meta.teacher_hash));
        }
        augment_with_occlusion(&base, self.scale.occlusion_fraction, seed, &dir)
    }

    /// Final checkpoint of a student distilled from teacher `v`.
    pub fn student(&mut self, v: TeacherVariant, seed: u64, occlusion: Option<bool>) -> Result<PathBuf> {
        let suffix = match occlusion {
            None => String::new(),
            Some(true) => "_occ_perceptual".into(),
            Some(false) => "_occ_plain".into(),
        };
        let dir = self.root.join("students").join(format!("{}_s{seed}{suffix}", v.slug()));
        let final_path = dir.join(FINAL_CHECKPOINT);
        if final_path.exists() {
            return Ok(final_path);
        }
        let teacher = self.teacher(v, seed)?;
        let store = match occlusion {
            None => self.triplet_store(v, seed)?,
            Some(_) => self.occluded_store(v, seed)?,
        };
        let cfg = StudentConfig {
            seed,
            perceptual_loss_enabled: occlusion.unwrap_or(false),
            ..self.scale.student.clone()
        };
        let latest = dir.join(LATEST_CHECKPOINT);
        let resume = latest.exists().then_some(latest);
        info!("training student {} seed {seed}{suffix}", v.slug());
        let inst = self.instruments()?;
        train_student(&teacher, &store, &inst.encoder, &inst.encoder_hash, &cfg, &dir, resume.as_deref())?;
        Ok(final_path)
    }

    /// Protocol report for a checkpoint under `settings`, cached by `name`.
    pub fn evaluate(&mut self, checkpoint: &Path, name: &str, settings: SwapSettings, seed: u64) -> Result<EvalReport> {
        let path = self.root.join("reports").join(format!("{name}_s{seed}.toml"));
        if path.exists() {
            return EvalReport::load(&path);
        }
        let (model, _) = VelocityModel::load(checkpoint, &Device::Cpu, DType::F32)?;
        let cfg = EvalConfig {
            n_pairs: self.scale.n_pairs,
            seed,
            swap: SwapSettings {
                steps: self.scale.sampling_steps,
                seed,
                ..settings
            },
        };
        let inst = self.instruments()?;
        info!("evaluating {name} seed {seed}");
        let out = evaluate_protocol(&model, &inst.encoder, &inst.probe, &inst.eval, &cfg)?;
        fs::create_dir_all(path.parent().expect("reports dir")).map_err(|e| Error::io(&path, e))?;
        out.report.write(&path)?;
        Ok(out.report)
    }

    fn teacher_report(&mut self, v: TeacherVariant, seed: u64, inversion: InversionMode) -> Result<EvalReport> {
        let ckpt = self.teacher(v, seed)?;
        let settings = SwapSettings {
            inversion,
            ..SwapSettings::teacher(v.degradation)
        };
        let name = format!("teacher_{}_{}", v.slug(), inversion);
        self.evaluate(&ckpt, &name, settings, seed)
    }

    fn per_seed<T>(&mut self, mut f: impl FnMut(&mut Self, u64) -> Result<T>) -> Result<Vec<T>> {
        let seeds = self.scale.seeds.clone();
        seeds.into_iter().map(|s| f(self, s)).collect()
    }

    fn teacher_reports(&mut self, v: TeacherVariant, inversion: InversionMode) -> Result<Vec<EvalReport>> {
        self.per_seed(|b, s| b.teacher_report(v, s, inversion))
    }

    fn default_variant(&self) -> TeacherVariant {
        TeacherVariant::new(self.scale.teacher.degradation, self.scale.teacher.id_gate_fraction)
    }

    /// Run one trend by key (see [`TRENDS`]).
    pub fn run_trend(&mut self, key: &str) -> Result<TrendOutcome> {
        match key {
            "a" => self.trend_deblur_vs_mask(),
            "b" => self.trend_inversion_modes(),
            "c" => self.trend_degradation_strength(),
            "d" => self.trend_student_vs_teacher(),
            "e" => self.trend_identity_gate(&GATE_SWEEP),
            "occlusion" => self.trend_occlusion_perceptual(),
            other => Err(Error::config(format!(
                "unknown trend {other:?} (expected one of {})",
                TRENDS.join(", ")
            ))),
        }
    }

    /// Deblurring (downsample-8) against inpainting (masking).
    pub fn trend_deblur_vs_mask(&mut self) -> Result<TrendOutcome> {
        let gate = self.scale.teacher.id_gate_fraction;
        let ao = InversionMode::ATTRIBUTE_ONLY;
        let ds = self.teacher_reports(TeacherVariant::new(DegradationSpec::downsample(8), gate), ao)?;
        let mk = self.teacher_reports(TeacherVariant::new(DegradationSpec::MASKING, gate), ao)?;
        Ok(TrendOutcome {
            name: "deblurring beats inpainting".into(),
            comparisons: vec![
                expect_less("mean attribute error downsample-8 < masking", &col(&ds, attr), &col(&mk, attr)),
                expect_less("feature distance downsample-8 < masking", &col(&ds, fid), &col(&mk, fid)),
            ],
            bounds: vec![],
        })
    }

    /// Attribute-only inversion against none and full, plus noise structure.
    pub fn trend_inversion_modes(&mut self) -> Result<TrendOutcome> {
        let v = self.default_variant();
        let ao = self.teacher_reports(v, InversionMode::ATTRIBUTE_ONLY)?;
        let none = self.teacher_reports(v, InversionMode::Invert(ConditioningMode::None))?;
        let full = self.teacher_reports(v, InversionMode::Invert(ConditioningMode::Full))?;
        let noise = self.per_seed(|b, s| b.noise_comparison(v, s))?;
        let score = |label: &str| -> Vec<f64> {
            noise
                .iter()
                .map(|n| n.row(label).map_or(f64::NAN, |r| r.structure_score))
                .collect()
        };
        let id_ao = mean(&col(&ao, idsim));
        let mut bounds = vec![
            Bound::at_most("id similarity drop vs none", mean(&col(&none, idsim)) - id_ao, 0.02),
            Bound::at_most("id similarity drop vs full", mean(&col(&full, idsim)) - id_ao, 0.02),
        ];
        for (n, seed) in noise.iter().zip(&self.scale.seeds) {
            let g = n.row(crate::analysis::GAUSSIAN_LABEL).map_or(f64::NAN, |r| r.structure_score);
            let r = n.gaussian_reference;
            bounds.push(Bound::at_most(
                format!("gaussian baseline |z| (seed {seed})"),
                ((g - r.mean) / r.std.max(f64::MIN_POSITIVE)).abs(),
                2.0,
            ));
        }
        Ok(TrendOutcome {
            name: "attribute-aware inversion".into(),
            comparisons: vec![
                expect_less("attribute error attribute_only < none", &col(&ao, attr), &col(&none, attr)),
                expect_less("attribute error attribute_only < full", &col(&ao, attr), &col(&full, attr)),
                expect_less(
                    "structure score none < attribute_only",
                    &score(ConditioningMode::None.as_str()),
                    &score(ConditioningMode::AttributeOnly.as_str()),
                ),
            ],
            bounds,
        })
    }

    pub fn noise_comparison(&mut self, v: TeacherVariant, seed: u64) -> Result<NoiseComparison> {
        let path = self.root.join("noise").join(format!("{}_s{seed}", v.slug()));
        let report = path.join(crate::analysis::REPORT_FILE);
        if report.exists() {
            return read_toml(&report);
        }
        let ckpt = self.teacher(v, seed)?;
        let (model, _) = VelocityModel::load(&ckpt, &Device::Cpu, DType::F32)?;
        let (n, trials) = (self.scale.noise_n, self.scale.noise_mc_trials);
        let grid = TimeGrid::new(self.scale.sampling_steps)?;
        let condition = SwapSettings::teacher(v.degradation).condition;
        let inst = self.instruments()?;
        let cmp = compare_inversion_modes(
            &model,
            &inst.encoder,
            &inst.eval,
            condition,
            &ConditioningMode::ALL,
            grid,
            n,
            seed,
            trials,
        )?;
        cmp.write(&path)?;
        Ok(cmp)
    }

    /// Identity rises and attribute fidelity falls with degradation strength.
    pub fn trend_degradation_strength(&mut self) -> Result<TrendOutcome> {
        let gate = self.scale.teacher.id_gate_fraction;
        let ao = InversionMode::ATTRIBUTE_ONLY;
        let none = self.teacher_reports(TeacherVariant::new(DegradationSpec::NONE, gate), ao)?;
        let d32 = self.teacher_reports(TeacherVariant::new(DegradationSpec::downsample(32), gate), ao)?;
        let d8 = self.teacher_reports(TeacherVariant::new(DegradationSpec::downsample(8), gate), ao)?;
        let chance = mean(&none.iter().map(|r| r.retrieval_chance_top1).collect::<Vec<_>>());
        Ok(TrendOutcome {
            name: "degradation strength".into(),
            comparisons: vec![
                expect_less("id similarity none < downsample-32", &col(&none, idsim), &col(&d32, idsim)),
                expect_less("id similarity downsample-32 < downsample-8", &col(&d32, idsim), &col(&d8, idsim)),
                expect_less("attribute error none < downsample-32", &col(&none, attr), &col(&d32, attr)),
                expect_less("attribute error downsample-32 < downsample-8", &col(&d32, attr), &col(&d8, attr)),
            ],
            bounds: vec![Bound::at_most(
                "retrieval top-1 with none (percent, limit 2x chance)",
                mean(&none.iter().map(|r| r.retrieval_top1).collect::<Vec<_>>()),
                2.0 * chance,
            )],
        })
    }

    /// Student distilled from pseudo-triplets against its teacher.
    pub fn trend_student_vs_teacher(&mut self) -> Result<TrendOutcome> {
        let v = self.default_variant();
        let teacher = self.teacher_reports(v, InversionMode::ATTRIBUTE_ONLY)?;
        let student = self.per_seed(|b, s| {
            let ckpt = b.student(v, s, None)?;
            b.evaluate(&ckpt, &format!("student_{}", v.slug()), SwapSettings::student(), s)
        })?;
        Ok(TrendOutcome {
            name: "student vs teacher".into(),
            comparisons: vec![
                expect_less("attribute error student <= teacher", &col(&student, attr), &col(&teacher, attr)),
                expect_less("feature distance student <= teacher", &col(&student, fid), &col(&teacher, fid)),
            ],
            bounds: vec![Bound::at_most(
                "|id similarity student - teacher|",
                (mean(&col(&student, idsim)) - mean(&col(&teacher, idsim))).abs(),
                0.02,
            )],
        })
    }

    /// Wider identity-loss gates trade attributes for identity.
    pub fn trend_identity_gate(&mut self, gates: &[f64]) -> Result<TrendOutcome> {
        let deg = self.scale.teacher.degradation;
        let reports = gates
            .iter()
            .map(|&g| self.teacher_reports(TeacherVariant::new(deg, g), InversionMode::ATTRIBUTE_ONLY))
            .collect::<Result<Vec<_>>>()?;
        let mut comparisons = Vec::new();
        for k in 1..gates.len() {
            let (a, b) = (&reports[k - 1], &reports[k]);
            comparisons.push(expect_less(
                format!("id similarity gate {} < gate {}", gates[k - 1], gates[k]),
                &col(a, idsim),
                &col(b, idsim),
            ));
            comparisons.push(expect_less(
                format!("attribute error gate {} < gate {}", gates[k - 1], gates[k]),
                &col(a, attr),
                &col(b, attr),
            ));
        }
        Ok(TrendOutcome {
            name: "identity gate trade-off".into(),
            comparisons,
            bounds: vec![],
        })
    }

    /// Mean squared error inside the occluder between student swaps of
    /// occluded held-out targets and those targets, for one student.
    pub fn occluder_error(&mut self, checkpoint: &Path, seed: u64) -> Result<f64> {
        let (model, _) = VelocityModel::load(checkpoint, &Device::Cpu, DType::F32)?;
        let n = self.scale.occlusion_eval;
        let settings = SwapSettings {
            steps: self.scale.sampling_steps,
            seed,
            ..SwapSettings::student()
        };
        let inst = self.instruments()?;
        let pairs = crate::evaluation::protocol::sample_eval_pairs(&inst.eval, n, seed)?;
        let mut occluded = Vec::with_capacity(n);
        for (k, p) in pairs.iter().enumerate() {
            let tgt = &inst.eval.renders[p.target_index];
            let (image, mask) = apply_occlusion(tgt, &mut rng::stream(seed, "occluder-eval", k as u64));
            occluded.push((RenderOutput { image, ..tgt.clone() }, mask));
        }
        let pair_refs: Vec<(&RenderOutput, &RenderOutput)> = pairs
            .iter()
            .zip(&occluded)
            .map(|(p, (t, _))| (&inst.eval.renders[p.source_index], t))
            .collect();
        let swapped: Vec<ImageTensor> = swap_batch(&model, &inst.encoder, &pair_refs, &settings)?;
        let mut total = 0.0;
        let mut count = 0usize;
        for (s, (t, m)) in swapped.iter().zip(&occluded) {
            if m.count() > 0 {
                total += s.masked_mse(&t.image, m)?;
                count += 1;
            }
        }
        Ok(total / count.max(1) as f64)
    }

    /// Perceptual loss keeps occluders closer to the occluded target.
    pub fn trend_occlusion_perceptual(&mut self) -> Result<TrendOutcome> {
        let v = self.default_variant();
        let errs = |b: &mut Self, perceptual: bool| -> Result<Vec<f64>> {
            b.per_seed(|b, s| {
                let path = b.root.join("reports").join(format!(
                    "occluder_{}_{}_s{s}.toml",
                    v.slug(),
                    if perceptual { "perceptual" } else { "plain" }
                ));
                if path.exists() {
                    let b: Bound = read_toml(&path)?;
                    return Ok(b.value);
                }
                let ckpt = b.student(v, s, Some(perceptual))?;
                let e = b.occluder_error(&ckpt, s)?;
                write_toml(&path, &Bound::at_most("occluder mse", e, f64::INFINITY))?;
                Ok(e)
            })
        };
        let with = errs(self, true)?;
        let without = errs(self, false)?;
        Ok(TrendOutcome {
            name: "occlusion with perceptual loss".into(),
            comparisons: vec![expect_less("occluder mse perceptual < plain", &with, &without)],
            bounds: vec![],
        })
    }
}

fn col(reports: &[EvalReport], f: fn(&EvalReport) -> f64) -> Vec<f64> {
    reports.iter().map(f).collect()
}

fn attr(r: &EvalReport) -> f64 {
    r.mean_attribute_error
}

fn fid(r: &EvalReport) -> f64 {
    r.feature_fid.unwrap_or(f64::NAN)
}

fn idsim(r: &EvalReport) -> f64 {
    r.id_similarity_mean
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooled_slack_rule() {
        let c = expect_less("x", &[1.0, 1.0, 1.0], &[2.0, 2.0, 2.0]);
        assert!(c.holds && c.pooled_se == 0.0);
        assert!(!expect_less("x", &[2.0], &[2.0]).holds);
        // a gap smaller than one standard error still counts
        let c = expect_less("x", &[1.0, 2.0, 3.0], &[0.5, 1.5, 2.5]);
        assert!((c.pooled_se - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(c.holds);
        assert!(!expect_less("x", &[3.0, 3.1, 2.9], &[1.0, 1.1, 0.9]).holds);
    }

    #[test]
    fn scales_validate() {
        BenchmarkScale::full().validate().unwrap();
        BenchmarkScale::reduced().validate().unwrap();
        let mut s = BenchmarkScale::reduced();
        s.n_pairs = 10;
        assert!(s.validate().is_err());
    }

    #[test]
    fn variant_slugs_are_distinct() {
        let a = TeacherVariant::new(DegradationSpec::downsample(8), 0.35).slug();
        let b = TeacherVariant::new(DegradationSpec::downsample(8), 0.5).slug();
        let c = TeacherVariant::new(DegradationSpec::MASKING, 0.35).slug();
        assert!(a != b && a != c && b != c);
    }
}
