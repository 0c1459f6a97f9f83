use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use candle_core::Device;
use log::info;
use serde::Serialize;

use swapflow::analysis::compare_inversion_modes;
use swapflow::conditioning::{train_identity_encoder, ConditioningMode, EncoderTrainConfig};
use swapflow::degradation::DegradationSpec;
use swapflow::evaluation::probes::train_attribute_probe;
use swapflow::evaluation::protocol::{write_eval_output, REPORT_FILE};
use swapflow::evaluation::{evaluate_protocol, swap as swap_pair, AttributeProbe, EvalConfig, EvalReport, ProbeTrainConfig, SwapSettings};
use swapflow::experiment::{Benchmark as Harness, BenchmarkScale, TrendOutcome, TRENDS};
use swapflow::flowcore::{TimeGrid, VelocityModel};
use swapflow::nn;
use swapflow::pseudotriplet::{augment_with_occlusion, build_triplet_set, TripletConfig, TripletStore};
use swapflow::synthdata::{build_dataset, Dataset, DatasetConfig};
use swapflow::training::{self, load_config, read_log, StudentConfig, TeacherConfig, FINAL_CHECKPOINT, LATEST_CHECKPOINT};

use crate::cli;
use crate::io::{
    claim_output, ensure_parent, load_encoder, load_image, resolve, run_dir, usage, write_toml, LoadedModel,
};
use crate::plots;

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

pub fn gen_data(root: &Path, a: cli::GenData) -> Result<()> {
    let out = resolve(root, &a.out);
    claim_output(&out, a.common.force)?;
    let cfg = DatasetConfig {
        identity_count: a.identities,
        images_per_identity: a.per_identity,
        resolution: a.res,
        seed: a.common.seed,
        split: a.split,
    };
    let manifest = build_dataset(&cfg, &out)?;
    println!("wrote {} images to {}", manifest.records.len(), out.display());
    Ok(())
}

/// `<stem>.report.toml` next to a checkpoint file.
fn report_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("report.toml")
}

pub fn train_id_encoder(root: &Path, a: cli::TrainIdEncoder) -> Result<()> {
    let out = resolve(root, &a.out);
    claim_output(&out, a.common.force)?;
    let dataset = load_dataset(&resolve(root, &a.data))?;
    let d = EncoderTrainConfig::default();
    let cfg = EncoderTrainConfig {
        seed: a.common.seed,
        steps: a.steps.unwrap_or(d.steps),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        embed_dim: a.embed_dim.unwrap_or(d.embed_dim),
        min_accuracy: a.min_accuracy.unwrap_or(d.min_accuracy),
        ..d
    };
    let (enc, vm, report) = train_identity_encoder(&dataset, &cfg)?;
    let meta = enc.checkpoint_meta(&vm, serde_json::to_value(&report)?)?;
    nn::save_checkpoint(&out, &meta, &nn::varmap_tensors(&vm))?;
    write_toml(&report_path(&out), &report)?;
    println!(
        "identity encoder: val top-1 {:.3}, same/diff cosine {:.3}/{:.3} -> {}",
        report.val_top1,
        report.same_identity_cosine,
        report.different_identity_cosine,
        out.display()
    );
    Ok(())
}

pub fn train_probes(root: &Path, a: cli::TrainProbes) -> Result<()> {
    let out = resolve(root, &a.out);
    claim_output(&out, a.common.force)?;
    let d = ProbeTrainConfig::default();
    let cfg = ProbeTrainConfig {
        resolution: a.res,
        seed: a.common.seed,
        steps: a.steps.unwrap_or(d.steps),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        min_r2: a.min_r2.unwrap_or(d.min_r2),
        ..d
    };
    let (probe, vm, report) = train_attribute_probe(&cfg)?;
    let meta = probe.checkpoint_meta(&vm, serde_json::to_value(&report)?)?;
    nn::save_checkpoint(&out, &meta, &nn::varmap_tensors(&vm))?;
    write_toml(&report_path(&out), &report)?;
    let worst = report.r2.iter().copied().fold(f64::INFINITY, f64::min);
    println!("attribute probe: min held-out R2 {worst:.3} -> {}", out.display());
    Ok(())
}

/// Prepare a training output directory: resume needs an existing latest
/// checkpoint, a fresh run needs an empty slot.
fn training_dir(out: &Path, resume: bool, force: bool) -> Result<Option<PathBuf>> {
    if resume {
        let latest = out.join(LATEST_CHECKPOINT);
        if !latest.exists() {
            return Err(usage(format!("--resume: no checkpoint at {}", latest.display())));
        }
        return Ok(Some(latest));
    }
    claim_output(out, force)?;
    Ok(None)
}

/// Loss curves (total, flow, identity) from a run's log.
fn plot_losses(dir: &Path) -> Result<()> {
    let log = read_log(dir)?;
    if log.is_empty() {
        return Ok(());
    }
    let pick = |f: fn(&swapflow::training::LogRecord) -> f64| -> Vec<(f64, f64)> {
        log.iter().map(|r| (r.step as f64, f(r))).collect()
    };
    plots::line_chart(
        &dir.join("loss.png"),
        &[pick(|r| r.loss.total), pick(|r| r.loss.flow_loss), pick(|r| r.loss.id_loss)],
    )
}

pub fn train_teacher(root: &Path, a: cli::TrainTeacher) -> Result<()> {
    let out = resolve(root, &a.out);
    let mut cfg: TeacherConfig = match &a.config {
        Some(p) => load_config(&resolve(root, p))?,
        None => TeacherConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let resume = training_dir(&out, a.resume, a.force)?;
    let dataset = load_dataset(&resolve(root, &a.data))?;
    let (enc, hash) = load_encoder(&resolve(root, &a.instruments.encoder), None)?;
    let summary = training::train_teacher(&dataset, &enc, &hash, &cfg, &out, resume.as_deref())?;
    plot_losses(&out)?;
    println!(
        "teacher: {} steps this run, final checkpoint {}",
        summary.losses.len(),
        summary.final_checkpoint.display()
    );
    Ok(())
}

pub fn train_student(root: &Path, a: cli::TrainStudent) -> Result<()> {
    let out = resolve(root, &a.out);
    let mut cfg: StudentConfig = match &a.config {
        Some(p) => load_config(&resolve(root, p))?,
        None => StudentConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.perceptual {
        cfg.perceptual_loss_enabled = true;
    }
    cfg.validate()?;
    let teacher = LoadedModel::load(&resolve(root, &a.teacher))?;
    teacher.teacher_config()?;
    let resume = training_dir(&out, a.resume, a.force)?;
    let (enc, hash) = load_encoder(&resolve(root, &a.instruments.encoder), Some(&teacher.info.encoder_hash))?;
    let teacher_hash = nn::file_hash(&teacher.path)?;
    let store = TripletStore::load(&resolve(root, &a.triplets), Some(&teacher_hash))?;
    let summary = training::train_student(&teacher.path, &store, &enc, &hash, &cfg, &out, resume.as_deref())?;
    plot_losses(&out)?;
    println!(
        "student: {} steps this run, final checkpoint {}",
        summary.losses.len(),
        summary.final_checkpoint.display()
    );
    Ok(())
}

pub fn build_triplets(root: &Path, a: cli::BuildTriplets) -> Result<()> {
    let out = resolve(root, &a.out);
    let occluded_out = PathBuf::from(format!("{}_occluded", out.display()));
    if let Some(f) = a.occlusion_fraction {
        if !(0.0..=1.0).contains(&f) {
            return Err(usage(format!("--occlusion-fraction {f} is outside [0, 1]")));
        }
    }
    let teacher = LoadedModel::load(&resolve(root, &a.teacher))?;
    let tcfg = teacher.teacher_config()?;
    claim_output(&out, a.common.force)?;
    if a.occlusion_fraction.is_some() {
        claim_output(&occluded_out, a.common.force)?;
    }
    let (enc, _) = load_encoder(&resolve(root, &a.instruments.encoder), Some(&teacher.info.encoder_hash))?;
    let dataset = load_dataset(&resolve(root, &a.data))?;
    let cfg = TripletConfig {
        degradation: tcfg.degradation,
        overlays: tcfg.overlays(),
        inversion_mode: a.inversion,
        steps: a.steps,
        seed: a.common.seed,
        quality_gate: !a.no_quality_gate,
        ..TripletConfig::default()
    };
    let hash = nn::file_hash(&teacher.path)?;
    let store = build_triplet_set(&teacher.model, &hash, &enc, &dataset, a.n, &cfg, &out)?;
    println!(
        "{} triplets ({:?}, first-attempt pass rate {:.2}) -> {}",
        store.len(),
        store.meta.status,
        store.meta.first_attempt_pass_rate,
        out.display()
    );
    if let Some(f) = a.occlusion_fraction {
        let occ = augment_with_occlusion(&store, f, a.common.seed, &occluded_out)?;
        println!("{} occlusion-augmented triplets -> {}", occ.len(), occluded_out.display());
    }
    Ok(())
}

fn model_settings(model: &LoadedModel, inversion: swapflow::evaluation::InversionMode, steps: usize, seed: u64) -> Result<SwapSettings> {
    Ok(SwapSettings {
        inversion,
        steps,
        seed,
        ..model.swap_settings()?
    })
}

pub fn swap(root: &Path, a: cli::Swap) -> Result<()> {
    let out = resolve(root, &a.out);
    claim_output(&out, a.common.force)?;
    let model = LoadedModel::load(&resolve(root, &a.model))?;
    let (enc, _) = load_encoder(&resolve(root, &a.instruments.encoder), Some(&model.info.encoder_hash))?;
    let res = model.model.config().resolution;
    let src = load_image(&resolve(root, &a.src), res)?;
    let tgt = load_image(&resolve(root, &a.tgt), res)?;
    if model.needs_annotations() && !tgt.annotated {
        return Err(usage(
            "a teacher needs the target's face mask and keypoints; pass a PNG from a dataset's images/ folder",
        ));
    }
    let settings = model_settings(&model, a.inversion, a.steps, a.common.seed)?;
    let img = swap_pair(&model.model, &enc, &src.render, &tgt.render, &settings)?;
    ensure_parent(&out)?;
    img.save_png(&out)?;
    println!("swapped image -> {}", out.display());
    Ok(())
}

pub fn invert(root: &Path, a: cli::Invert) -> Result<()> {
    let out = resolve(root, &a.out);
    claim_output(&out, a.common.force)?;
    let model = LoadedModel::load(&resolve(root, &a.model))?;
    let (enc, _) = load_encoder(&resolve(root, &a.instruments.encoder), Some(&model.info.encoder_hash))?;
    let img = load_image(&resolve(root, &a.image), model.model.config().resolution)?;
    if model.needs_annotations() && !img.annotated && a.mode.uses_attribute() {
        return Err(usage(
            "a teacher needs the image's face mask and keypoints; pass a PNG from a dataset's images/ folder",
        ));
    }
    let condition = model.swap_settings()?.condition;
    let grid = TimeGrid::new(a.steps)?;
    let z = swapflow::analysis::invert_targets(&model.model, &enc, &[&img.render], condition, a.mode, grid)?;
    ensure_parent(&out)?;
    z.save_safetensors("noise", &out)?;
    println!("noise {:?} -> {}", z.dims(), out.display());
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!(
        "id similarity {:.4} | top-1 {:.1}% top-5 {:.1}% (chance {:.1}%) | attribute error {:.4} | fid {}",
        r.id_similarity_mean,
        r.retrieval_top1,
        r.retrieval_top5,
        r.retrieval_chance_top1,
        r.mean_attribute_error,
        r.feature_fid.map_or("n/a".to_string(), |f| format!("{f:.3}"))
    );
}

pub fn eval(root: &Path, a: cli::Eval) -> Result<()> {
    let model_path = resolve(root, &a.model);
    let model = LoadedModel::load(&model_path)?;
    let dir = match &a.out {
        Some(p) => resolve(root, p),
        None => run_dir(&model_path).join(format!("eval_s{}", a.common.seed)),
    };
    claim_output(&dir, a.common.force)?;
    let (enc, _) = load_encoder(&resolve(root, &a.instruments.encoder), Some(&model.info.encoder_hash))?;
    let probe = AttributeProbe::load(&resolve(root, &a.probe), &Device::Cpu)?;
    let dataset = load_dataset(&resolve(root, &a.data))?;
    let cfg = EvalConfig {
        n_pairs: a.pairs,
        seed: a.common.seed,
        swap: model_settings(&model, a.inversion, a.steps, a.common.seed)?,
    };
    let out = evaluate_protocol(&model.model, &enc, &probe, &dataset, &cfg)?;
    write_eval_output(&out, &dataset, &dir, a.grid_rows)?;
    print_report(&out.report);
    println!("report -> {}", dir.join(REPORT_FILE).display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationRow {
    degradation: String,
    id_similarity: f64,
    retrieval_top1: f64,
    retrieval_top5: f64,
    mean_attribute_error: f64,
    feature_fid: Option<f64>,
    report: String,
}

#[derive(Debug, Serialize)]
struct AblationTable {
    n_pairs: usize,
    seed: u64,
    steps: usize,
    rows: Vec<AblationRow>,
}

pub fn ablate_degradation(root: &Path, a: cli::AblateDegradation) -> Result<()> {
    let out = resolve(root, &a.out);
    // An existing sweep directory is reused so an interrupted sweep resumes;
    // --force starts over.
    if a.common.force {
        claim_output(&out, true)?;
    }
    let base: TeacherConfig = match &a.config {
        Some(p) => load_config(&resolve(root, p))?,
        None => TeacherConfig::default(),
    };
    let specs = a.specs.clone().unwrap_or_else(DegradationSpec::ablation_grid);
    if specs.is_empty() {
        return Err(usage("--specs is empty"));
    }
    let (enc, hash) = load_encoder(&resolve(root, &a.instruments.encoder), None)?;
    let probe = AttributeProbe::load(&resolve(root, &a.probe), &Device::Cpu)?;
    let train = load_dataset(&resolve(root, &a.data))?;
    let eval_set = load_dataset(&resolve(root, &a.eval_data))?;

    let mut rows = Vec::with_capacity(specs.len());
    for spec in &specs {
        let slug = spec.to_string().replace(':', "-");
        let cfg = TeacherConfig {
            degradation: *spec,
            seed: a.common.seed,
            ..base.clone()
        };
        cfg.validate()?;
        let tdir = out.join(&slug).join("teacher");
        let ckpt = tdir.join(FINAL_CHECKPOINT);
        if !ckpt.exists() {
            let latest = tdir.join(LATEST_CHECKPOINT);
            let resume = latest.exists().then_some(latest);
            info!("training teacher for {spec}");
            training::train_teacher(&train, &enc, &hash, &cfg, &tdir, resume.as_deref())?;
            plot_losses(&tdir)?;
        }
        let settings = SwapSettings {
            steps: a.steps,
            seed: a.common.seed,
            ..LoadedModel::load(&ckpt)?.swap_settings()?
        };
        let edir = out.join(&slug).join("eval");
        let report_file = edir.join(REPORT_FILE);
        let cached = report_file
            .exists()
            .then(|| EvalReport::load(&report_file))
            .transpose()?
            .filter(|r| {
                r.n_pairs == a.pairs
                    && r.seed == a.common.seed
                    && r.settings == swapflow::evaluation::protocol::settings_label(&settings)
            });
        let report = match cached {
            Some(r) => r,
            None => {
                let (model, _) = VelocityModel::load(&ckpt, &Device::Cpu, candle_core::DType::F32)?;
                let ecfg = EvalConfig {
                    n_pairs: a.pairs,
                    seed: a.common.seed,
                    swap: settings,
                };
                info!("evaluating teacher for {spec}");
                let o = evaluate_protocol(&model, &enc, &probe, &eval_set, &ecfg)?;
                write_eval_output(&o, &eval_set, &edir, 8)?;
                o.report
            }
        };
        print!("{spec:>16}: ");
        print_report(&report);
        rows.push(AblationRow {
            degradation: spec.to_string(),
            id_similarity: report.id_similarity_mean,
            retrieval_top1: report.retrieval_top1,
            retrieval_top5: report.retrieval_top5,
            mean_attribute_error: report.mean_attribute_error,
            feature_fid: report.feature_fid,
            report: format!("{slug}/eval/{REPORT_FILE}"),
        });
    }
    let table = AblationTable {
        n_pairs: a.pairs,
        seed: a.common.seed,
        steps: a.steps,
        rows,
    };
    write_toml(&out.join("ablation.toml"), &table)?;
    let mut csv = csv::Writer::from_path(out.join("ablation.csv"))?;
    for r in &table.rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    let bars: Vec<Vec<f64>> = table
        .rows
        .iter()
        .map(|r| {
            vec![
                r.id_similarity,
                r.retrieval_top1,
                r.mean_attribute_error,
                r.feature_fid.unwrap_or(f64::NAN),
            ]
        })
        .collect();
    plots::grouped_bars(&out.join("ablation.png"), &bars)?;
    println!("ablation table ({} rows) -> {}", table.rows.len(), out.join("ablation.toml").display());
    Ok(())
}

fn parse_modes(s: &str) -> Result<Vec<ConditioningMode>> {
    if s.trim() == "all" {
        return Ok(ConditioningMode::ALL.to_vec());
    }
    let modes = s
        .split(',')
        .map(|m| m.trim().parse::<ConditioningMode>())
        .collect::<swapflow::Result<Vec<_>>>()?;
    if modes.is_empty() {
        return Err(usage("--modes is empty"));
    }
    Ok(modes)
}

pub fn analyze_noise(root: &Path, a: cli::AnalyzeNoise) -> Result<()> {
    let modes = parse_modes(&a.modes)?;
    let model_path = resolve(root, &a.model);
    let model = LoadedModel::load(&model_path)?;
    let dir = match &a.out {
        Some(p) => resolve(root, p),
        None => run_dir(&model_path).join(format!("noise_s{}", a.common.seed)),
    };
    claim_output(&dir, a.common.force)?;
    let (enc, _) = load_encoder(&resolve(root, &a.instruments.encoder), Some(&model.info.encoder_hash))?;
    let dataset = load_dataset(&resolve(root, &a.data))?;
    let condition = model.swap_settings()?.condition;
    let cmp = compare_inversion_modes(
        &model.model,
        &enc,
        &dataset,
        condition,
        &modes,
        TimeGrid::new(a.steps)?,
        a.n,
        a.common.seed,
        a.mc_trials,
    )?;
    cmp.write(&dir)?;
    let spectra: Vec<Vec<(f64, f64)>> = cmp
        .rows
        .iter()
        .map(|r| {
            r.stats
                .explained_variance_ratios
                .iter()
                .take(20)
                .enumerate()
                .map(|(i, v)| ((i + 1) as f64, *v))
                .collect()
        })
        .collect();
    plots::line_chart(&dir.join("spectrum.png"), &spectra)?;
    for r in &cmp.rows {
        println!(
            "{:>16}: structure {:.4}  excess kurtosis {:+.3}  std {:.3}",
            r.label, r.stats.structure_score, r.stats.marginal_kurtosis, r.stats.marginal_std
        );
    }
    println!(
        "gaussian reference {:.4} +/- {:.4}; baseline within 2 sigma: {}",
        cmp.gaussian_reference.mean, cmp.gaussian_reference.std, cmp.baseline_within_two_sigma
    );
    println!("report -> {}", dir.display());
    Ok(())
}

fn load_scale(root: &Path, s: &str) -> Result<BenchmarkScale> {
    Ok(match s {
        "reduced" => BenchmarkScale::reduced(),
        "full" => BenchmarkScale::full(),
        path => {
            let p = resolve(root, Path::new(path));
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
    })
}

#[derive(Debug, Serialize)]
struct BenchmarkSummary {
    scale: String,
    seeds: Vec<u64>,
    trends: HashMap<String, TrendOutcome>,
    passed: HashMap<String, bool>,
}

pub fn benchmark(root: &Path, a: cli::Benchmark) -> Result<()> {
    let mut scale = load_scale(root, &a.scale)?;
    if let Some(seeds) = a.seeds {
        scale.seeds = seeds;
    }
    if let Some(s) = a.seed {
        scale.dataset_seed = s;
    }
    let trends = a.trends.unwrap_or_else(|| TRENDS.iter().map(|s| s.to_string()).collect());
    if let Some(bad) = trends.iter().find(|t| !TRENDS.contains(&t.as_str())) {
        return Err(usage(format!("unknown trend {bad:?} (expected one of {})", TRENDS.join(", "))));
    }
    let out = resolve(root, &a.out);
    let mut harness = Harness::open(&out, scale.clone())?;
    let mut summary = BenchmarkSummary {
        scale: scale.name.clone(),
        seeds: scale.seeds.clone(),
        trends: HashMap::new(),
        passed: HashMap::new(),
    };
    for key in &trends {
        let outcome = harness.run_trend(key)?;
        println!(
            "trend {key} [{}] {}: {}",
            outcome.name,
            if outcome.passed() { "PASS" } else { "FAIL" },
            outcome.summary()
        );
        summary.passed.insert(key.clone(), outcome.passed());
        summary.trends.insert(key.clone(), outcome);
        // Rewritten after every trend so partial progress is visible.
        write_toml(&out.join("summary.toml"), &summary)?;
    }
    Ok(())
}
