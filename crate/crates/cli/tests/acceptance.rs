//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! The directional trend criteria (5-9, 10b) need a full benchmark run,
//! which costs days of single-core CPU time. They run only when
//! `SWAPFLOW_ACCEPTANCE_ROOT` names an experiment root (cached stages there
//! are reused); `SWAPFLOW_ACCEPTANCE_SCALE` picks `full` (default),
//! `reduced` or a scale TOML file.

mod common;

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use swapflow::conditioning::{
    make_bundle, BatchConditioning, ConditioningMode, EncoderConfig, IdentityEncoder,
};
use swapflow::degradation::{degrade, downsample_upsample, gaussian_blur, DegradationSpec};
use swapflow::evaluation::feature_fid;
use swapflow::experiment::{Benchmark, BenchmarkScale};
use swapflow::flowcore::{
    batch_conditioning, flow_target, interpolate, invert, predict_x0, sample, TimeGrid, VelocityConfig,
    VelocityField, VelocityModel,
};
use swapflow::nn;
use swapflow::pseudotriplet::{augment_with_occlusion, build_triplet_set, TripletConfig};
use swapflow::rng;
use swapflow::synthdata::{build_dataset, render, sample_attributes, sample_identity, Dataset, DatasetConfig, FaceSpec};
use swapflow::training::{
    combined_loss, id_loss, teacher_inputs, teacher_weights, LossWeights, TeacherConfig, TeacherData,
};
use swapflow::ImageTensor;

const ROOT_ENV: &str = "SWAPFLOW_ACCEPTANCE_ROOT";
const SCALE_ENV: &str = "SWAPFLOW_ACCEPTANCE_SCALE";

/// Pinned tolerances.
const X0_RECOVERY_TOL: f64 = 1e-6;
const X0_RECOVERY_CASES: usize = 1000;
const CONSTANT_FIELD_TOL: f64 = 1e-10;
const GRADIENT_REL_TOL: f64 = 1e-3;
const BLUR_TOL: f64 = 1e-6;
const FID_TOL: f64 = 1e-4;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

struct Outcome {
    id: &'static str,
    title: &'static str,
    verdict: Verdict,
    elapsed: Duration,
}

/// Runs a check and folds the runtime budget into its verdict.
fn run(id: &'static str, title: &'static str, budget: Option<Duration>, f: impl FnOnce() -> Verdict) -> Outcome {
    let start = Instant::now();
    let mut verdict = f();
    let elapsed = start.elapsed();
    if let (Some(b), Verdict::Pass(msg)) = (budget, &verdict) {
        if elapsed > b {
            verdict = Verdict::Fail(format!("{msg}; took {elapsed:.1?}, budget {b:?}"));
        }
    }
    let line = match &verdict {
        Verdict::Pass(m) => format!("[PASS] {id:>3} {title}: {m} ({elapsed:.1?})\n"),
        Verdict::Fail(m) => format!("[FAIL] {id:>3} {title}: {m} ({elapsed:.1?})\n"),
        Verdict::Skip(m) => format!("[SKIP] {id:>3} {title}: {m}\n"),
    };
    // Written straight to the stderr handle so the line survives output capture.
    let _ = std::io::stderr().write_all(line.as_bytes());
    Outcome {
        id,
        title,
        verdict,
        elapsed,
    }
}

fn verdict(failures: Vec<String>, summary: String) -> Verdict {
    if failures.is_empty() {
        Verdict::Pass(summary)
    } else {
        Verdict::Fail(failures.join("; "))
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

fn gaussian(shape: &[usize], seed: u64, tag: &str) -> Tensor {
    rng::gaussian_tensor(&mut rng::stream(seed, tag, 0), shape, &Device::Cpu, DType::F64).unwrap()
}

// ---------------------------------------------------------------- criterion 1

/// `v = a + tanh(z)`: a constant field when `curved` is false.
struct Field {
    offset: Tensor,
    curved: bool,
}

impl VelocityField for Field {
    fn velocity(&self, z: &Tensor, _t: &Tensor, _c: &BatchConditioning) -> swapflow::Result<Tensor> {
        let base = self.offset.broadcast_as(z.dims())?;
        Ok(if self.curved { (base + z.tanh()?)? } else { base })
    }
    fn embed_dim(&self) -> usize {
        4
    }
    fn resolution(&self) -> usize {
        8
    }
    fn dtype(&self) -> DType {
        DType::F64
    }
}

fn null_conditioning(field: &dyn VelocityField, batch: usize) -> BatchConditioning {
    let bundles: Vec<_> = (0..batch)
        .map(|_| make_bundle(None, None, ConditioningMode::None).unwrap())
        .collect();
    batch_conditioning(field, &bundles, &Device::Cpu).unwrap()
}

fn flow_algebra() -> Verdict {
    let mut failures = Vec::new();
    let shape = [2, 3, 8, 8];
    let (x0, eps) = (gaussian(&shape, 1, "x0"), gaussian(&shape, 1, "eps"));
    if max_abs_diff(&interpolate(&x0, &eps, 0.0).unwrap(), &x0) != 0.0
        || max_abs_diff(&interpolate(&x0, &eps, 1.0).unwrap(), &eps) != 0.0
    {
        failures.push("interpolation endpoints are not exact".into());
    }

    let mut r = rng::stream(2, "cases", 0);
    let mut worst: f64 = 0.0;
    for k in 0..X0_RECOVERY_CASES {
        let t: f64 = r.random();
        let (x, e) = (gaussian(&[1, 3, 4, 4], k as u64, "rx"), gaussian(&[1, 3, 4, 4], k as u64, "re"));
        let z = interpolate(&x, &e, t).unwrap();
        let v = flow_target(&x, &e).unwrap();
        worst = worst.max(max_abs_diff(&predict_x0(&z, &v, t).unwrap(), &x));
    }
    if worst >= X0_RECOVERY_TOL {
        failures.push(format!("x0 recovery error {worst:.2e}"));
    }

    let offset = gaussian(&[1, 3, 8, 8], 3, "offset");
    let constant = Field {
        offset: offset.clone(),
        curved: false,
    };
    let cond = null_conditioning(&constant, 2);
    let mut const_err: f64 = 0.0;
    for steps in [1, 7, 28] {
        let grid = TimeGrid::new(steps).unwrap();
        let x = sample(&constant, &eps, &cond, grid).unwrap().raw;
        // closed form: x0 = eps - a
        const_err = const_err.max(max_abs_diff(&x, &(&eps - offset.broadcast_as(&shape[..]).unwrap()).unwrap()));
        const_err = const_err.max(max_abs_diff(&invert(&constant, &x, &cond, grid).unwrap(), &eps));
    }
    if const_err >= CONSTANT_FIELD_TOL {
        failures.push(format!("constant-field round trip error {const_err:.2e}"));
    }

    let curved = Field {
        offset: (offset * 0.3).unwrap(),
        curved: true,
    };
    let img = (gaussian(&shape, 4, "img") * 0.5).unwrap();
    let errs: Vec<f64> = [7, 14, 28, 56]
        .iter()
        .map(|&s| {
            let grid = TimeGrid::new(s).unwrap();
            let z = invert(&curved, &img, &cond, grid).unwrap();
            max_abs_diff(&sample(&curved, &z, &cond, grid).unwrap().raw, &img)
        })
        .collect();
    if !errs.windows(2).all(|w| w[1] < w[0]) {
        failures.push(format!("round-trip error not decreasing in steps: {errs:?}"));
    }
    verdict(
        failures,
        format!(
            "x0 max err {worst:.1e} over {X0_RECOVERY_CASES} cases, constant field {const_err:.1e}, round trip 7/14/28/56 = {:.2e}/{:.2e}/{:.2e}/{:.2e}",
            errs[0], errs[1], errs[2], errs[3]
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn tiny_dataset(dir: &Path, n_ids: u32, per_id: u32) -> Dataset {
    build_dataset(
        &DatasetConfig {
            identity_count: n_ids,
            images_per_identity: per_id,
            resolution: 32,
            seed: 5,
            split: Default::default(),
        },
        dir,
    )
    .unwrap();
    Dataset::load(dir).unwrap()
}

fn tiny_encoder(dtype: DType) -> IdentityEncoder {
    let cfg = EncoderConfig {
        resolution: 32,
        embed_dim: 8,
        base_channels: 4,
        num_classes: 4,
    };
    let (_, vm) = IdentityEncoder::new_trainable(&cfg, 11, &Device::Cpu).unwrap();
    let t = nn::varmap_tensors(&vm).into_iter().collect();
    IdentityEncoder::from_tensors(&cfg, &t, &Device::Cpu, dtype).unwrap()
}

fn tiny_model(dtype: DType) -> (VelocityModel, Vec<(String, Var)>) {
    let cfg = VelocityConfig {
        resolution: 32,
        embed_dim: 8,
        base_channels: 8,
        channel_mult: vec![1, 2, 2],
        emb_width: 16,
    };
    let (m, vm) = VelocityModel::new_trainable(&cfg, 1, &Device::Cpu, dtype).unwrap();
    let vars = nn::sorted_vars(&vm);
    // zero-initialized output layer makes every gradient upstream vanish
    let (_, out) = vars.iter().find(|(n, _)| n == "zero_out.weight").unwrap();
    let noise = rng::gaussian_tensor(&mut rng::stream(1, "perturb", 0), out.dims(), &Device::Cpu, dtype).unwrap();
    out.set(&(noise * 0.05).unwrap()).unwrap();
    (m, vars)
}

fn gradient_checks() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 4, 3);
    let enc32 = tiny_encoder(DType::F32);
    let enc = tiny_encoder(DType::F64);
    let (m, vars) = tiny_model(DType::F64);
    let data = TeacherData::new(&ds, &enc32).unwrap();
    let cfg = TeacherConfig {
        id_gate_fraction: 1.0,
        condition_dropout: 0.0,
        ..Default::default()
    };
    let pairs = data.pairs(&data.sample_pairs(0, 0, 3));
    let inputs = teacher_inputs(&m, &pairs, &cfg, &mut rng::stream(0, "t", 0)).unwrap();
    let with_id = teacher_weights(&cfg, 2);
    let flow_only = LossWeights {
        use_id: false,
        ..with_id
    };

    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for (label, weights) in [("flow", flow_only), ("flow+id", with_id)] {
        let loss = || combined_loss(&m, Some(&enc), &inputs, &weights).unwrap();
        let (l, rep) = loss();
        if label == "flow+id" && rep.id_loss <= 0.0 {
            failures.push("identity term inactive inside the gate".into());
        }
        let grads = l.backward().unwrap();
        for name in ["down0.conv1.weight", "id_proj.weight", "zero_out.weight"] {
            let var = &vars.iter().find(|(n, _)| n == name).unwrap().1;
            let probe = gaussian(var.dims(), 3, name);
            let analytic = (grads.get(var.as_tensor()).unwrap() * &probe)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            let base = var.as_tensor().copy().unwrap();
            let h = 1e-5;
            var.set(&(&base + (&probe * h).unwrap()).unwrap()).unwrap();
            let lp = loss().1.total;
            var.set(&(&base - (&probe * h).unwrap()).unwrap()).unwrap();
            let lm = loss().1.total;
            var.set(&base).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-300);
            worst = worst.max(rel);
            if rel >= GRADIENT_REL_TOL {
                failures.push(format!("{label} {name}: analytic {analytic:.6e} vs numeric {numeric:.6e}"));
            }
        }
    }

    let x = ImageTensor::stack(&[&ds.renders[0].image], &Device::Cpu, DType::F64).unwrap();
    let e = enc.embed_tensor(&x).unwrap().neg().unwrap();
    for t in [0.36, 0.5, 0.9, 1.0] {
        let v = id_loss(&enc, &x, &e, t, 0.35).unwrap();
        if v != 0.0 {
            failures.push(format!("id loss {v} at t = {t} above gate 0.35"));
        }
    }
    if id_loss(&enc, &x, &e, 0.2, 0.35).unwrap() <= 0.0 {
        failures.push("id loss vanishes inside the gate".into());
    }
    verdict(failures, format!("worst relative error {worst:.1e}; id loss exactly 0 above the gate"))
}

// ---------------------------------------------------------------- criterion 3

fn quantized_face(index: u64) -> swapflow::synthdata::RenderOutput {
    let mut r = rng::stream(9, "acceptance-face", index);
    let spec = FaceSpec {
        identity: sample_identity(9, index as u32),
        attributes: sample_attributes(&mut r),
    };
    let mut out = render(&spec, 64).unwrap();
    out.image = out.image.quantized();
    out
}

fn box_oracle(img: &ImageTensor, n: usize) -> Vec<f32> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let (bh, bw) = (h / n, w / n);
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let (gy, gx) = (y / bh, x / bw);
            for ch in 0..c {
                let mut s = 0.0f64;
                for yy in gy * bh..(gy + 1) * bh {
                    for xx in gx * bw..(gx + 1) * bw {
                        s += f64::from(img.get(yy, xx, ch));
                    }
                }
                out[(y * w + x) * c + ch] = (s / (bh * bw) as f64) as f32;
            }
        }
    }
    out
}

fn degradation_exactness() -> Verdict {
    let mut failures = Vec::new();
    let faces: Vec<_> = (0..3).map(quantized_face).collect();
    for f in &faces {
        for n in [1, 2, 8, 16, 32, 64] {
            if downsample_upsample(&f.image, n).unwrap().data() != box_oracle(&f.image, n).as_slice() {
                failures.push(format!("downsample {n} differs from the box-average oracle"));
            }
        }
    }

    let mut blur_err: f64 = 0.0;
    for radius in [1usize, 2, 4, 8] {
        let side = 65;
        let c = side / 2;
        let mut impulse = ImageTensor::zeros(side, side, 1);
        impulse.set(c, c, 0, 1.0);
        let out = gaussian_blur(&impulse, radius).unwrap();
        let sigma = radius as f64 / 2.0;
        let half = (3.0 * sigma).ceil() as i64;
        let g = |d: i64| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
        let norm: f64 = (-half..=half).map(g).sum();
        for y in 0..side {
            for x in 0..side {
                let (dy, dx) = (y as i64 - c as i64, x as i64 - c as i64);
                let expect = if dy.abs() <= half && dx.abs() <= half {
                    g(dy) * g(dx) / (norm * norm)
                } else {
                    0.0
                };
                blur_err = blur_err.max((f64::from(out.get(y, x, 0)) - expect).abs());
            }
        }
    }
    if blur_err >= BLUR_TOL {
        failures.push(format!("blur impulse response error {blur_err:.2e}"));
    }

    let mut specs = DegradationSpec::ablation_grid();
    specs.push(DegradationSpec::gaussian_blur(3));
    for f in &faces {
        for &spec in &specs {
            let d = degrade(&f.image, &f.face_mask, spec).unwrap();
            for y in 0..64 {
                for x in 0..64 {
                    if !f.face_mask.get(y, x) && d.pixel(y, x) != f.image.pixel(y, x) {
                        failures.push(format!("{spec} changed background pixel ({y},{x})"));
                    }
                }
            }
        }
    }
    failures.dedup();
    verdict(
        failures,
        format!("box oracle exact for 6 grids, blur impulse error {blur_err:.1e}, background untouched for {} specs", specs.len()),
    )
}

// ---------------------------------------------------------------- criterion 4

/// Column `j` of the Sylvester Hadamard matrix of order `n`.
fn hadamard(n: usize, j: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if (i & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 })
        .collect()
}

/// `n` samples whose mean is `mu` and unbiased covariance is `l lᵀ`, exactly.
fn exact_samples(n: usize, mu: &[f64], l: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = mu.len();
    let scale = ((n - 1) as f64 / n as f64).sqrt();
    let cols: Vec<Vec<f64>> = (1..=d).map(|j| hadamard(n, j)).collect();
    (0..n)
        .map(|i| {
            (0..d)
                .map(|r| mu[r] + (0..d).map(|k| l[r][k] * cols[k][i] * scale).sum::<f64>())
                .collect()
        })
        .collect()
}

fn fid_oracle() -> Verdict {
    let mut failures = Vec::new();
    let n = 128;
    // diagonal covariances: |Δμ|² + Σ(σ1 − σ2)²
    let (mu1, mu2) = (vec![0.5, -1.0, 2.0, 0.0], vec![1.5, -1.0, 0.0, 0.25]);
    let (s1, s2) = ([1.0, 2.0, 0.5, 3.0], [2.0, 1.0, 0.5, 1.0]);
    let diag = |s: &[f64; 4]| -> Vec<Vec<f64>> {
        (0..4).map(|r| (0..4).map(|k| if r == k { s[r] } else { 0.0 }).collect()).collect()
    };
    let (a, b) = (exact_samples(n, &mu1, &diag(&s1)), exact_samples(n, &mu2, &diag(&s2)));
    let expect: f64 = mu1.iter().zip(&mu2).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        + s1.iter().zip(&s2).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let got = feature_fid(&a, &b).unwrap();
    let diag_err = (got - expect).abs();

    // correlated 2-D case: tr √(Σ1Σ2) = √(tr(Σ1Σ2) + 2√det(Σ1Σ2))
    let l1 = vec![vec![1.0, 0.0], vec![0.6, 0.8]];
    let l2 = vec![vec![2.0, 0.0], vec![-0.5, 0.7]];
    let cov = |l: &[Vec<f64>]| -> [[f64; 2]; 2] {
        let mut c = [[0.0; 2]; 2];
        for r in 0..2 {
            for q in 0..2 {
                c[r][q] = (0..2).map(|k| l[r][k] * l[q][k]).sum();
            }
        }
        c
    };
    let (c1, c2) = (cov(&l1), cov(&l2));
    let mut p = [[0.0; 2]; 2];
    for r in 0..2 {
        for q in 0..2 {
            p[r][q] = (0..2).map(|k| c1[r][k] * c2[k][q]).sum();
        }
    }
    let tr_sqrt = (p[0][0] + p[1][1] + 2.0 * (p[0][0] * p[1][1] - p[0][1] * p[1][0]).sqrt()).sqrt();
    let (m1, m2): (Vec<f64>, Vec<f64>) = (vec![0.0, 1.0], vec![0.5, -0.5]);
    let expect2 = (m1[0] - m2[0]).powi(2) + (m1[1] - m2[1]).powi(2) + c1[0][0] + c1[1][1] + c2[0][0] + c2[1][1]
        - 2.0 * tr_sqrt;
    let (a2, b2) = (exact_samples(n, &m1, &l1), exact_samples(n, &m2, &l2));
    let got2 = feature_fid(&a2, &b2).unwrap();
    let corr_err = (got2 - expect2).abs();
    for (label, err) in [("diagonal", diag_err), ("correlated", corr_err)] {
        if err >= FID_TOL {
            failures.push(format!("{label} closed form off by {err:.2e}"));
        }
    }

    let mut r = rng::stream(4, "fid-sets", 0);
    let rand_set = |r: &mut rng::Rng, n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..6).map(|_| r.random::<f64>()).collect()).collect()
    };
    let (x, y) = (rand_set(&mut r, 90), rand_set(&mut r, 70));
    let self_fid = feature_fid(&x, &x).unwrap();
    if self_fid.abs() >= FID_TOL {
        failures.push(format!("identical sets give {self_fid:.2e}"));
    }
    let (xy, yx) = (feature_fid(&x, &y).unwrap(), feature_fid(&y, &x).unwrap());
    if xy != yx {
        failures.push(format!("asymmetric: {xy} vs {yx}"));
    }
    verdict(
        failures,
        format!("closed-form error {diag_err:.1e} / {corr_err:.1e}, self {self_fid:.1e}, symmetric"),
    )
}

// --------------------------------------------------------------- criterion 10a

fn occlusion_preservation() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(&dir.path().join("ds"), 4, 3);
    let enc = tiny_encoder(DType::F32);
    let (m, _) = tiny_model(DType::F32);
    let cfg = TripletConfig {
        steps: 2,
        quality_gate: false,
        ..Default::default()
    };
    let store = build_triplet_set(&m, "untrained", &enc, &ds, 8, &cfg, &dir.path().join("t")).unwrap();
    let occ = augment_with_occlusion(&store, 0.5, 3, &dir.path().join("o")).unwrap();
    let mut failures = Vec::new();
    let mut occluded = 0;
    let mut checked = 0usize;
    for (o, orig) in occ.triplets.iter().zip(&store.triplets) {
        let Some(mask) = &o.occlusion_mask else {
            if o != orig {
                failures.push("unoccluded triplet changed".into());
            }
            continue;
        };
        occluded += 1;
        for y in 0..32 {
            for x in 0..32 {
                if mask.get(y, x) {
                    continue;
                }
                checked += 1;
                if o.target_image.pixel(y, x) != orig.target_image.pixel(y, x)
                    || o.swapped_image.pixel(y, x) != orig.swapped_image.pixel(y, x)
                    || o.source_image.pixel(y, x) != orig.source_image.pixel(y, x)
                {
                    failures.push(format!("pixel ({y},{x}) outside the occluder changed"));
                }
            }
        }
    }
    if occluded != 4 {
        failures.push(format!("{occluded} of 8 triplets occluded, expected 4"));
    }
    failures.dedup();
    verdict(failures, format!("{occluded} occluded triplets, {checked} outside pixels identical"))
}

// ---------------------------------------------------------------- criterion 11

fn tiny_scale() -> BenchmarkScale {
    let mut s = BenchmarkScale::reduced();
    s.name = "acceptance-tiny".into();
    s.identity_count = 4;
    s.images_per_identity = 4;
    s.resolution = 32;
    s.encoder.steps = 2;
    s.encoder.batch_size = 4;
    s.encoder.base_channels = 4;
    s.encoder.val_per_identity = 2;
    s.encoder.min_accuracy = 0.0;
    s.probe.steps = 2;
    s.probe.batch_size = 4;
    s.probe.base_channels = 4;
    s.probe.val_size = 16;
    s.probe.min_r2 = -1e9;
    s.teacher.phase1_steps = 1;
    s.teacher.phase2_steps = 1;
    s.teacher.batch_size = 2;
    s.teacher.base_channels = 8;
    s.teacher.channel_mult = vec![1, 2];
    s.teacher.emb_width = 16;
    s.sampling_steps = 2;
    s.seeds = vec![0];
    s
}

fn pipeline_determinism() -> Verdict {
    let root = common::experiment();
    let mut failures = Vec::new();
    let cases = common::rerun_cases();
    for case in &cases {
        if let Err(e) = common::rerun_matches(root, case, "acceptance") {
            failures.push(e);
        }
    }
    // the benchmark subcommand on a tiny scale, one trend
    std::fs::write(root.join("tiny_scale.toml"), toml::to_string(&tiny_scale()).unwrap()).unwrap();
    let bench = common::RerunCase {
        args: vec!["benchmark", "--scale", "tiny_scale.toml", "--trends", "a"],
        out_flag: "--out",
        tag: "bench",
        files: vec!["summary.toml", "reports/teacher_downsample-8_gate035_attribute_only_s0.toml"],
    };
    if let Err(e) = common::rerun_matches(root, &bench, "acceptance") {
        failures.push(e);
    }
    verdict(failures, format!("{} subcommands rerun byte-identical", cases.len() + 1))
}

// ------------------------------------------------------------ trend criteria

fn trend_scale() -> Result<BenchmarkScale, String> {
    match std::env::var(SCALE_ENV).as_deref() {
        Err(_) | Ok("full") => Ok(BenchmarkScale::full()),
        Ok("reduced") => Ok(BenchmarkScale::reduced()),
        Ok(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
            toml::from_str(&text).map_err(|e| format!("{path}: {e}"))
        }
    }
}

fn trend(bench: &mut Option<Result<Benchmark, String>>, key: &str) -> Verdict {
    let Ok(root) = std::env::var(ROOT_ENV) else {
        return Verdict::Skip(format!(
            "needs the full benchmark (days of CPU); set {ROOT_ENV} to an experiment root to run"
        ));
    };
    let b = bench.get_or_insert_with(|| {
        trend_scale().and_then(|s| Benchmark::open(Path::new(&root), s).map_err(|e| e.to_string()))
    });
    let b = match b {
        Ok(b) => b,
        Err(e) => return Verdict::Fail(e.clone()),
    };
    match b.run_trend(key) {
        Ok(o) if o.passed() => Verdict::Pass(format!("[{}] {}", b.scale.name, o.summary())),
        Ok(o) => Verdict::Fail(format!("[{}] {}", b.scale.name, o.summary())),
        Err(e) => Verdict::Fail(e.to_string()),
    }
}

#[test]
fn acceptance_criteria() {
    let min = |m: u64| Some(Duration::from_secs(60 * m));
    let mut outcomes = vec![
        run("1", "flow algebra", min(1), flow_algebra),
        run("2", "gradient checks", min(2), gradient_checks),
        run("3", "degradation exactness", min(1), degradation_exactness),
        run("4", "feature distance oracle", min(1), fid_oracle),
    ];
    let mut bench = None;
    for (id, title, key) in [
        ("5", "trend: deblurring beats masking", "a"),
        ("6", "trend: attribute-only inversion", "b"),
        ("7", "trend: degradation strength", "c"),
        ("8", "trend: student vs teacher", "d"),
        ("9", "trend: identity gate", "e"),
    ] {
        outcomes.push(run(id, title, None, || trend(&mut bench, key)));
    }
    outcomes.push(run("10a", "occlusion keeps outside pixels", None, occlusion_preservation));
    outcomes.push(run("10b", "trend: perceptual loss under occlusion", None, || trend(&mut bench, "occlusion")));
    outcomes.push(run("11", "pipeline determinism", None, pipeline_determinism));

    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| matches!(o.verdict, Verdict::Fail(_)))
        .map(|o| format!("{} {} ({:.1?})", o.id, o.title, o.elapsed))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
