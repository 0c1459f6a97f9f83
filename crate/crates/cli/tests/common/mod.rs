//! Shared fixture: a tiny experiment driven through the binary.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use candle_core::Device;
use swapflow::conditioning::{EncoderConfig, IdentityEncoder};
use swapflow::evaluation::{AttributeProbe, ProbeConfig};
use swapflow::nn;

pub const TEACHER_TOML: &str = "\
phase1_steps = 3
phase2_steps = 2
batch_size = 4
base_channels = 8
channel_mult = [1, 2]
emb_width = 16
lr = 1e-3
checkpoint_every = 2
log_every = 1
id_gate_fraction = 0.6
";

pub const STUDENT_TOML: &str = "\
steps = 2
batch_size = 2
checkpoint_every = 1
log_every = 1
";

pub fn swapflow(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swapflow"))
        .arg("--exp-root")
        .arg(root)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn swapflow")
}

pub fn ok(root: &Path, args: &[&str]) -> String {
    let out = swapflow(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn code(root: &Path, args: &[&str]) -> i32 {
    swapflow(root, args).status.code().expect("exit code")
}

pub fn save_untrained_instruments(root: &Path) {
    let dev = Device::Cpu;
    let ecfg = EncoderConfig {
        resolution: 32,
        embed_dim: 8,
        base_channels: 4,
        num_classes: 4,
    };
    let (enc, vm) = IdentityEncoder::new_trainable(&ecfg, 11, &dev).unwrap();
    let meta = enc.checkpoint_meta(&vm, serde_json::Value::Null).unwrap();
    nn::save_checkpoint(&root.join("checkpoints/encoder.safetensors"), &meta, &nn::varmap_tensors(&vm)).unwrap();
    let pcfg = ProbeConfig {
        resolution: 32,
        base_channels: 4,
    };
    let (probe, vm) = AttributeProbe::new_trainable(&pcfg, 3, &dev).unwrap();
    let meta = probe.checkpoint_meta(&vm, serde_json::Value::Null).unwrap();
    nn::save_checkpoint(&root.join("checkpoints/probe.safetensors"), &meta, &nn::varmap_tensors(&vm)).unwrap();
}

/// Datasets, instruments, a teacher, triplets and a student, built once.
pub fn experiment() -> &'static Path {
    static ROOT: OnceLock<tempfile::TempDir> = OnceLock::new();
    ROOT.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for split in ["train", "eval"] {
            let out = format!("datasets/{split}");
            ok(root, &["gen-data", "--identities", "4", "--per-identity", "3", "--res", "32", "--seed", "5", "--split", split, "--out", &out]);
        }
        save_untrained_instruments(root);
        fs::write(root.join("teacher.toml"), TEACHER_TOML).unwrap();
        fs::write(root.join("student.toml"), STUDENT_TOML).unwrap();
        ok(root, &["train-teacher", "--config", "teacher.toml", "--out", "runs/teacher"]);
        ok(root, &["build-triplets", "--teacher", "runs/teacher", "--n", "4", "--steps", "2", "--no-quality-gate", "--occlusion-fraction", "0.5", "--out", "triplets/t"]);
        ok(root, &["train-student", "--config", "student.toml", "--teacher", "runs/teacher", "--triplets", "triplets/t", "--out", "runs/student"]);
        dir
    })
    .path()
}

pub fn bytes(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

pub fn fresh_root() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

/// One rerun case: subcommand args, output flag, tag and files to compare
/// (an empty name compares the output file itself).
pub struct RerunCase {
    pub args: Vec<&'static str>,
    pub out_flag: &'static str,
    pub tag: &'static str,
    pub files: Vec<&'static str>,
}

/// Every subcommand except `benchmark`, against the [`experiment`] fixture.
pub fn rerun_cases() -> Vec<RerunCase> {
    let case = |args: &[&'static str], out_flag, tag, files: &[&'static str]| RerunCase {
        args: args.to_vec(),
        out_flag,
        tag,
        files: files.to_vec(),
    };
    vec![
        case(&["gen-data", "--identities", "2", "--per-identity", "2", "--res", "32", "--seed", "9"], "--out", "gen", &["manifest.jsonl", "dataset.json"]),
        case(&["train-id-encoder", "--steps", "2", "--batch-size", "4", "--min-accuracy", "0"], "--out", "enc", &[""]),
        case(&["train-probes", "--res", "32", "--steps", "2", "--batch-size", "4", "--min-r2=-1e9"], "--out", "probe", &[""]),
        case(&["train-teacher", "--config", "teacher.toml", "--seed", "1"], "--out", "teacher", &["final.safetensors", "config.toml"]),
        case(&["build-triplets", "--teacher", "runs/teacher", "--n", "3", "--steps", "2", "--no-quality-gate", "--seed", "2"], "--out", "trip", &["manifest.jsonl", "store.json"]),
        case(&["train-student", "--config", "student.toml", "--teacher", "runs/teacher", "--triplets", "triplets/t_occluded", "--perceptual"], "--out", "student", &["final.safetensors"]),
        case(&["swap", "--model", "runs/teacher", "--src", "datasets/eval/images/000001.png", "--tgt", "datasets/eval/images/000007.png", "--inversion", "fresh_noise", "--steps", "2", "--seed", "3"], "--out", "swap.png", &[""]),
        case(&["invert", "--model", "runs/student", "--image", "datasets/eval/images/000002.png", "--steps", "2"], "--out", "z.safetensors", &[""]),
        case(&["eval", "--model", "runs/teacher", "--pairs", "8", "--steps", "2", "--grid-rows", "2", "--seed", "3"], "--out", "eval", &["report.toml", "grid.png"]),
        case(&["analyze-noise", "--model", "runs/teacher", "--n", "8", "--steps", "2", "--mc-trials", "5"], "--out", "noise", &["noise_report.toml"]),
        case(&["ablate-degradation", "--config", "teacher.toml", "--specs", "none,masking", "--pairs", "4", "--steps", "2"], "--out", "abl", &["ablation.toml", "ablation.csv"]),
    ]
}

/// Run a case twice into `<prefix>/a/<tag>` and `<prefix>/b/<tag>` and
/// compare the listed files byte for byte.
pub fn rerun_matches(root: &Path, case: &RerunCase, prefix: &str) -> Result<(), String> {
    let outs = [format!("{prefix}/a/{}", case.tag), format!("{prefix}/b/{}", case.tag)];
    for o in &outs {
        let mut args = case.args.clone();
        args.extend([case.out_flag, o.as_str()]);
        let out = swapflow(root, &args);
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    for f in &case.files {
        let pick = |o: &str| -> PathBuf {
            if f.is_empty() {
                root.join(o)
            } else {
                root.join(o).join(f)
            }
        };
        let (a, b) = (fs::read(pick(&outs[0])), fs::read(pick(&outs[1])));
        match (a, b) {
            (Ok(a), Ok(b)) if a == b => {}
            (Ok(_), Ok(_)) => return Err(format!("{} {f}: outputs differ", case.args[0])),
            (Err(e), _) | (_, Err(e)) => return Err(format!("{} {f}: {e}", case.args[0])),
        }
    }
    Ok(())
}
