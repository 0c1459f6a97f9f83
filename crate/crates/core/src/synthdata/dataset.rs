//! On-disk dataset: `images/{idx:06d}.png`, `masks/{idx:06d}.png`,
//! `manifest.jsonl` (one record per line) and `dataset.json` (build config).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::factors::{sample_attributes, sample_identity, FaceSpec};
use super::render::{render, validate_resolution, Keypoint, RenderOutput};
use crate::error::{Error, Result};
use crate::image::{load_mask_png, save_mask_png, ImageTensor};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub identity_count: u32,
    pub images_per_identity: u32,
    pub resolution: usize,
    pub seed: u64,
    #[serde(default)]
    pub split: Split,
}

/// Which attribute draws a dataset uses. Both splits share the identities
/// fixed by the seed; `Eval` redraws every attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

impl Split {
    fn stream_tag(self) -> &'static str {
        match self {
            Split::Train => "dataset-attributes",
            Split::Eval => "dataset-attributes-eval",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::config(format!("unknown split {s:?} (train|eval)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub index: usize,
    pub image: String,
    pub mask: String,
    pub spec: FaceSpec,
    pub keypoints: Vec<(String, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub records: Vec<DatasetRecord>,
}

/// The attribute draw for record `index` of a dataset seeded with `seed`.
pub fn record_spec(seed: u64, identity_id: u32, index: usize) -> FaceSpec {
    split_record_spec(seed, Split::Train, identity_id, index)
}

pub fn split_record_spec(seed: u64, split: Split, identity_id: u32, index: usize) -> FaceSpec {
    FaceSpec {
        identity: sample_identity(seed, identity_id),
        attributes: sample_attributes(&mut rng::stream(seed, split.stream_tag(), index as u64)),
    }
}

pub(crate) fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl DatasetManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(META_FILE), &self.config)?;
        write_lines(&dir.join(MANIFEST_FILE), &self.records)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: DatasetConfig = read_json(&dir.join(META_FILE))?;
        let records: Vec<DatasetRecord> = read_lines(&dir.join(MANIFEST_FILE))?;
        let expected = (config.identity_count * config.images_per_identity) as usize;
        if records.len() != expected {
            return Err(Error::input(format!(
                "{}: {} records, expected {expected}",
                dir.display(),
                records.len()
            )));
        }
        Ok(Self { config, records })
    }
}

pub fn build_dataset(config: &DatasetConfig, output_dir: &Path) -> Result<DatasetManifest> {
    validate_resolution(config.resolution)?;
    if config.identity_count == 0 || config.images_per_identity == 0 {
        return Err(Error::config("dataset needs at least one identity and one image"));
    }
    create_dir(&output_dir.join("images"))?;
    create_dir(&output_dir.join("masks"))?;
    let per = config.images_per_identity as usize;
    let total = config.identity_count as usize * per;
    let mut records = Vec::with_capacity(total);
    for index in 0..total {
        let identity_id = (index / per) as u32;
        let spec = split_record_spec(config.seed, config.split, identity_id, index);
        let out = render(&spec, config.resolution)?;
        let image = format!("images/{index:06}.png");
        let mask = format!("masks/{index:06}.png");
        out.image.save_png(&output_dir.join(&image))?;
        save_mask_png(
            &output_dir.join(&mask),
            [Some(&out.face_mask), Some(&out.accessory_mask), None],
        )?;
        records.push(DatasetRecord {
            index,
            image,
            mask,
            spec,
            keypoints: out.keypoints.iter().map(|k| (k.name.clone(), k.x, k.y)).collect(),
        });
    }
    let manifest = DatasetManifest {
        config: config.clone(),
        records,
    };
    manifest.write(output_dir)?;
    Ok(manifest)
}

/// A dataset decoded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub renders: Vec<RenderOutput>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let res = manifest.config.resolution;
        let mut renders = Vec::with_capacity(manifest.records.len());
        for rec in &manifest.records {
            let image = ImageTensor::load_png(&dir.join(&rec.image))?;
            let [face_mask, accessory_mask, _] = load_mask_png(&dir.join(&rec.mask))?;
            if image.height() != res || image.width() != res || face_mask.height() != res {
                return Err(Error::input(format!(
                    "record {} does not decode to {res}x{res}",
                    rec.index
                )));
            }
            renders.push(RenderOutput {
                image,
                face_mask,
                keypoints: rec
                    .keypoints
                    .iter()
                    .map(|(name, x, y)| Keypoint {
                        name: name.clone(),
                        x: *x,
                        y: *y,
                    })
                    .collect(),
                accessory_mask,
            });
        }
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
            renders,
        })
    }

    pub fn len(&self) -> usize {
        self.renders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.renders.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.manifest.config.resolution
    }

    pub fn spec(&self, index: usize) -> &FaceSpec {
        &self.manifest.records[index].spec
    }

    pub fn identity_of(&self, index: usize) -> u32 {
        self.spec(index).identity.identity_id
    }

    /// Record indices grouped by identity, in ascending identity order.
    pub fn by_identity(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, rec) in self.manifest.records.iter().enumerate() {
            map.entry(rec.spec.identity.identity_id).or_default().push(i);
        }
        map
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DatasetConfig {
        DatasetConfig {
            identity_count: 10,
            images_per_identity: 5,
            resolution: 32,
            seed: 7,
            split: Default::default(),
        }
    }

    #[test]
    fn eval_split_keeps_identities_and_redraws_attributes() {
        for index in 0..20 {
            let id = (index / 5) as u32;
            let a = split_record_spec(7, Split::Train, id, index);
            let b = split_record_spec(7, Split::Eval, id, index);
            assert_eq!(a.identity, b.identity);
            assert_ne!(a.attributes, b.attributes);
        }
        assert_eq!("eval".parse::<Split>().unwrap(), Split::Eval);
        assert!("test".parse::<Split>().is_err());
    }

    #[test]
    fn build_counts_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&cfg(), dir.path()).unwrap();
        assert_eq!(m.records.len(), 50);
        let mut ids: Vec<_> = m.records.iter().map(|r| r.spec.identity.to_vec()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        let reloaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(reloaded, m);
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.len(), 50);
        assert_eq!(ds.by_identity().len(), 10);
        for (i, r) in ds.renders.iter().enumerate() {
            let fresh = render(ds.spec(i), 32).unwrap();
            assert_eq!(r.face_mask, fresh.face_mask);
            assert_eq!(r.image, fresh.image.clone().quantized());
        }
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_dataset(&cfg(), a.path()).unwrap();
        build_dataset(&cfg(), b.path()).unwrap();
        for f in [MANIFEST_FILE, META_FILE, "images/000013.png", "masks/000049.png"] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }
}
