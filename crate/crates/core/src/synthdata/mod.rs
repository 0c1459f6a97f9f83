//! Procedural face-like images with known identity and attribute factors.

pub mod dataset;
pub mod factors;
pub mod occlusion;
pub mod render;

pub use dataset::{build_dataset, Dataset, DatasetConfig, DatasetManifest, DatasetRecord, Split};
pub use factors::{sample_attributes, sample_identity, AttributeFactors, FaceSpec, IdentityFactors};
pub use occlusion::{apply_occlusion, sample_occluder, Occluder};
pub use render::{render, Keypoint, RenderOutput};
