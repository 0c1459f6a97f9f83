pub mod metrics;
pub mod probes;
pub mod protocol;
pub mod swap;

pub use metrics::{
    attribute_error, feature_fid, feature_fid_images, frechet_distance, id_retrieval, id_retrieval_images,
    identity_similarity, AttributeErrors,
};
pub use probes::{AttributeEstimate, AttributeProbe, ProbeConfig, ProbeTrainConfig};
pub use protocol::{evaluate_protocol, EvalConfig, EvalOutput, EvalReport, PairRecord};
pub use swap::{swap, swap_batch, ConditionStyle, InversionMode, SwapSettings};
