//! Identity embedding, attribute condition image, and the conditioning
//! configurations used for inversion and sampling.

pub mod attribute;
pub mod encoder;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub use attribute::{build_attribute_condition, AttributeCondition, Overlays};
pub use encoder::{
    embed_identity, train_identity_encoder, EncoderConfig, EncoderTrainConfig, EncoderTrainReport,
    IdentityEmbedding, IdentityEncoder,
};

/// Which of the (identity, attribute) slots carry real conditions; the rest
/// are replaced by the model's learned null tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    Full,
    AttributeOnly,
    IdentityOnly,
    None,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 4] = [
        ConditioningMode::Full,
        ConditioningMode::AttributeOnly,
        ConditioningMode::IdentityOnly,
        ConditioningMode::None,
    ];

    pub fn uses_identity(self) -> bool {
        matches!(self, ConditioningMode::Full | ConditioningMode::IdentityOnly)
    }

    pub fn uses_attribute(self) -> bool {
        matches!(self, ConditioningMode::Full | ConditioningMode::AttributeOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConditioningMode::Full => "full",
            ConditioningMode::AttributeOnly => "attribute_only",
            ConditioningMode::IdentityOnly => "identity_only",
            ConditioningMode::None => "none",
        }
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "full" => Ok(ConditioningMode::Full),
            "attribute_only" | "attribute" => Ok(ConditioningMode::AttributeOnly),
            "identity_only" | "identity" => Ok(ConditioningMode::IdentityOnly),
            "none" => Ok(ConditioningMode::None),
            other => Err(Error::config(format!("unknown conditioning mode {other:?}"))),
        }
    }
}

/// A conditioning slot: a concrete value or the learned null token.
#[derive(Debug, Clone, PartialEq)]
pub enum Slot<T> {
    Value(T),
    Null,
}

impl<T> Slot<T> {
    pub fn is_null(&self) -> bool {
        matches!(self, Slot::Null)
    }

    pub fn value(&self) -> Option<&T> {
        match self {
            Slot::Value(v) => Some(v),
            Slot::Null => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub id: Slot<IdentityEmbedding>,
    pub att: Slot<AttributeCondition>,
}

/// Assemble the `(id, att)` pair for a mode. Components the mode does not use
/// are dropped in favor of null tokens even when supplied.
pub fn make_bundle(
    id: Option<IdentityEmbedding>,
    att: Option<AttributeCondition>,
    mode: ConditioningMode,
) -> Result<ConditioningBundle> {
    let id = if mode.uses_identity() {
        Slot::Value(id.ok_or_else(|| {
            Error::input(format!("conditioning mode {mode} needs an identity embedding"))
        })?)
    } else {
        Slot::Null
    };
    let att = if mode.uses_attribute() {
        Slot::Value(att.ok_or_else(|| {
            Error::input(format!("conditioning mode {mode} needs an attribute condition"))
        })?)
    } else {
        Slot::Null
    };
    Ok(ConditioningBundle { id, att })
}

/// A batch of bundles laid out as tensors. Null slots hold zeros in the value
/// tensors and 1.0 in the matching null-indicator tensor.
#[derive(Debug, Clone)]
pub struct BatchConditioning {
    /// `(B, d)`
    pub id: Tensor,
    /// `(B, 1)`
    pub id_null: Tensor,
    /// `(B, 3, H, W)`
    pub att: Tensor,
    /// `(B, 1, 1, 1)`
    pub att_null: Tensor,
}

impl BatchConditioning {
    pub fn from_bundles(
        bundles: &[ConditioningBundle],
        embed_dim: usize,
        resolution: usize,
        device: &Device,
        dtype: DType,
    ) -> Result<Self> {
        let b = bundles.len();
        if b == 0 {
            return Err(Error::input("empty conditioning batch"));
        }
        let mut id = Vec::with_capacity(b * embed_dim);
        let mut id_null = Vec::with_capacity(b);
        let blank = ImageTensor::zeros(resolution, resolution, 3);
        let mut att_imgs = Vec::with_capacity(b);
        let mut att_null = Vec::with_capacity(b);
        for bundle in bundles {
            match &bundle.id {
                Slot::Value(e) => {
                    if e.dim() != embed_dim {
                        return Err(Error::input(format!(
                            "identity embedding has dim {}, model expects {embed_dim}",
                            e.dim()
                        )));
                    }
                    id.extend_from_slice(e.as_slice());
                    id_null.push(0.0f32);
                }
                Slot::Null => {
                    id.extend(std::iter::repeat_n(0.0f32, embed_dim));
                    id_null.push(1.0);
                }
            }
            match &bundle.att {
                Slot::Value(a) => {
                    if a.image().height() != resolution || a.image().width() != resolution {
                        return Err(Error::input("attribute condition resolution mismatch"));
                    }
                    att_imgs.push(a.image());
                    att_null.push(0.0f32);
                }
                Slot::Null => {
                    att_imgs.push(&blank);
                    att_null.push(1.0);
                }
            }
        }
        Ok(Self {
            id: Tensor::from_vec(id, (b, embed_dim), device)?.to_dtype(dtype)?,
            id_null: Tensor::from_vec(id_null, (b, 1), device)?.to_dtype(dtype)?,
            att: ImageTensor::stack(&att_imgs, device, dtype)?,
            att_null: Tensor::from_vec(att_null, (b, 1, 1, 1), device)?.to_dtype(dtype)?,
        })
    }

    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.id.dim(0)?)
    }

    /// Mark additional slots as null (`1.0` entries in the drop tensors).
    pub fn with_dropped(&self, drop_id: &Tensor, drop_att: &Tensor) -> Result<Self> {
        Ok(Self {
            id: self.id.clone(),
            id_null: self.id_null.maximum(drop_id)?,
            att: self.att.clone(),
            att_null: self.att_null.maximum(drop_att)?,
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            id: self.id.to_dtype(dtype)?,
            id_null: self.id_null.to_dtype(dtype)?,
            att: self.att.to_dtype(dtype)?,
            att_null: self.att_null.to_dtype(dtype)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb() -> IdentityEmbedding {
        IdentityEmbedding::new(vec![0.6, 0.8]).unwrap()
    }

    fn att() -> AttributeCondition {
        AttributeCondition::new(ImageTensor::filled(4, 4, 3, 0.5)).unwrap()
    }

    #[test]
    fn bundle_modes() {
        let b = make_bundle(Some(emb()), Some(att()), ConditioningMode::None).unwrap();
        assert!(b.id.is_null() && b.att.is_null());
        let b = make_bundle(Some(emb()), Some(att()), ConditioningMode::AttributeOnly).unwrap();
        assert!(b.id.is_null());
        assert_eq!(b.att, Slot::Value(att()));
        let b = make_bundle(Some(emb()), Some(att()), ConditioningMode::Full).unwrap();
        assert_eq!(b.id, Slot::Value(emb()));
        assert_eq!(b.att, Slot::Value(att()));
        assert!(make_bundle(None, Some(att()), ConditioningMode::Full).is_err());
        assert!(make_bundle(Some(emb()), None, ConditioningMode::AttributeOnly).is_err());
        assert!(make_bundle(None, None, ConditioningMode::None).is_ok());
    }

    #[test]
    fn modes_differ_only_by_null_substitution() {
        let full = make_bundle(Some(emb()), Some(att()), ConditioningMode::Full).unwrap();
        for mode in ConditioningMode::ALL {
            let b = make_bundle(Some(emb()), Some(att()), mode).unwrap();
            if mode.uses_identity() {
                assert_eq!(b.id, full.id);
            } else {
                assert!(b.id.is_null());
            }
            if mode.uses_attribute() {
                assert_eq!(b.att, full.att);
            } else {
                assert!(b.att.is_null());
            }
            assert_eq!(mode.to_string().parse::<ConditioningMode>().unwrap(), mode);
        }
    }

    #[test]
    fn batch_layout() {
        let bundles = vec![
            make_bundle(Some(emb()), Some(att()), ConditioningMode::Full).unwrap(),
            make_bundle(None, None, ConditioningMode::None).unwrap(),
        ];
        let bc = BatchConditioning::from_bundles(&bundles, 2, 4, &Device::Cpu, DType::F32).unwrap();
        assert_eq!(bc.id.to_vec2::<f32>().unwrap(), vec![vec![0.6, 0.8], vec![0.0, 0.0]]);
        assert_eq!(bc.id_null.to_vec2::<f32>().unwrap(), vec![vec![0.0], vec![1.0]]);
        assert_eq!(bc.att.dims(), &[2, 3, 4, 4]);
        assert_eq!(bc.att_null.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![0.0, 1.0]);
    }
}
