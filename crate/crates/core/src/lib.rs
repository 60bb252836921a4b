//! Uncertainty-weighted consistency and focal contrastive losses for
//! semi-supervised 3D lesion segmentation, with a small mean-teacher trainer,
//! synthetic data, and segmentation metrics.

pub mod ablation;
pub mod error;
pub mod evaluate;
pub mod fecl;
pub mod fields;
pub mod gradcheck;
pub mod metrics;
pub mod segnet;
pub mod supervised;
pub mod synthvol;
pub mod trainer;
pub mod uncertainty;
pub mod uncl;

pub use error::{Error, Result};
pub use fields::{LabelField, PatchEmbeddings, ProbabilityField, VolumeBatch};
