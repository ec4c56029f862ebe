//! Multimodal semantic segmentation with frozen per-modality transformer
//! encoders stitched together by cross-modal bottleneck adapters.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod param_count;
pub mod stitch;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Mode, Tape, Var};
pub use error::{Error, Result};
pub use model::{ModalitySpec, ModelConfig, StitchConfig, StitchModel};
pub use stitch::{AdapterBank, DensityConfig, DensityVariant, MultiAdapter};
pub use tensor::Tensor;
