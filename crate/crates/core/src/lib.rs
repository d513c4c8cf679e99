//! Frozen diffusion-UNet feature probing for skin-lesion segmentation and
//! malignancy classification.

pub mod backbone;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod head_io;
pub mod nn;
pub mod optim;
pub mod plots;
pub mod probes;
pub mod reports;
pub mod schedule;
pub mod training;
pub mod unet;

pub use backbone::{Backbone, BackboneDescriptor, BackboneKind, BlockSpec, DecoderActivation};
pub use error::{Error, LoadError, Result};
pub use schedule::NoiseSchedule;
