//! Knee MRI meniscus segmentation: volumes and phantoms, preprocessing, a
//! 3D U-Net, a promptless slice-wise ViT segmenter, training and the
//! evaluation metrics.

pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod split;
pub mod training;
pub mod unet;
pub mod vit;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{AnatomicalAxis, BinaryMask, Geometry, Volume};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
