//! Volumetric pretext training (reconstruction + tissue segmentation) with
//! encoder transfer to a small classification head, plus the phantom data,
//! augmentation, IO, and evaluation machinery needed to run the whole
//! pipeline on a single CPU.

pub mod augment;
pub mod io;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod tensor;
pub mod threads;
pub mod train;
pub mod volume;

pub use tensor::{Tape, TensorError, TensorId};
pub use volume::{Volume, VoxelData};
