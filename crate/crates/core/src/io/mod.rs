//! Volume and checkpoint persistence.

pub mod checkpoint;
pub mod nifti;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, NamedTensors, TensorEntry};
pub use nifti::{read_nifti, write_nifti, NiftiError};
