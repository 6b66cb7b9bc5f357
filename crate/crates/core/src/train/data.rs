//! Training samples and the paired-NIfTI dataset directory format:
//! `<id>_img.nii` / `<id>_lab.nii` plus `manifest.csv` (`id,class,seed`).

use std::path::Path;

use thiserror::Error;

use crate::io::nifti::{read_nifti, write_nifti, NiftiError};
use crate::phantom::PhantomSample;
use crate::volume::Volume;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error("manifest line {line}: {detail}")]
    BadManifest { line: usize, detail: String },
    #[error("dataset directory {0} has no manifest.csv")]
    NoManifest(String),
}

/// One training example; labels and class are optional depending on stage.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub intensity: Volume,
    pub labels: Option<Volume>,
    pub class_label: Option<u8>,
    pub seed: u64,
}

impl From<PhantomSample> for Sample {
    fn from(p: PhantomSample) -> Self {
        Sample {
            id: p.id,
            intensity: p.intensity,
            labels: Some(p.labels),
            class_label: Some(p.class_label),
            seed: p.seed,
        }
    }
}

pub fn from_phantoms(phantoms: Vec<PhantomSample>) -> Vec<Sample> {
    phantoms.into_iter().map(Sample::from).collect()
}

/// Writes `<id>_img.nii`, `<id>_lab.nii` per sample plus the manifest.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[PhantomSample]) -> Result<(), DataError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("id,class,seed\n");
    for s in samples {
        write_nifti(&s.intensity, dir.join(format!("{}_img.nii", s.id)))?;
        write_nifti(&s.labels, dir.join(format!("{}_lab.nii", s.id)))?;
        manifest.push_str(&format!("{},{},{}\n", s.id, s.class_label, s.seed));
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

/// Loads a dataset directory via its manifest. Label volumes are optional on
/// disk; missing `<id>_lab.nii` files load as `None`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>, DataError> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.csv");
    if !manifest_path.exists() {
        return Err(DataError::NoManifest(dir.display().to_string()));
    }
    let text = std::fs::read_to_string(manifest_path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(DataError::BadManifest {
                line: i + 1,
                detail: format!("expected id,class,seed, got {line:?}"),
            });
        }
        let id = parts[0].trim().to_string();
        let class: u8 = parts[1].trim().parse().map_err(|e| DataError::BadManifest {
            line: i + 1,
            detail: format!("bad class: {e}"),
        })?;
        let seed: u64 = parts[2].trim().parse().map_err(|e| DataError::BadManifest {
            line: i + 1,
            detail: format!("bad seed: {e}"),
        })?;
        let intensity = read_nifti(dir.join(format!("{id}_img.nii")))?;
        let lab_path = dir.join(format!("{id}_lab.nii"));
        let labels = if lab_path.exists() {
            Some(read_nifti(lab_path)?)
        } else {
            None
        };
        out.push(Sample {
            id,
            intensity,
            labels,
            class_label: Some(class),
            seed,
        });
    }
    Ok(out)
}
