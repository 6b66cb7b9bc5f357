//! 3D scalar fields with voxel spacing and a world affine.

use thiserror::Error;

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_WM: u8 = 1;
pub const LABEL_GM: u8 = 2;
pub const LABEL_CSF: u8 = 3;
pub const NUM_TISSUE_CLASSES: usize = 4;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("data length {len} does not match dims {dims:?}")]
    DataLength { len: usize, dims: [usize; 3] },
    #[error("spacing must be positive on all axes, got {spacing:?}")]
    BadSpacing { spacing: [f32; 3] },
    #[error("label volume contains value {value}, allowed range is 0..={max}")]
    BadLabel { value: u8, max: u8 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    /// Intensity field, 32-bit reals.
    F32(Vec<f32>),
    /// Label field: 0 = background, 1 = WM, 2 = GM, 3 = CSF.
    U8(Vec<u8>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::F32(v) => v.len(),
            VoxelData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A 3D volume indexed x-fastest: `data[x + nx*(y + ny*z)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    /// Voxel size in mm per axis.
    pub spacing: [f32; 3],
    pub origin: [f32; 3],
    /// Direction cosines, rows = world axes.
    pub direction: [[f32; 3]; 3],
    pub data: VoxelData,
}

pub const IDENTITY_DIRECTION: [[f32; 3]; 3] =
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Volume {
    pub fn new_intensity(
        dims: [usize; 3],
        spacing: [f32; 3],
        data: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        Self::validate(dims, spacing, data.len())?;
        Ok(Volume {
            dims,
            spacing,
            origin: [0.0; 3],
            direction: IDENTITY_DIRECTION,
            data: VoxelData::F32(data),
        })
    }

    pub fn new_labels(
        dims: [usize; 3],
        spacing: [f32; 3],
        data: Vec<u8>,
    ) -> Result<Self, VolumeError> {
        Self::validate(dims, spacing, data.len())?;
        let max = (NUM_TISSUE_CLASSES - 1) as u8;
        if let Some(&bad) = data.iter().find(|&&v| v > max) {
            return Err(VolumeError::BadLabel { value: bad, max });
        }
        Ok(Volume {
            dims,
            spacing,
            origin: [0.0; 3],
            direction: IDENTITY_DIRECTION,
            data: VoxelData::U8(data),
        })
    }

    fn validate(dims: [usize; 3], spacing: [f32; 3], len: usize) -> Result<(), VolumeError> {
        if dims.iter().product::<usize>() != len {
            return Err(VolumeError::DataLength { len, dims });
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(VolumeError::BadSpacing { spacing });
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_labels(&self) -> bool {
        matches!(self.data, VoxelData::U8(_))
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            VoxelData::F32(v) => Some(v),
            VoxelData::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            VoxelData::U8(v) => Some(v),
            VoxelData::F32(_) => None,
        }
    }

    /// Intensity values, converting labels on the fly.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            VoxelData::F32(v) => v.clone(),
            VoxelData::U8(v) => v.iter().map(|&b| b as f32).collect(),
        }
    }

    /// Same geometry, new intensity payload.
    pub fn with_f32_data(&self, data: Vec<f32>) -> Result<Self, VolumeError> {
        Self::validate(self.dims, self.spacing, data.len())?;
        Ok(Volume {
            data: VoxelData::F32(data),
            ..self.clone()
        })
    }

    /// Same geometry, new label payload.
    pub fn with_u8_data(&self, data: Vec<u8>) -> Result<Self, VolumeError> {
        Self::validate(self.dims, self.spacing, data.len())?;
        Ok(Volume {
            data: VoxelData::U8(data),
            ..self.clone()
        })
    }
}
