//! Single-file NIfTI-1 subset: uncompressed, little-endian, no extensions,
//! datatypes uint8 / int16 / float32. Anything else is rejected with an
//! error naming the offending header field.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::volume::{Volume, VolumeError, IDENTITY_DIRECTION};
use thiserror::Error;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("file too short for a NIfTI-1 header: {len} bytes")]
    HeaderTooShort { len: usize },
    #[error("magic: expected \"n+1\\0\", found {found:?} (two-file \"ni1\\0\" form is unsupported)")]
    BadMagic { found: [u8; 4] },
    #[error("sizeof_hdr: expected 348 little-endian, found {found} (big-endian files are unsupported)")]
    BadSizeofHdr { found: i32 },
    #[error("datatype: code {code} unsupported (supported: uint8=2, int16=4, float32=16)")]
    UnsupportedDatatype { code: i16 },
    #[error("dim: {detail}")]
    BadDim { detail: String },
    #[error("pixdim: axis {axis} has non-positive spacing {value}")]
    BadPixdim { axis: usize, value: f32 },
    #[error("{field}: value {value} unsupported (intensity rescaling is not implemented)")]
    UnsupportedScaling { field: &'static str, value: f32 },
    #[error("payload truncated: expected {expected} bytes at vox_offset {offset}, found {found}")]
    Truncated {
        expected: usize,
        offset: usize,
        found: usize,
    },
    #[error("vox_offset: {value} below the 352-byte minimum")]
    BadVoxOffset { value: f32 },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn i16_at(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn i32_at(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn f32_at(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

/// Reads a single-file uncompressed NIfTI-1 volume. uint8 payloads load as
/// label fields, int16 and float32 as intensity fields.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume, NiftiError> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::HeaderTooShort { len: bytes.len() });
    }
    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    if &magic != MAGIC_SINGLE {
        // classify "ni1\0" and garbage identically: both unsupported here
        let _ = MAGIC_PAIR;
        return Err(NiftiError::BadMagic { found: magic });
    }
    let sizeof_hdr = i32_at(&bytes, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(NiftiError::BadSizeofHdr { found: sizeof_hdr });
    }
    let ndim = i16_at(&bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(NiftiError::BadDim {
            detail: format!("dim[0] = {ndim} outside 1..=7"),
        });
    }
    let mut dims = [1usize; 3];
    for a in 0..3 {
        if (a as i16) < ndim {
            let d = i16_at(&bytes, 40 + 2 * (a + 1));
            if d < 1 {
                return Err(NiftiError::BadDim {
                    detail: format!("dim[{}] = {d} must be >= 1", a + 1),
                });
            }
            dims[a] = d as usize;
        }
    }
    for a in 3..ndim as usize {
        let d = i16_at(&bytes, 40 + 2 * (a + 1));
        if d > 1 {
            return Err(NiftiError::BadDim {
                detail: format!("dim[{}] = {d}: only single 3D volumes are supported", a + 1),
            });
        }
    }
    let datatype = i16_at(&bytes, 70);
    if ![DT_UINT8, DT_INT16, DT_FLOAT32].contains(&datatype) {
        return Err(NiftiError::UnsupportedDatatype { code: datatype });
    }
    let mut spacing = [1.0f32; 3];
    for a in 0..3 {
        let p = f32_at(&bytes, 76 + 4 * (a + 1));
        if !(p > 0.0) {
            return Err(NiftiError::BadPixdim { axis: a + 1, value: p });
        }
        spacing[a] = p;
    }
    let slope = f32_at(&bytes, 112);
    if !(slope == 0.0 || slope == 1.0 || slope.is_nan()) {
        return Err(NiftiError::UnsupportedScaling {
            field: "scl_slope",
            value: slope,
        });
    }
    let inter = f32_at(&bytes, 116);
    if !(inter == 0.0 || inter.is_nan()) {
        return Err(NiftiError::UnsupportedScaling {
            field: "scl_inter",
            value: inter,
        });
    }
    let vox_offset = f32_at(&bytes, 108);
    if vox_offset < VOX_OFFSET as f32 {
        return Err(NiftiError::BadVoxOffset { value: vox_offset });
    }
    let offset = vox_offset as usize;

    let numel: usize = dims.iter().product();
    let bytes_per = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        _ => 4,
    };
    let expected = numel * bytes_per;
    if bytes.len() < offset + expected {
        return Err(NiftiError::Truncated {
            expected,
            offset,
            found: bytes.len().saturating_sub(offset),
        });
    }
    let payload = &bytes[offset..offset + expected];

    let mut volume = match datatype {
        DT_UINT8 => Volume::new_labels(dims, spacing, payload.to_vec())?,
        DT_INT16 => {
            let data: Vec<f32> = payload
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
                .collect();
            Volume::new_intensity(dims, spacing, data)?
        }
        _ => {
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Volume::new_intensity(dims, spacing, data)?
        }
    };

    let sform_code = i16_at(&bytes, 254);
    if sform_code > 0 {
        let srow = [
            [f32_at(&bytes, 280), f32_at(&bytes, 284), f32_at(&bytes, 288), f32_at(&bytes, 292)],
            [f32_at(&bytes, 296), f32_at(&bytes, 300), f32_at(&bytes, 304), f32_at(&bytes, 308)],
            [f32_at(&bytes, 312), f32_at(&bytes, 316), f32_at(&bytes, 320), f32_at(&bytes, 324)],
        ];
        volume.origin = [srow[0][3], srow[1][3], srow[2][3]];
        for r in 0..3 {
            for c in 0..3 {
                volume.direction[r][c] = srow[r][c] / spacing[c];
            }
        }
    } else {
        volume.origin = [0.0; 3];
        volume.direction = IDENTITY_DIRECTION;
    }
    Ok(volume)
}

/// Writes a single-file NIfTI-1 volume: 348-byte header, payload at byte 352,
/// little-endian. Intensity volumes store float32, label volumes uint8.
pub fn write_nifti(volume: &Volume, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    let mut header = [0u8; HEADER_SIZE];
    put_i32(&mut header, 0, HEADER_SIZE as i32);
    // regular data ordering flag, matches common writers
    header[38] = b'r';
    put_i16(&mut header, 40, 3);
    for a in 0..3 {
        put_i16(&mut header, 40 + 2 * (a + 1), volume.dims[a] as i16);
    }
    for a in 4..8 {
        put_i16(&mut header, 40 + 2 * a, 1);
    }
    let (datatype, bitpix) = if volume.is_labels() {
        (DT_UINT8, 8i16)
    } else {
        (DT_FLOAT32, 32i16)
    };
    put_i16(&mut header, 70, datatype);
    put_i16(&mut header, 72, bitpix);
    put_f32(&mut header, 76, 1.0); // qfac
    for a in 0..3 {
        put_f32(&mut header, 76 + 4 * (a + 1), volume.spacing[a]);
    }
    put_f32(&mut header, 108, VOX_OFFSET as f32);
    put_f32(&mut header, 112, 1.0); // scl_slope: identity scaling
    put_f32(&mut header, 116, 0.0); // scl_inter
    put_i16(&mut header, 252, 0); // qform_code
    put_i16(&mut header, 254, 1); // sform_code
    for r in 0..3 {
        for c in 0..3 {
            put_f32(
                &mut header,
                280 + 16 * r + 4 * c,
                volume.direction[r][c] * volume.spacing[c],
            );
        }
        put_f32(&mut header, 280 + 16 * r + 12, volume.origin[r]);
    }
    header[344..348].copy_from_slice(MAGIC_SINGLE);

    let mut file = fs::File::create(path)?;
    file.write_all(&header)?;
    file.write_all(&[0u8; VOX_OFFSET - HEADER_SIZE])?;
    match &volume.data {
        crate::volume::VoxelData::U8(v) => file.write_all(v)?,
        crate::volume::VoxelData::F32(v) => {
            let mut buf = Vec::with_capacity(v.len() * 4);
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            file.write_all(&buf)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_constants() {
        let vol = Volume::new_intensity([2, 2, 2], [1.0; 3], vec![0.5; 8]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nii");
        write_nifti(&vol, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(i32_at(&bytes, 0), 348);
        assert_eq!(&bytes[344..348], b"n+1\0");
        assert_eq!(bytes.len(), 352 + 8 * 4);
    }

    #[test]
    fn two_file_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pair.nii");
        let vol = Volume::new_intensity([1, 1, 1], [1.0; 3], vec![0.0]).unwrap();
        write_nifti(&vol, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[344..348].copy_from_slice(b"ni1\0");
        std::fs::write(&path, &bytes).unwrap();
        let err = read_nifti(&path).unwrap_err();
        assert!(matches!(err, NiftiError::BadMagic { found } if &found == b"ni1\0"));
    }

    #[test]
    fn unsupported_datatype_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f64.nii");
        let vol = Volume::new_intensity([1, 1, 1], [1.0; 3], vec![0.0]).unwrap();
        write_nifti(&vol, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        put_i16(&mut bytes, 70, 64); // float64
        std::fs::write(&path, &bytes).unwrap();
        let err = read_nifti(&path).unwrap_err();
        assert!(matches!(err, NiftiError::UnsupportedDatatype { code: 64 }));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.nii");
        let vol = Volume::new_intensity([2, 2, 2], [1.0; 3], vec![0.1; 8]).unwrap();
        write_nifti(&vol, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_nifti(&path).unwrap_err();
        assert!(matches!(err, NiftiError::Truncated { expected: 32, .. }));
    }
}
