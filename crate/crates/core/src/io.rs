//! On-disk volumes.
//!
//! The native container is a directory `<name>.mvol/` holding
//! `header.json` and `data.raw`:
//!
//! ```json
//! {
//!   "shape": [X, Y, Z],
//!   "spacing_mm": [sx, sy, sz],
//!   "axes": ["anterior-posterior", "superior-inferior", "left-right"],
//!   "dtype": "float32",
//!   "byte_order": "little"
//! }
//! ```
//!
//! `data.raw` is the voxel payload in C order (last axis fastest) with no
//! framing. `dtype` is `float32` for volumes and `uint8` for masks; either
//! loader accepts the other dtype when the values are representable.
//!
//! A gzip or plain NIfTI-1 reader is provided for ingesting external data.

use std::fs;
use std::path::Path;

use nifti::{NiftiObject, NiftiVolume, RandomAccessNiftiVolume, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::volume::{AnatomicalAxis, BinaryMask, Geometry, Volume};

pub const HEADER_FILE: &str = "header.json";
pub const DATA_FILE: &str = "data.raw";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Float32,
    Uint8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::Float32 => 4,
            Dtype::Uint8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub axes: [AnatomicalAxis; 3],
    pub dtype: Dtype,
    pub byte_order: String,
}

impl Header {
    fn for_geometry(g: &Geometry, dtype: Dtype) -> Self {
        Self { shape: g.shape, spacing_mm: g.spacing, axes: g.axes, dtype, byte_order: "little".into() }
    }
}

fn write_container(dir: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let header_path = dir.join(HEADER_FILE);
    let text = serde_json::to_string_pretty(header)?;
    fs::write(&header_path, text + "\n").at(&header_path)?;
    let data_path = dir.join(DATA_FILE);
    fs::write(&data_path, payload).at(&data_path)
}

fn read_container(dir: &Path) -> Result<(Header, Geometry, Vec<u8>)> {
    let header_path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&header_path).at(&header_path)?;
    let header: Header = serde_json::from_str(&text)
        .map_err(|e| Error::Header { path: header_path.clone(), message: e.to_string() })?;
    if header.byte_order != "little" {
        return Err(Error::Header {
            path: header_path,
            message: format!("unsupported byte_order {:?}", header.byte_order),
        });
    }
    let geometry = Geometry::new(header.shape, header.spacing_mm, header.axes)
        .map_err(|e| Error::Header { path: header_path.clone(), message: e.to_string() })?;
    let data_path = dir.join(DATA_FILE);
    let payload = fs::read(&data_path).at(&data_path)?;
    let expected = geometry.numel() * header.dtype.size();
    if payload.len() != expected {
        return Err(Error::PayloadSize { path: data_path, expected, got: payload.len() });
    }
    Ok((header, geometry, payload))
}

fn decode_f32(payload: &[u8]) -> Vec<f32> {
    payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect()
}

pub fn save_volume(dir: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    let payload: Vec<u8> = volume.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_container(dir.as_ref(), &Header::for_geometry(volume.geometry(), Dtype::Float32), &payload)
}

pub fn save_mask(dir: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    write_container(dir.as_ref(), &Header::for_geometry(mask.geometry(), Dtype::Uint8), mask.data())
}

pub fn load_volume(dir: impl AsRef<Path>) -> Result<Volume> {
    let (header, geometry, payload) = read_container(dir.as_ref())?;
    let data = match header.dtype {
        Dtype::Float32 => decode_f32(&payload),
        Dtype::Uint8 => payload.iter().map(|&v| v as f32).collect(),
    };
    Volume::new(geometry, data)
}

pub fn load_mask(dir: impl AsRef<Path>) -> Result<BinaryMask> {
    let (header, geometry, payload) = read_container(dir.as_ref())?;
    let labels = match header.dtype {
        Dtype::Uint8 => payload,
        Dtype::Float32 => {
            let values = decode_f32(&payload);
            let mut labels = Vec::with_capacity(values.len());
            for (index, v) in values.into_iter().enumerate() {
                match v {
                    0.0 => labels.push(0),
                    1.0 => labels.push(1),
                    _ => return Err(Error::NonBinaryMask { value: v as f64, index }),
                }
            }
            labels
        }
    };
    BinaryMask::new(geometry, labels)
}

/// Reads a 3D NIfTI-1 file (`.nii` or `.nii.gz`), applying the intensity
/// scaling in the header. NIfTI stores the first axis fastest, so the data
/// is transposed into C order with the same axis numbering.
pub fn read_nifti(path: impl AsRef<Path>, axes: [AnatomicalAxis; 3]) -> Result<Volume> {
    let path = path.as_ref();
    let object = ReaderOptions::new().read_file(path)?;
    let pixdim = object.header().pixdim;
    let volume = object.into_volume();
    let dim = volume.dim().to_vec();
    let shape = match dim.as_slice() {
        [x, y, z] => [*x as usize, *y as usize, *z as usize],
        [x, y, z, 1] => [*x as usize, *y as usize, *z as usize],
        other => {
            return Err(Error::Header { path: path.into(), message: format!("expected a 3D image, dims {other:?}") })
        }
    };
    let spacing = [pixdim[1] as f64, pixdim[2] as f64, pixdim[3] as f64];
    let geometry = Geometry::new(shape, spacing, axes)
        .map_err(|e| Error::Header { path: path.into(), message: e.to_string() })?;
    let mut data = vec![0f32; geometry.numel()];
    let mut coords = vec![0u16; dim.len()];
    for x in 0..shape[0] {
        coords[0] = x as u16;
        for y in 0..shape[1] {
            coords[1] = y as u16;
            for z in 0..shape[2] {
                coords[2] = z as u16;
                data[geometry.index(x, y, z)] = volume.get_f32(&coords)?;
            }
        }
    }
    Volume::new(geometry, data)
}

/// NIfTI label map as a mask; every voxel must be exactly 0 or 1.
pub fn read_nifti_mask(path: impl AsRef<Path>, axes: [AnatomicalAxis; 3]) -> Result<BinaryMask> {
    let volume = read_nifti(path, axes)?;
    let mut labels = Vec::with_capacity(volume.data().len());
    for (index, &v) in volume.data().iter().enumerate() {
        match v {
            0.0 => labels.push(0),
            1.0 => labels.push(1),
            _ => return Err(Error::NonBinaryMask { value: v as f64, index }),
        }
    }
    BinaryMask::new(volume.geometry().clone(), labels)
}

/// Loads either container, chosen by extension.
pub fn load_volume_any(path: impl AsRef<Path>, axes: [AnatomicalAxis; 3]) -> Result<Volume> {
    let path = path.as_ref();
    if is_nifti(path) {
        read_nifti(path, axes)
    } else {
        load_volume(path)
    }
}

pub fn load_mask_any(path: impl AsRef<Path>, axes: [AnatomicalAxis; 3]) -> Result<BinaryMask> {
    let path = path.as_ref();
    if is_nifti(path) {
        read_nifti_mask(path, axes)
    } else {
        load_mask(path)
    }
}

fn is_nifti(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}
