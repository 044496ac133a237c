//! Scalar volumes and binary masks on a shared voxel geometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anatomical direction an array axis runs along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnatomicalAxis {
    AnteriorPosterior,
    SuperiorInferior,
    /// Normal of the sagittal plane.
    LeftRight,
}

impl AnatomicalAxis {
    pub fn label(self) -> &'static str {
        match self {
            Self::AnteriorPosterior => "anterior-posterior",
            Self::SuperiorInferior => "superior-inferior",
            Self::LeftRight => "left-right",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "anterior-posterior" => Some(Self::AnteriorPosterior),
            "superior-inferior" => Some(Self::SuperiorInferior),
            "left-right" => Some(Self::LeftRight),
            _ => None,
        }
    }
}

/// Default axis labels. Which in-plane axis is superior-inferior is not
/// knowable from the acquisition description alone, so this is a
/// convention; callers with real data should supply their own labels.
pub const DEFAULT_AXES: [AnatomicalAxis; 3] =
    [AnatomicalAxis::AnteriorPosterior, AnatomicalAxis::SuperiorInferior, AnatomicalAxis::LeftRight];

/// Voxel spacing (mm) of the reference DESS acquisition, ordered as
/// [`DEFAULT_AXES`].
pub const REFERENCE_SPACING_MM: [f64; 3] = [0.365, 0.456, 0.7];

/// Reference acquisition extent: 384 x 384 in-plane, 160 sagittal slices.
pub const REFERENCE_SHAPE: [usize; 3] = [384, 384, 160];

/// Shape, spacing and axis labels of a 3D grid. Data is C-ordered, the
/// last axis varying fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub axes: [AnatomicalAxis; 3],
}

impl Geometry {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], axes: [AnatomicalAxis; 3]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Geometry(format!("shape {shape:?} has an empty axis")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Geometry(format!("spacing {spacing:?} must be positive and finite")));
        }
        for i in 0..3 {
            for j in i + 1..3 {
                if axes[i] == axes[j] {
                    return Err(Error::Geometry(format!("axis label {} repeated", axes[i].label())));
                }
            }
        }
        Ok(Self { shape, spacing, axes })
    }

    pub fn with_default_axes(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(shape, spacing, DEFAULT_AXES)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let z = i % self.shape[2];
        let y = (i / self.shape[2]) % self.shape[1];
        [i / (self.shape[1] * self.shape[2]), y, z]
    }

    pub fn axis_of(&self, label: AnatomicalAxis) -> Option<usize> {
        self.axes.iter().position(|&a| a == label)
    }

    pub fn si_axis(&self) -> Result<usize> {
        self.axis_of(AnatomicalAxis::SuperiorInferior)
            .ok_or_else(|| Error::Geometry("no superior-inferior axis".into()))
    }

    pub fn sagittal_axis(&self) -> Result<usize> {
        self.axis_of(AnatomicalAxis::LeftRight).ok_or_else(|| Error::Geometry("no left-right axis".into()))
    }

    pub fn ensure_same(&self, other: &Geometry) -> Result<()> {
        if self != other {
            return Err(Error::GeometryMismatch(format!(
                "{:?} @ {:?} vs {:?} @ {:?}",
                self.shape, self.spacing, other.shape, other.spacing
            )));
        }
        Ok(())
    }
}

/// 3D image of `f32` intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.numel() {
            return Err(Error::Geometry(format!(
                "{} values for shape {:?}",
                data.len(),
                geometry.shape
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite intensity at flat index {i}")));
        }
        Ok(Self { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Self {
        let data = vec![value; geometry.numel()];
        Self { geometry, data }
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(geometry.numel());
        for i in 0..geometry.numel() {
            let [x, y, z] = geometry.coords(i);
            data.push(f(x, y, z));
        }
        Self::new(geometry, data)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geometry.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.geometry.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}

/// 3D `{0, 1}` label volume.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    geometry: Geometry,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(geometry: Geometry, data: Vec<u8>) -> Result<Self> {
        if data.len() != geometry.numel() {
            return Err(Error::Geometry(format!(
                "{} labels for shape {:?}",
                data.len(),
                geometry.shape
            )));
        }
        if let Some(index) = data.iter().position(|&v| v > 1) {
            return Err(Error::NonBinaryMask { value: data[index] as f64, index });
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        let data = vec![0; geometry.numel()];
        Self { geometry, data }
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(geometry.numel());
        for i in 0..geometry.numel() {
            let [x, y, z] = geometry.coords(i);
            data.push(f(x, y, z) as u8);
        }
        Self { geometry, data }
    }

    /// Thresholds `values >= threshold` into a mask.
    pub fn threshold(geometry: Geometry, values: &[f32], threshold: f32) -> Result<Self> {
        Self::new(geometry, values.iter().map(|&v| (v >= threshold) as u8).collect())
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geometry.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.geometry.index(x, y, z)] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = self.geometry.index(x, y, z);
        self.data[i] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Mask values as intensities, for feeding a model target.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}
