//! Intensity windowing, cropping, sagittal slicing and conversion of
//! slices to and from the square 3-channel input of the 2D backbone.

use menisc_autograd::ops::resize_plane;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Geometry, Volume};

/// Clip window for DESS intensities.
pub const WINDOW: (f32, f32) = (0.0, 0.005);
/// Margin added around the union of annotated regions before cropping.
pub const CROP_MARGIN_VOXELS: usize = 20;
/// Side length of the square backbone input.
pub const BACKBONE_SIZE: usize = 1024;

/// `(clip(v, lo, hi) - lo) / (hi - lo)` per voxel.
pub fn window_rescale(volume: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!("window [{lo}, {hi}] is empty")));
    }
    let span = hi - lo;
    volume.map(|v| (v.clamp(lo, hi) - lo) / span)
}

/// Half-open voxel box per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub start: [usize; 3],
    pub stop: [usize; 3],
}

impl CropBox {
    pub fn full(shape: [usize; 3]) -> Self {
        Self { start: [0; 3], stop: shape }
    }

    pub fn extents(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.stop[a] - self.start[a])
    }

    pub fn check(&self, shape: [usize; 3]) -> Result<()> {
        for a in 0..3 {
            if !(self.start[a] < self.stop[a] && self.stop[a] <= shape[a]) {
                return Err(Error::InvalidArgument(format!(
                    "crop box {:?}..{:?} outside shape {shape:?}",
                    self.start, self.stop
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.start[a] <= p[a] && p[a] < self.stop[a])
    }
}

/// Bounding box of the foreground of every mask, grown by `margin` voxels
/// on each side and clamped to the grid.
pub fn compute_crop_box<'a>(masks: impl IntoIterator<Item = &'a BinaryMask>, margin: usize) -> Result<CropBox> {
    let mut shape = None;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for m in masks {
        match shape {
            None => shape = Some(m.shape()),
            Some(s) if s != m.shape() => {
                return Err(Error::GeometryMismatch(format!("mask shapes {s:?} and {:?}", m.shape())))
            }
            _ => {}
        }
        for (i, &v) in m.data().iter().enumerate() {
            if v == 1 {
                any = true;
                let c = m.geometry().coords(i);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
    }
    let shape = shape.ok_or_else(|| Error::Empty("no masks for the crop box".into()))?;
    if !any {
        return Err(Error::Empty("all masks are background".into()));
    }
    Ok(CropBox {
        start: [0, 1, 2].map(|a| lo[a].saturating_sub(margin)),
        stop: [0, 1, 2].map(|a| (hi[a] + 1 + margin).min(shape[a])),
    })
}

fn crop_raw<T: Copy>(g: &Geometry, data: &[T], b: &CropBox) -> Result<(Geometry, Vec<T>)> {
    b.check(g.shape)?;
    let out_g = Geometry::new(b.extents(), g.spacing, g.axes)?;
    let mut out = Vec::with_capacity(out_g.numel());
    for x in b.start[0]..b.stop[0] {
        for y in b.start[1]..b.stop[1] {
            let row = g.index(x, y, 0);
            out.extend_from_slice(&data[row + b.start[2]..row + b.stop[2]]);
        }
    }
    Ok((out_g, out))
}

/// Restricting a grid to a [`CropBox`]; spacing and labels are kept.
pub trait Crop: Sized {
    fn crop(&self, b: &CropBox) -> Result<Self>;
}

impl Crop for Volume {
    fn crop(&self, b: &CropBox) -> Result<Self> {
        let (g, d) = crop_raw(self.geometry(), self.data(), b)?;
        Volume::new(g, d)
    }
}

impl Crop for BinaryMask {
    fn crop(&self, b: &CropBox) -> Result<Self> {
        let (g, d) = crop_raw(self.geometry(), self.data(), b)?;
        BinaryMask::new(g, d)
    }
}

pub fn crop<T: Crop>(item: &T, b: &CropBox) -> Result<T> {
    item.crop(b)
}

/// One plane of a volume cut perpendicular to `axis`. The in-plane axes
/// are the remaining two, in their original order.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice2D<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
    pub spacing: [f64; 2],
    pub index: usize,
}

fn plane_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

fn extract_raw<T: Copy>(g: &Geometry, data: &[T], axis: usize) -> Result<Vec<Slice2D<T>>> {
    if axis > 2 {
        return Err(Error::InvalidArgument(format!("slice axis {axis}")));
    }
    let (ra, ca) = plane_axes(axis);
    let (rows, cols) = (g.shape[ra], g.shape[ca]);
    Ok((0..g.shape[axis])
        .map(|k| {
            let mut buf = Vec::with_capacity(rows * cols);
            let mut c = [0usize; 3];
            c[axis] = k;
            for r in 0..rows {
                c[ra] = r;
                for q in 0..cols {
                    c[ca] = q;
                    buf.push(data[g.index(c[0], c[1], c[2])]);
                }
            }
            Slice2D { rows, cols, data: buf, spacing: [g.spacing[ra], g.spacing[ca]], index: k }
        })
        .collect())
}

fn stack_raw<T: Copy + Default>(slices: &[Slice2D<T>], g: &Geometry, axis: usize) -> Result<Vec<T>> {
    if axis > 2 {
        return Err(Error::InvalidArgument(format!("slice axis {axis}")));
    }
    let (ra, ca) = plane_axes(axis);
    if slices.len() != g.shape[axis] {
        return Err(Error::InvalidArgument(format!(
            "{} slices for extent {} along axis {axis}",
            slices.len(),
            g.shape[axis]
        )));
    }
    let mut out = vec![T::default(); g.numel()];
    let mut c = [0usize; 3];
    for (k, s) in slices.iter().enumerate() {
        if s.rows != g.shape[ra] || s.cols != g.shape[ca] || s.data.len() != s.rows * s.cols {
            return Err(Error::InvalidArgument(format!(
                "slice {k} is {}x{}, expected {}x{}",
                s.rows, s.cols, g.shape[ra], g.shape[ca]
            )));
        }
        c[axis] = k;
        for r in 0..s.rows {
            c[ra] = r;
            for q in 0..s.cols {
                c[ca] = q;
                out[g.index(c[0], c[1], c[2])] = s.data[r * s.cols + q];
            }
        }
    }
    Ok(out)
}

/// All slices along `axis`, in index order.
pub fn extract_slices(volume: &Volume, axis: usize) -> Result<Vec<Slice2D<f32>>> {
    extract_raw(volume.geometry(), volume.data(), axis)
}

pub fn extract_mask_slices(mask: &BinaryMask, axis: usize) -> Result<Vec<Slice2D<u8>>> {
    extract_raw(mask.geometry(), mask.data(), axis)
}

/// Places slice `i` at index `i` along `axis`.
pub fn stack_slices(slices: &[Slice2D<u8>], geometry: &Geometry, axis: usize) -> Result<BinaryMask> {
    BinaryMask::new(geometry.clone(), stack_raw(slices, geometry, axis)?)
}

pub fn stack_volume_slices(slices: &[Slice2D<f32>], geometry: &Geometry, axis: usize) -> Result<Volume> {
    Volume::new(geometry.clone(), stack_raw(slices, geometry, axis)?)
}

/// How a slice was mapped onto the backbone grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneMeta {
    pub size: usize,
    pub original: [usize; 2],
    /// Extent after scaling, before padding.
    pub scaled: [usize; 2],
    /// Target size over the longer original side.
    pub scale: f64,
    /// Zero rows and columns appended at the high-index ends.
    pub pad: [usize; 2],
}

/// Square 3-channel image, channel-major (`[3, size, size]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    pub data: Vec<f32>,
    pub meta: BackboneMeta,
}

impl Image2D {
    pub const CHANNELS: usize = 3;

    pub fn size(&self) -> usize {
        self.meta.size
    }
}

pub fn backbone_meta(rows: usize, cols: usize, target: usize) -> Result<BackboneMeta> {
    if rows == 0 || cols == 0 || target == 0 {
        return Err(Error::InvalidArgument(format!("cannot fit a {rows}x{cols} slice into {target}")));
    }
    let scale = target as f64 / rows.max(cols) as f64;
    let fit = |n: usize| ((n as f64 * scale).round() as usize).clamp(1, target);
    let scaled = [fit(rows), fit(cols)];
    Ok(BackboneMeta { size: target, original: [rows, cols], scaled, scale, pad: [target - scaled[0], target - scaled[1]] })
}

/// Scales the longer side to `target` bilinearly, zero-pads the shorter
/// side at its high end and repeats the plane over three channels.
pub fn prepare_backbone_input(slice: &Slice2D<f32>, target: usize) -> Result<Image2D> {
    let meta = backbone_meta(slice.rows, slice.cols, target)?;
    let src: Vec<f64> = slice.data.iter().map(|&v| v as f64).collect();
    let up = resize_plane(&src, slice.rows, slice.cols, meta.scaled[0], meta.scaled[1]);
    let mut plane = vec![0f32; target * target];
    for r in 0..meta.scaled[0] {
        for c in 0..meta.scaled[1] {
            plane[r * target + c] = up[r * meta.scaled[1] + c] as f32;
        }
    }
    let mut data = Vec::with_capacity(3 * target * target);
    for _ in 0..Image2D::CHANNELS {
        data.extend_from_slice(&plane);
    }
    Ok(Image2D { data, meta })
}

/// Inverse of [`prepare_backbone_input`] for a mask or probability map on
/// the backbone grid: drops the padding, resamples bilinearly to the
/// original slice and keeps values `>= 0.5`.
pub fn restore_slice_mask(values: &[f32], meta: &BackboneMeta) -> Result<Slice2D<u8>> {
    let n = meta.size;
    if values.len() != n * n
        || meta.scaled[0] > n
        || meta.scaled[1] > n
        || meta.scaled[0] + meta.pad[0] != n
        || meta.scaled[1] + meta.pad[1] != n
    {
        return Err(Error::InvalidArgument(format!("{} values do not match backbone metadata {meta:?}", values.len())));
    }
    let [sr, sc] = meta.scaled;
    let mut inner = Vec::with_capacity(sr * sc);
    for r in 0..sr {
        inner.extend(values[r * n..r * n + sc].iter().map(|&v| v as f64));
    }
    let [rows, cols] = meta.original;
    let down = resize_plane(&inner, sr, sc, rows, cols);
    Ok(Slice2D {
        rows,
        cols,
        data: down.iter().map(|&v| (v >= 0.5) as u8).collect(),
        spacing: [0.0; 2],
        index: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_examples() {
        let g = Geometry::with_default_axes([1, 1, 3], [1.0; 3]).unwrap();
        let v = Volume::new(g, vec![0.0025, 0.01, -0.001]).unwrap();
        let w = window_rescale(&v, WINDOW.0, WINDOW.1).unwrap();
        assert_eq!(w.data(), &[0.5, 1.0, 0.0]);
        assert!(window_rescale(&v, 1.0, 1.0).is_err());
    }

    #[test]
    fn crop_box_arithmetic() {
        let g = Geometry::with_default_axes([384, 4, 4], [1.0; 3]).unwrap();
        let m = BinaryMask::from_fn(g.clone(), |x, _, _| (100..=150).contains(&x));
        let b = compute_crop_box([&m], 20).unwrap();
        assert_eq!((b.start[0], b.stop[0]), (80, 171));
        let edge = BinaryMask::from_fn(g.clone(), |x, _, _| x == 0);
        assert_eq!(compute_crop_box([&edge], 20).unwrap().start[0], 0);
        assert!(compute_crop_box([&BinaryMask::zeros(g)], 20).is_err());
        assert!(compute_crop_box(std::iter::empty(), 20).is_err());
    }

    #[test]
    fn reference_backbone_geometry() {
        let m = backbone_meta(200, 256, BACKBONE_SIZE).unwrap();
        assert_eq!(m.scale, 4.0);
        assert_eq!(m.scaled, [800, 1024]);
        assert_eq!(m.pad, [224, 0]);
        assert_eq!(backbone_meta(256, 256, BACKBONE_SIZE).unwrap().pad, [0, 0]);
        assert!(backbone_meta(0, 3, 8).is_err());
    }

    #[test]
    fn constant_backbone_masks_restore_to_constants() {
        let meta = backbone_meta(5, 7, 32).unwrap();
        let ones = restore_slice_mask(&vec![1.0; 32 * 32], &meta).unwrap();
        assert!(ones.data.iter().all(|&v| v == 1));
        let zeros = restore_slice_mask(&vec![0.0; 32 * 32], &meta).unwrap();
        assert!(zeros.data.iter().all(|&v| v == 0));
        assert!(restore_slice_mask(&[0.0; 10], &meta).is_err());
    }
}
