use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Geometry};

/// `2 |GT ∩ SP| / (|GT| + |SP|)` from integer counts. Two empty masks
/// score 1 and exactly one empty mask scores 0.
pub fn dice_score(gt: &BinaryMask, sp: &BinaryMask) -> Result<f64> {
    gt.geometry().ensure_same(sp.geometry())?;
    let (mut a, mut b, mut both) = (0u64, 0u64, 0u64);
    for (&x, &y) in gt.data().iter().zip(sp.data()) {
        a += x as u64;
        b += y as u64;
        both += (x & y) as u64;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HausdorffMode {
    /// 95th percentile of the union of both directed distance sets.
    #[default]
    Pooled,
    /// Larger of the two directed 95th percentiles.
    MaxDirected,
}

/// Foreground voxels with at least one face neighbour that is background
/// or outside the grid.
pub fn surface_voxels(mask: &BinaryMask) -> Vec<usize> {
    let g = mask.geometry();
    let [nx, ny, nz] = g.shape;
    let d = mask.data();
    let mut out = Vec::new();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let i = g.index(x, y, z);
                if d[i] == 0 {
                    continue;
                }
                let border = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                let exposed = border
                    || d[i - ny * nz] == 0
                    || d[i + ny * nz] == 0
                    || d[i - nz] == 0
                    || d[i + nz] == 0
                    || d[i - 1] == 0
                    || d[i + 1] == 0;
                if exposed {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// seed, by separable lower envelopes of parabolas.
pub fn squared_distance_transform(g: &Geometry, seeds: &[usize]) -> Vec<f64> {
    let n = g.numel();
    let mut f = vec![f64::INFINITY; n];
    for &s in seeds {
        f[s] = 0.0;
    }
    let [_, ny, nz] = g.shape;
    let mut line = Vec::new();
    let mut out = Vec::new();
    let mut scratch = Envelope::default();
    for axis in [2, 1, 0] {
        let len = g.shape[axis];
        let stride = [ny * nz, nz, 1][axis];
        line.resize(len, 0.0);
        out.resize(len, 0.0);
        for start in 0..n {
            let c = [start / (ny * nz), (start / nz) % ny, start % nz];
            if c[axis] != 0 {
                continue;
            }
            for k in 0..len {
                line[k] = f[start + k * stride];
            }
            scratch.run(&line, g.spacing[axis], &mut out);
            for k in 0..len {
                f[start + k * stride] = out[k];
            }
        }
    }
    f
}

#[derive(Default)]
struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn run(&mut self, f: &[f64], w: f64, out: &mut [f64]) {
        let pos = |q: usize| q as f64 * w;
        self.v.clear();
        self.z.clear();
        for q in 0..f.len() {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                let Some(&r) = self.v.last() else { break };
                let s = ((f[q] + pos(q) * pos(q)) - (f[r] + pos(r) * pos(r))) / (2.0 * (pos(q) - pos(r)));
                if s <= *self.z.last().unwrap() {
                    self.v.pop();
                    self.z.pop();
                } else {
                    self.v.push(q);
                    self.z.push(s);
                    break;
                }
            }
            if self.v.is_empty() {
                self.v.push(q);
                self.z.push(f64::NEG_INFINITY);
            }
        }
        if self.v.is_empty() {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            let x = pos(q);
            while k + 1 < self.v.len() && self.z[k + 1] < x {
                k += 1;
            }
            let p = self.v[k];
            let d = x - pos(p);
            *o = d * d + f[p];
        }
    }
}

/// Distances (mm) from each surface voxel of `from` to the nearest surface
/// voxel of `to`.
pub fn directed_surface_distances(from: &BinaryMask, to: &BinaryMask) -> Result<Vec<f64>> {
    from.geometry().ensure_same(to.geometry())?;
    let target = surface_voxels(to);
    let source = surface_voxels(from);
    if target.is_empty() || source.is_empty() {
        return Err(Error::Undefined("surface distance with an empty mask".into()));
    }
    let dt = squared_distance_transform(to.geometry(), &target);
    Ok(source.iter().map(|&i| dt[i].sqrt()).collect())
}

/// Percentile with linear interpolation between closest ranks
/// (`q` in `[0, 100]`). Sorts `values` in place.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// 95th percentile Hausdorff distance between the surfaces of two masks,
/// in mm under the masks' spacing. Undefined if either mask is empty.
pub fn hausdorff95(gt: &BinaryMask, sp: &BinaryMask, mode: HausdorffMode) -> Result<f64> {
    let mut ab = directed_surface_distances(gt, sp)?;
    let mut ba = directed_surface_distances(sp, gt)?;
    Ok(match mode {
        HausdorffMode::Pooled => {
            ab.append(&mut ba);
            percentile(&mut ab, 95.0)
        }
        HausdorffMode::MaxDirected => percentile(&mut ab, 95.0).max(percentile(&mut ba, 95.0)),
    })
}

/// Classical (maximum) symmetric Hausdorff distance between surfaces.
pub fn hausdorff_max(gt: &BinaryMask, sp: &BinaryMask) -> Result<f64> {
    let ab = directed_surface_distances(gt, sp)?;
    let ba = directed_surface_distances(sp, gt)?;
    Ok(ab.into_iter().chain(ba).fold(0.0, f64::max))
}

/// Foreground count divided by the number of occupied columns along
/// `si_axis`, times the spacing along that axis.
pub fn avg_transverse_thickness(mask: &BinaryMask, si_axis: usize) -> Result<f64> {
    if si_axis > 2 {
        return Err(Error::InvalidArgument(format!("axis {si_axis}")));
    }
    let proj = transverse_projection(mask, si_axis)?;
    let columns = proj.data.iter().filter(|&&c| c > 0).count();
    if columns == 0 {
        return Err(Error::Undefined("thickness of an empty mask".into()));
    }
    let total: u64 = proj.data.iter().map(|&c| c as u64).sum();
    Ok(total as f64 * mask.spacing()[si_axis] / columns as f64)
}

/// Per-column foreground counts after summing along one axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Projection {
    /// Extents of the two remaining axes, in their original order.
    pub shape: [usize; 2],
    pub data: Vec<u32>,
}

impl Projection {
    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.data[r * self.shape[1] + c]
    }
}

pub fn transverse_projection(mask: &BinaryMask, si_axis: usize) -> Result<Projection> {
    if si_axis > 2 {
        return Err(Error::InvalidArgument(format!("axis {si_axis}")));
    }
    let g = mask.geometry();
    let keep: Vec<usize> = (0..3).filter(|&a| a != si_axis).collect();
    let shape = [g.shape[keep[0]], g.shape[keep[1]]];
    let mut data = vec![0u32; shape[0] * shape[1]];
    for (i, &v) in mask.data().iter().enumerate() {
        if v == 1 {
            let c = g.coords(i);
            data[c[keep[0]] * shape[1] + c[keep[1]]] += 1;
        }
    }
    Ok(Projection { shape, data })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Option<Self> {
        match n {
            6 => Some(Self::Six),
            18 => Some(Self::Eighteen),
            26 => Some(Self::TwentySix),
            _ => None,
        }
    }

    pub fn count(self) -> u32 {
        match self {
            Self::Six => 6,
            Self::Eighteen => 18,
            Self::TwentySix => 26,
        }
    }

    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_l1 = match self {
            Self::Six => 1,
            Self::Eighteen => 2,
            Self::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dx in -1..=1isize {
            for dy in -1..=1isize {
                for dz in -1..=1isize {
                    let l1 = dx.abs() + dy.abs() + dz.abs();
                    if l1 > 0 && l1 <= max_l1 {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Labels `1..=count` on foreground voxels, `0` on background. Components
/// are numbered in the order their first voxel appears in a C-order scan.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> (usize, Vec<u32>) {
    let g = mask.geometry();
    let shape = g.shape.map(|s| s as isize);
    let offsets = connectivity.offsets();
    let d = mask.data();
    let mut labels = vec![0u32; d.len()];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..d.len() {
        if d[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let c = g.coords(i).map(|v| v as isize);
            for o in &offsets {
                let n = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
                if (0..3).any(|a| n[a] < 0 || n[a] >= shape[a]) {
                    continue;
                }
                let j = g.index(n[0] as usize, n[1] as usize, n[2] as usize);
                if d[j] == 1 && labels[j] == 0 {
                    labels[j] = count;
                    stack.push(j);
                }
            }
        }
    }
    (count as usize, labels)
}
