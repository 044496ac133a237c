//! Synthetic knee phantoms: two C-shaped wedges standing in for the medial
//! and lateral menisci, embedded in cartilage and bone bands.
//!
//! Each body is an annulus sector in the transverse plane (the two axes
//! other than superior-inferior) with its opening facing the other body.
//! Along superior-inferior it rises from a shared base plane to a height
//! that grows linearly from the inner edge to the outer rim, which gives
//! the wedge cross-section. All lengths are in millimetres and are
//! rasterized at voxel centres `index * spacing`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Geometry, Volume, REFERENCE_SPACING_MM};

pub const BACKGROUND_INTENSITY: f32 = 0.0008;
pub const MENISCUS_INTENSITY: f32 = 0.0041;
pub const CARTILAGE_INTENSITY: f32 = 0.0029;
pub const BONE_INTENSITY: f32 = 0.0012;
/// Brighter than the clip window, so it saturates after windowing.
pub const FAT_INTENSITY: f32 = 0.008;

pub const MIN_SHAPE: [usize; 3] = [32, 32, 16];

/// Grid used by the desk-scale experiments.
pub const EXPERIMENT_SHAPE: [usize; 3] = [32, 32, 32];
pub const EXPERIMENT_SPACING_MM: [f64; 3] = REFERENCE_SPACING_MM;

const CARTILAGE_THICKNESS_MM: f64 = 1.4;
const FEMORAL_GAP_MM: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub outer_radius_mm: f64,
    pub inner_radius_mm: f64,
    /// Angular width of the gap in each C.
    pub opening_angle_deg: f64,
    /// Height at the outer rim.
    pub peak_height_mm: f64,
    /// Height at the inner edge as a fraction of the peak; 1 gives a flat
    /// slab of uniform height.
    pub inner_height_ratio: f64,
    /// Clearance between the two bodies' outer circles.
    pub separation_mm: f64,
    /// Shift of the whole knee from the grid centre, per axis.
    pub offset_mm: [f64; 3],
    /// Standard deviation of additive Gaussian noise.
    pub noise_level: f64,
    pub distractors: bool,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            outer_radius_mm: 4.0,
            inner_radius_mm: 1.8,
            opening_angle_deg: 110.0,
            peak_height_mm: 2.8,
            inner_height_ratio: 0.35,
            separation_mm: 2.0,
            offset_mm: [0.0; 3],
            noise_level: 0.0002,
            distractors: true,
            seed: 0,
        }
    }
}

struct Layout {
    si: usize,
    /// The bodies sit side by side along `lr`.
    lr: usize,
    ap: usize,
    centers: [[f64; 2]; 2],
    base_si: f64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("phantom: {m}")));
        let finite = [
            self.outer_radius_mm,
            self.inner_radius_mm,
            self.opening_angle_deg,
            self.peak_height_mm,
            self.inner_height_ratio,
            self.separation_mm,
            self.noise_level,
        ]
        .iter()
        .chain(&self.offset_mm)
        .all(|v| v.is_finite());
        if !finite {
            return bad("non-finite field".into());
        }
        if !(0.0 < self.inner_radius_mm && self.inner_radius_mm < self.outer_radius_mm) {
            return bad(format!("need 0 < inner {} < outer {}", self.inner_radius_mm, self.outer_radius_mm));
        }
        if !(0.0 < self.opening_angle_deg && self.opening_angle_deg < 360.0) {
            return bad(format!("opening angle {} outside (0, 360)", self.opening_angle_deg));
        }
        if self.peak_height_mm <= 0.0 {
            return bad(format!("peak height {} must be positive", self.peak_height_mm));
        }
        if !(0.0 < self.inner_height_ratio && self.inner_height_ratio <= 1.0) {
            return bad(format!("inner height ratio {} outside (0, 1]", self.inner_height_ratio));
        }
        if self.separation_mm < 0.0 || self.noise_level < 0.0 {
            return bad("separation and noise must be non-negative".into());
        }
        Ok(())
    }

    fn layout(&self, g: &Geometry) -> Result<Layout> {
        let si = g.si_axis()?;
        let lr = g.sagittal_axis()?;
        let ap = 3 - si - lr;
        let mid = |a: usize| (g.shape[a] - 1) as f64 * g.spacing[a] / 2.0 + self.offset_mm[a];
        let d = self.outer_radius_mm + self.separation_mm / 2.0;
        let centers = [[mid(lr) - d, mid(ap)], [mid(lr) + d, mid(ap)]];
        let base_si = mid(si) - self.peak_height_mm / 2.0;
        Ok(Layout { si, lr, ap, centers, base_si })
    }

    /// Height above the base plane at transverse position `(lr, ap)`, or
    /// `None` outside both bodies.
    fn height_at(&self, lay: &Layout, lr: f64, ap: f64) -> Option<f64> {
        let half_gap = self.opening_angle_deg.to_radians() / 2.0;
        for (k, c) in lay.centers.iter().enumerate() {
            let (dl, da) = (lr - c[0], ap - c[1]);
            let r = dl.hypot(da);
            if r < self.inner_radius_mm || r > self.outer_radius_mm {
                continue;
            }
            // the first body opens towards +lr, the second towards -lr
            let toward = if k == 0 { dl } else { -dl };
            let theta = da.atan2(toward).abs();
            if theta < half_gap {
                continue;
            }
            let t = (r - self.inner_radius_mm) / (self.outer_radius_mm - self.inner_radius_mm);
            let ratio = self.inner_height_ratio + (1.0 - self.inner_height_ratio) * t;
            return Some(self.peak_height_mm * ratio);
        }
        None
    }

    fn check_fits(&self, g: &Geometry, lay: &Layout) -> Result<()> {
        for a in 0..3 {
            if g.shape[a] < MIN_SHAPE[a] {
                return Err(Error::Config(format!("phantom grid {:?} smaller than {MIN_SHAPE:?}", g.shape)));
            }
        }
        let extent = |a: usize| (g.shape[a] - 1) as f64 * g.spacing[a];
        let inside = |a: usize, lo: f64, hi: f64| lo >= g.spacing[a] && hi <= extent(a) - g.spacing[a];
        let r = self.outer_radius_mm;
        let ok = inside(lay.lr, lay.centers[0][0] - r, lay.centers[1][0] + r)
            && inside(lay.ap, lay.centers[0][1] - r, lay.centers[0][1] + r)
            && inside(lay.si, lay.base_si, lay.base_si + self.peak_height_mm);
        if !ok {
            return Err(Error::Config("phantom bodies do not fit inside the grid with a one-voxel border".into()));
        }
        let diag = g.spacing.iter().map(|s| s * s).sum::<f64>().sqrt();
        if self.separation_mm <= diag {
            return Err(Error::Config(format!(
                "separation {} mm would let the bodies touch (voxel diagonal {diag:.3} mm)",
                self.separation_mm
            )));
        }
        let thinnest = self.peak_height_mm * self.inner_height_ratio;
        if thinnest < g.spacing[lay.si] || self.outer_radius_mm - self.inner_radius_mm < 2.0 * g.spacing[lay.lr].max(g.spacing[lay.ap]) {
            return Err(Error::Config("phantom wedge thinner than the voxel grid resolves".into()));
        }
        Ok(())
    }
}

/// Rasterizes the phantom. The result depends only on the arguments.
pub fn generate_phantom(spec: &PhantomSpec, geometry: &Geometry) -> Result<(Volume, BinaryMask)> {
    spec.validate()?;
    let lay = spec.layout(geometry)?;
    spec.check_fits(geometry, &lay)?;
    let g = geometry;
    let n = g.numel();
    let mut mask = vec![0u8; n];
    let mut image = vec![BACKGROUND_INTENSITY; n];
    let top_si = lay.base_si + spec.peak_height_mm;
    for i in 0..n {
        let c = g.coords(i);
        let mm = |a: usize| c[a] as f64 * g.spacing[a];
        let (lr, ap, si) = (mm(lay.lr), mm(lay.ap), mm(lay.si));
        if let Some(h) = spec.height_at(&lay, lr, ap) {
            if si >= lay.base_si && si < lay.base_si + h {
                mask[i] = 1;
                image[i] = MENISCUS_INTENSITY;
                continue;
            }
        }
        if spec.distractors {
            let femoral = top_si + FEMORAL_GAP_MM;
            image[i] = if si < lay.base_si - CARTILAGE_THICKNESS_MM || si >= femoral + CARTILAGE_THICKNESS_MM {
                BONE_INTENSITY
            } else if si < lay.base_si || si >= femoral {
                CARTILAGE_INTENSITY
            } else {
                BACKGROUND_INTENSITY
            };
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if spec.distractors {
        // a few bright fat pads, never over the meniscus
        let extent: Vec<f64> = (0..3).map(|a| (g.shape[a] - 1) as f64 * g.spacing[a]).collect();
        for _ in 0..3 {
            let centre: Vec<f64> = extent.iter().map(|&e| rng.gen_range(0.0..=e)).collect();
            let radius = rng.gen_range(0.6..1.2);
            for i in 0..n {
                let c = g.coords(i);
                let d2: f64 = (0..3).map(|a| (c[a] as f64 * g.spacing[a] - centre[a]).powi(2)).sum();
                if d2 <= radius * radius && mask[i] == 0 {
                    image[i] = FAT_INTENSITY;
                }
            }
        }
    }
    if spec.noise_level > 0.0 {
        let normal = Normal::new(0.0, spec.noise_level).map_err(|e| Error::Config(e.to_string()))?;
        for v in image.iter_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    Ok((Volume::new(g.clone(), image)?, BinaryMask::new(g.clone(), mask)?))
}

/// Draws `count` varied specs (size, opening, height and pose) from one
/// seed. Every draw fits [`EXPERIMENT_SHAPE`] at [`EXPERIMENT_SPACING_MM`].
pub fn sample_specs(count: usize, seed: u64, noise_level: f64, distractors: bool) -> Vec<PhantomSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| PhantomSpec {
            outer_radius_mm: rng.gen_range(3.6..4.2),
            inner_radius_mm: rng.gen_range(1.5..2.0),
            opening_angle_deg: rng.gen_range(90.0..130.0),
            peak_height_mm: rng.gen_range(2.4..3.2),
            inner_height_ratio: rng.gen_range(0.3..0.45),
            separation_mm: rng.gen_range(1.4..2.2),
            offset_mm: [rng.gen_range(-0.4..0.4), rng.gen_range(-0.8..0.8), rng.gen_range(-0.4..0.4)],
            noise_level,
            distractors,
            seed: rng.gen(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Geometry {
        Geometry::with_default_axes(EXPERIMENT_SHAPE, EXPERIMENT_SPACING_MM).unwrap()
    }

    #[test]
    fn invalid_specs_rejected() {
        let g = grid();
        let cases = [
            PhantomSpec { inner_radius_mm: 5.0, ..Default::default() },
            PhantomSpec { opening_angle_deg: 360.0, ..Default::default() },
            PhantomSpec { peak_height_mm: 0.0, ..Default::default() },
            PhantomSpec { outer_radius_mm: 9.0, ..Default::default() },
            PhantomSpec { separation_mm: 0.5, ..Default::default() },
        ];
        for spec in cases {
            assert!(generate_phantom(&spec, &g).is_err(), "{spec:?}");
        }
        let small = Geometry::with_default_axes([16, 32, 32], EXPERIMENT_SPACING_MM).unwrap();
        assert!(generate_phantom(&PhantomSpec::default(), &small).is_err());
    }

    #[test]
    fn wedge_is_taller_at_the_rim() {
        let spec = PhantomSpec::default();
        let g = grid();
        let lay = spec.layout(&g).unwrap();
        let c = lay.centers[0];
        let rim = spec.height_at(&lay, c[0] - 3.9, c[1]).unwrap();
        let inner = spec.height_at(&lay, c[0] - 1.9, c[1]).unwrap();
        assert!(rim > 2.0 * inner);
        // inside the opening
        assert!(spec.height_at(&lay, c[0] + 3.0, c[1]).is_none());
    }

    #[test]
    fn sampled_specs_fit_the_experiment_grid() {
        let g = grid();
        for spec in sample_specs(40, 3, 0.0, true) {
            generate_phantom(&spec, &g).unwrap();
        }
    }
}
