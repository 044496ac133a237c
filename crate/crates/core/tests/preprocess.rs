mod common;

use common::mask_from;
use menisc_core::preprocess::{
    compute_crop_box, crop, extract_mask_slices, extract_slices, prepare_backbone_input, restore_slice_mask,
    stack_slices, stack_volume_slices, window_rescale, CropBox, Slice2D, BACKBONE_SIZE, CROP_MARGIN_VOXELS,
};
use menisc_core::volume::{BinaryMask, Geometry, Volume, REFERENCE_SHAPE, REFERENCE_SPACING_MM};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn reference_crop_extents() {
    let g = Geometry::with_default_axes(REFERENCE_SHAPE, REFERENCE_SPACING_MM).unwrap();
    // two annotated knees whose union spans 160 x 216 voxels in-plane
    let a = BinaryMask::from_fn(g.clone(), |x, y, z| (100..200).contains(&x) && (80..200).contains(&y) && z > 4);
    let b = BinaryMask::from_fn(g.clone(), |x, y, z| (180..260).contains(&x) && (150..296).contains(&y) && z < 150);
    let bx = compute_crop_box([&a, &b], CROP_MARGIN_VOXELS).unwrap();
    assert_eq!(bx.extents(), [200, 256, 160]);
    let v = Volume::from_fn(g, |x, y, z| (x + y + z) as f32).unwrap();
    let c = crop(&v, &bx).unwrap();
    assert_eq!(c.shape(), [200, 256, 160]);
    assert_eq!(c.spacing(), REFERENCE_SPACING_MM);
    assert_eq!(c.get(0, 0, 0), v.get(80, 60, 0));
    let slices = extract_slices(&c, 2).unwrap();
    assert_eq!(slices.len(), 160);
    assert_eq!((slices[0].rows, slices[0].cols), (200, 256));
}

#[test]
fn crop_identity_and_bounds() {
    let g = Geometry::with_default_axes([5, 6, 7], [1.0; 3]).unwrap();
    let v = Volume::from_fn(g, |x, y, z| (x * 100 + y * 10 + z) as f32).unwrap();
    assert_eq!(crop(&v, &CropBox::full([5, 6, 7])).unwrap(), v);
    assert!(crop(&v, &CropBox { start: [0; 3], stop: [5, 6, 8] }).is_err());
    assert!(crop(&v, &CropBox { start: [2, 0, 0], stop: [2, 6, 7] }).is_err());
}

#[test]
fn slice_stack_roundtrip_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let shape = [rng.gen_range(1..12), rng.gen_range(1..12), rng.gen_range(1..12)];
        let density = rng.gen_range(0.0..1.0);
        let m = mask_from(shape, [0.4, 0.5, 0.7], |_, _, _| rng.gen_bool(density));
        for axis in 0..3 {
            let s = extract_mask_slices(&m, axis).unwrap();
            assert_eq!(s.len(), shape[axis]);
            assert!(s.iter().enumerate().all(|(k, s)| s.index == k));
            assert_eq!(stack_slices(&s, m.geometry(), axis).unwrap(), m);
        }
    }
    let g = Geometry::with_default_axes([3, 4, 5], [1.0; 3]).unwrap();
    let v = Volume::from_fn(g.clone(), |x, y, z| (x * 20 + y * 5 + z) as f32).unwrap();
    assert_eq!(stack_volume_slices(&extract_slices(&v, 1).unwrap(), &g, 1).unwrap(), v);
}

#[test]
fn stacking_checks_count_order_and_shape() {
    let m = mask_from([3, 4, 5], [1.0; 3], |x, y, z| (x + 2 * y + z) % 3 == 0);
    let mut s = extract_mask_slices(&m, 2).unwrap();
    assert!(stack_slices(&s[..4], m.geometry(), 2).is_err());
    assert!(stack_slices(&s, m.geometry(), 3).is_err());
    s.swap(0, 1);
    assert_ne!(stack_slices(&s, m.geometry(), 2).unwrap(), m);
    s[2].cols += 1;
    assert!(stack_slices(&s, m.geometry(), 2).is_err());
}

#[test]
fn backbone_input_layout() {
    let zero = Slice2D { rows: 200, cols: 256, data: vec![0.0f32; 200 * 256], spacing: [1.0; 2], index: 0 };
    let img = prepare_backbone_input(&zero, BACKBONE_SIZE).unwrap();
    assert_eq!(img.data.len(), 3 * BACKBONE_SIZE * BACKBONE_SIZE);
    assert!(img.data.iter().all(|&v| v == 0.0));
    assert_eq!((img.meta.scale, img.meta.scaled, img.meta.pad), (4.0, [800, 1024], [224, 0]));

    let ones = Slice2D { rows: 4, cols: 2, data: vec![1.0f32; 8], spacing: [1.0; 2], index: 0 };
    let img = prepare_backbone_input(&ones, 16).unwrap();
    let plane = 16 * 16;
    for ch in 0..3 {
        for r in 0..16 {
            for c in 0..16 {
                let want = if c < 8 { 1.0 } else { 0.0 };
                assert_eq!(img.data[ch * plane + r * 16 + c], want, "{ch} {r} {c}");
            }
        }
    }
    let empty = Slice2D::<f32> { rows: 0, cols: 3, data: vec![], spacing: [1.0; 2], index: 0 };
    assert!(prepare_backbone_input(&empty, 16).is_err());
}

fn binary_slice(rows: usize, cols: usize, seed: u64) -> Slice2D<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Slice2D { rows, cols, data: (0..rows * cols).map(|_| rng.gen_bool(0.5) as u8).collect(), spacing: [1.0; 2], index: 0 }
}

fn roundtrip(s: &Slice2D<u8>, target: usize) -> Vec<u8> {
    let f = Slice2D { rows: s.rows, cols: s.cols, data: s.data.iter().map(|&v| v as f32).collect(), spacing: s.spacing, index: 0 };
    let img = prepare_backbone_input(&f, target).unwrap();
    restore_slice_mask(&img.data[..target * target], &img.meta).unwrap().data
}

#[test]
fn random_binary_slices_survive_the_backbone_grid() {
    for seed in 0..4 {
        let s = binary_slice(8, 10, seed);
        assert_eq!(roundtrip(&s, BACKBONE_SIZE), s.data);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prepare_restore_is_exact(seed in any::<u64>(), rows in 2usize..12, cols in 2usize..12, extra in 0usize..40) {
        // upsampling by at least 4 keeps every source pixel's footprint
        let target = 4 * rows.max(cols) + extra;
        let s = binary_slice(rows, cols, seed);
        prop_assert_eq!(roundtrip(&s, target), s.data);
    }

    #[test]
    fn window_is_monotone_into_unit_interval(mut values in proptest::collection::vec(-0.01f32..0.02, 1..64)) {
        values.sort_by(|a, b| a.total_cmp(b));
        let g = Geometry::with_default_axes([1, 1, values.len()], [1.0; 3]).unwrap();
        let w = window_rescale(&Volume::new(g, values).unwrap(), 0.0, 0.005).unwrap();
        prop_assert!(w.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(w.data().windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn crop_box_contains_foreground(seed in any::<u64>(), n in 1usize..4, margin in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks: Vec<BinaryMask> = (0..n)
            .map(|_| mask_from([9, 7, 8], [1.0; 3], |_, _, _| rng.gen_bool(0.05)))
            .collect();
        prop_assume!(masks.iter().any(|m| !m.is_empty()));
        let b = compute_crop_box(&masks, margin).unwrap();
        for m in &masks {
            for (i, &v) in m.data().iter().enumerate() {
                if v == 1 {
                    prop_assert!(b.contains(m.geometry().coords(i)));
                }
            }
            let c = crop(m, &b).unwrap();
            prop_assert_eq!(c.count(), m.count());
        }
    }
}
