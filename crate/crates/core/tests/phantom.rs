use menisc_core::evaluation::{avg_transverse_thickness, connected_components, Connectivity};
use menisc_core::phantom::{
    generate_phantom, sample_specs, PhantomSpec, BACKGROUND_INTENSITY, EXPERIMENT_SHAPE, EXPERIMENT_SPACING_MM,
    MENISCUS_INTENSITY,
};
use menisc_core::volume::Geometry;

fn grid() -> Geometry {
    Geometry::with_default_axes(EXPERIMENT_SHAPE, EXPERIMENT_SPACING_MM).unwrap()
}

#[test]
fn sampled_phantoms_have_two_bodies() {
    for spec in sample_specs(20, 7, 0.0002, true) {
        let (_, mask) = generate_phantom(&spec, &grid()).unwrap();
        assert_eq!(connected_components(&mask, Connectivity::TwentySix).0, 2, "{spec:?}");
    }
}

#[test]
fn noiseless_plain_phantom_has_two_intensities() {
    let spec = PhantomSpec { noise_level: 0.0, distractors: false, ..PhantomSpec::default() };
    let (volume, mask) = generate_phantom(&spec, &grid()).unwrap();
    for (&v, &m) in volume.data().iter().zip(mask.data()) {
        let want = if m == 1 { MENISCUS_INTENSITY } else { BACKGROUND_INTENSITY };
        assert_eq!(v, want);
    }
}

#[test]
fn flat_wedge_thickness_matches_height() {
    let g = grid();
    let si = g.si_axis().unwrap();
    for h in [1.5, 2.0, 2.8] {
        let spec = PhantomSpec { inner_height_ratio: 1.0, peak_height_mm: h, ..PhantomSpec::default() };
        let (_, mask) = generate_phantom(&spec, &g).unwrap();
        let t = avg_transverse_thickness(&mask, si).unwrap();
        assert!((t - h).abs() <= g.spacing[si], "height {h}: thickness {t}");
    }
}

#[test]
fn generation_is_pure() {
    let spec = sample_specs(1, 3, 0.0002, true).remove(0);
    let (v1, m1) = generate_phantom(&spec, &grid()).unwrap();
    let (v2, m2) = generate_phantom(&spec, &grid()).unwrap();
    let bytes = |v: &[f32]| v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>();
    assert_eq!(bytes(v1.data()), bytes(v2.data()));
    assert_eq!(m1, m2);
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        PhantomSpec { inner_radius_mm: 5.0, ..PhantomSpec::default() },
        PhantomSpec { opening_angle_deg: 360.0, ..PhantomSpec::default() },
        PhantomSpec { peak_height_mm: 0.0, ..PhantomSpec::default() },
        PhantomSpec { inner_height_ratio: 1.5, ..PhantomSpec::default() },
        PhantomSpec { noise_level: f64::NAN, ..PhantomSpec::default() },
        PhantomSpec { separation_mm: 0.1, ..PhantomSpec::default() },
        PhantomSpec { offset_mm: [20.0, 0.0, 0.0], ..PhantomSpec::default() },
    ];
    for spec in bad {
        assert!(generate_phantom(&spec, &grid()).is_err(), "{spec:?}");
    }
    let small = Geometry::with_default_axes([16, 32, 32], EXPERIMENT_SPACING_MM).unwrap();
    assert!(generate_phantom(&PhantomSpec::default(), &small).is_err());
}
