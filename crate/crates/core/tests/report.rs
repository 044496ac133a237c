mod common;

use common::mask_from;
use menisc_core::evaluation::plots::{bland_altman_svg, violin_svg, write_projection_png};
use menisc_core::evaluation::{
    bland_altman, evaluate_case, evaluate_test_set, read_cases_csv, transverse_projection, EvalOptions,
    MetricsReport, Summary,
};
use menisc_core::phantom::{generate_phantom, sample_specs, EXPERIMENT_SHAPE, EXPERIMENT_SPACING_MM};
use menisc_core::volume::{BinaryMask, Geometry};

fn phantom_masks(n: usize) -> Vec<BinaryMask> {
    let g = Geometry::with_default_axes(EXPERIMENT_SHAPE, EXPERIMENT_SPACING_MM).unwrap();
    sample_specs(n, 11, 0.0, false).iter().map(|s| generate_phantom(s, &g).unwrap().1).collect()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("case-{i}")).collect()
}

#[test]
fn perfect_predictions() {
    let gts = phantom_masks(4);
    let report = evaluate_test_set(&ids(4), &gts, &gts, &EvalOptions::default()).unwrap();
    let dice = report.dice.unwrap();
    assert_eq!((dice.mean, dice.sd), (1.0, 0.0));
    let hd = report.hd95_mm.unwrap();
    assert_eq!((hd.mean, hd.sd), (0.0, 0.0));
    assert_eq!(report.thickness_diff_mm.unwrap().mean, 0.0);
    assert_eq!(report.components_pred.unwrap().mean, 2.0);
    assert_eq!(report.undefined_hd95, 0);
}

fn approx(a: Option<Summary>, b: Option<Summary>) {
    match (a, b) {
        (Some(a), Some(b)) => {
            assert_eq!(a.n, b.n);
            assert!((a.mean - b.mean).abs() <= 1e-12 && (a.sd - b.sd).abs() <= 1e-12, "{a:?} vs {b:?}");
        }
        (None, None) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn csv_recomputation_matches_json() {
    let gts = phantom_masks(5);
    // shift each prediction by a case-dependent number of SI voxels
    let preds: Vec<BinaryMask> = gts
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let [a, b, c] = m.shape();
            let mut p = BinaryMask::zeros(m.geometry().clone());
            for x in 0..a {
                for y in 0..b {
                    for z in 0..c {
                        let grow = y + 1 < b && m.get(x, y + 1, z) && k % 2 == 0;
                        if m.get(x, y, z) && (z + k) % 7 != 0 || grow {
                            p.set(x, y, z, true);
                        }
                    }
                }
            }
            p
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let report = evaluate_test_set(&ids(5), &preds, &gts, &EvalOptions::default()).unwrap();
    let (csv, json) = (dir.path().join("metrics.csv"), dir.path().join("summary.json"));
    report.write_csv(&csv).unwrap();
    report.write_json(&json).unwrap();

    let stored = MetricsReport::read_json(&json).unwrap();
    let recomputed = MetricsReport::from_cases(read_cases_csv(&csv).unwrap()).unwrap();
    assert!(stored.dice.unwrap().mean < 1.0);
    approx(stored.dice, recomputed.dice);
    approx(stored.hd95_mm, recomputed.hd95_mm);
    approx(stored.thickness_pred_mm, recomputed.thickness_pred_mm);
    approx(stored.thickness_gt_mm, recomputed.thickness_gt_mm);
    approx(stored.thickness_diff_mm, recomputed.thickness_diff_mm);
    approx(stored.components_pred, recomputed.components_pred);
    approx(stored.components_gt, recomputed.components_gt);
    let (a, b) = (stored.bland_altman.unwrap(), recomputed.bland_altman.unwrap());
    assert!((a.loa_low - b.loa_low).abs() <= 1e-12 && (a.loa_high - b.loa_high).abs() <= 1e-12);
}

#[test]
fn empty_prediction_leaves_distances_undefined() {
    let gt = mask_from([6, 6, 6], EXPERIMENT_SPACING_MM, |x, y, z| x > 1 && y > 1 && z > 1);
    let empty = BinaryMask::zeros(gt.geometry().clone());
    let case = evaluate_case("c", &empty, &gt, &EvalOptions::default()).unwrap();
    assert_eq!(case.dice, 0.0);
    assert_eq!(case.hd95_mm, None);
    assert_eq!(case.thickness_pred_mm, None);
    assert_eq!(case.thickness_diff_mm, None);
    assert_eq!(case.components_pred, 0);

    let report = MetricsReport::from_cases(vec![case]).unwrap();
    assert_eq!(report.undefined_hd95, 1);
    assert!(report.hd95_mm.is_none());
    assert!(report.bland_altman.is_none());
}

#[test]
fn mismatched_lists_are_rejected() {
    let gts = phantom_masks(2);
    assert!(evaluate_test_set(&ids(1), &gts, &gts, &EvalOptions::default()).is_err());
    assert!(evaluate_test_set(&[], &[], &[], &EvalOptions::default()).is_err());
}

#[test]
fn limits_of_agreement_for_unit_differences() {
    let ba = bland_altman(&[(3.0, 2.0), (2.0, 3.0)]).unwrap();
    assert_eq!(ba.mean_difference, 0.0);
    assert!((ba.loa_low + 2.7719).abs() < 1e-4);
    assert!((ba.loa_high - 2.7719).abs() < 1e-4);
}

#[test]
fn plots_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let gt = &phantom_masks(1)[0];
    let proj = transverse_projection(gt, 1).unwrap();
    let png = dir.path().join("projection.png");
    write_projection_png(&proj, None, &png).unwrap();
    let img = image::open(&png).unwrap().to_luma8();
    assert_eq!((img.height() as usize, img.width() as usize), (proj.shape[0], proj.shape[1]));
    assert_eq!(img.pixels().map(|p| p.0[0]).max(), Some(255));

    let violin = violin_svg(&[("a".into(), vec![0.8, 0.9, 0.85]), ("b<c".into(), vec![0.7])], "Dice", "score");
    assert!(violin.starts_with("<svg") && violin.trim_end().ends_with("</svg>"));
    assert!(violin.contains("b&lt;c"));
    let ba = bland_altman(&[(3.0, 2.0), (2.0, 3.0), (2.5, 2.4)]).unwrap();
    let svg = bland_altman_svg(&ba, "Thickness", "mm");
    assert_eq!(svg.matches("<circle").count(), 3);
}
