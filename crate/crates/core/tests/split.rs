use std::collections::BTreeSet;

use menisc_core::split::{split_dataset, Subset, IWOAI_PATIENT_COUNTS, VOLUMES_PER_PATIENT};
use menisc_core::volume::REFERENCE_SHAPE;
use proptest::prelude::*;

fn patients(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("patient-{i:03}")).collect()
}

#[test]
fn reference_split_sizes() {
    let split = split_dataset(&patients(88), IWOAI_PATIENT_COUNTS, 42).unwrap();
    let volumes = split.volume_counts(VOLUMES_PER_PATIENT);
    assert_eq!(volumes, [120, 28, 28]);
    let slices = volumes.map(|v| v * REFERENCE_SHAPE[2]);
    assert_eq!(slices, [19200, 4480, 4480]);
}

#[test]
fn same_seed_same_split() {
    let a = split_dataset(&patients(88), IWOAI_PATIENT_COUNTS, 7).unwrap();
    let b = split_dataset(&patients(88), IWOAI_PATIENT_COUNTS, 7).unwrap();
    let c = split_dataset(&patients(88), IWOAI_PATIENT_COUNTS, 8).unwrap();
    assert_eq!(a.assignment, b.assignment);
    assert_ne!(a.assignment, c.assignment);
}

#[test]
fn counts_must_cover_population() {
    assert!(split_dataset(&patients(88), [60, 14, 13], 0).is_err());
}

proptest! {
    #[test]
    fn split_is_a_partition(n in 3usize..60, a in 0.0f64..1.0, b in 0.0f64..1.0, seed in any::<u64>()) {
        let train = ((n as f64) * a * 0.8) as usize;
        let val = (((n - train) as f64) * b) as usize;
        let counts = [train, val, n - train - val];
        let ids = patients(n);
        let split = split_dataset(&ids, counts, seed).unwrap();
        prop_assert_eq!(split.assignment.len(), n);
        let mut seen = BTreeSet::new();
        for (k, subset) in Subset::ALL.iter().enumerate() {
            let members = split.patients(*subset);
            prop_assert_eq!(members.len(), counts[k]);
            for m in members {
                prop_assert!(seen.insert(m.to_string()));
            }
        }
        prop_assert_eq!(seen, ids.into_iter().collect::<BTreeSet<_>>());
    }
}
