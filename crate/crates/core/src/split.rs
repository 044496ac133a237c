//! Patient-level train/validation/test assignment.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Validation,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Validation, Subset::Test];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Validation => "validation",
            Subset::Test => "test",
        }
    }
}

/// Patient counts of the knee challenge split (88 patients).
pub const IWOAI_PATIENT_COUNTS: [usize; 3] = [60, 14, 14];

/// Each patient contributes a baseline and a follow-up scan.
pub const VOLUMES_PER_PATIENT: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub assignment: BTreeMap<String, Subset>,
    /// Patients per subset, ordered train, validation, test.
    pub counts: [usize; 3],
}

impl DatasetSplit {
    pub fn subset_of(&self, patient: &str) -> Option<Subset> {
        self.assignment.get(patient).copied()
    }

    /// Patients of one subset in id order.
    pub fn patients(&self, subset: Subset) -> Vec<&str> {
        self.assignment.iter().filter(|(_, &s)| s == subset).map(|(p, _)| p.as_str()).collect()
    }

    pub fn volume_counts(&self, volumes_per_patient: usize) -> [usize; 3] {
        self.counts.map(|c| c * volumes_per_patient)
    }
}

/// Shuffles the patients with a seeded generator and deals them out in
/// train, validation, test order. Input order does not affect the result.
pub fn split_dataset<S: AsRef<str>>(patient_ids: &[S], counts: [usize; 3], seed: u64) -> Result<DatasetSplit> {
    let total: usize = counts.iter().sum();
    if total != patient_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "counts {counts:?} sum to {total}, population is {}",
            patient_ids.len()
        )));
    }
    let mut ids: Vec<&str> = patient_ids.iter().map(|p| p.as_ref()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument(format!("duplicate patient id {:?}", w[0])));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = BTreeMap::new();
    let mut it = ids.into_iter();
    for (subset, &n) in Subset::ALL.iter().zip(&counts) {
        for id in it.by_ref().take(n) {
            assignment.insert(id.to_string(), *subset);
        }
    }
    Ok(DatasetSplit { assignment, counts })
}
