//! Patient-grouped train/val/test splitting.
//!
//! All acquisitions of a patient land in the same split, so no patient
//! leaks across the train/evaluation boundary. Patient counts per split
//! follow the requested fractions via largest-remainder apportionment;
//! the patient-to-split assignment is a seeded shuffle, retried with a
//! derived stream until every split contains at least one positive and
//! one negative acquisition (or an attempt budget is exhausted).

use rand::seq::SliceRandom;

use super::{Acquisition, AcquisitionMeta, DataError, DatasetSplit, Result};
use crate::rng;

/// Default train/val/test fractions.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.48, 0.22, 0.30];

const MAX_ATTEMPTS: usize = 100;
const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Minimal view of a record for splitting purposes.
pub trait SplitRecord {
    fn acquisition_id(&self) -> &str;
    fn patient_id(&self) -> &str;
    fn positive(&self) -> bool;
}

impl SplitRecord for Acquisition {
    fn acquisition_id(&self) -> &str {
        &self.acquisition_id
    }
    fn patient_id(&self) -> &str {
        &self.patient_id
    }
    fn positive(&self) -> bool {
        self.label()
    }
}

impl SplitRecord for AcquisitionMeta {
    fn acquisition_id(&self) -> &str {
        &self.acquisition_id
    }
    fn patient_id(&self) -> &str {
        &self.patient_id
    }
    fn positive(&self) -> bool {
        self.label()
    }
}

/// Apportion `total` items over `fractions` by largest remainder.
/// Remainder ties go to the earlier split.
fn apportion(total: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts = [0usize; 3];
    let mut assigned = 0;
    for (i, q) in quotas.iter().enumerate() {
        counts[i] = q.floor() as usize;
        assigned += counts[i];
    }
    let mut order: Vec<usize> = (0..3).collect();
    // Sort by descending fractional remainder, index ascending on ties.
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Partition acquisitions into patient-disjoint train/val/test sets.
///
/// Patients are shuffled with a stream derived from `seed` and assigned
/// to splits by largest-remainder counts; each acquisition follows its
/// patient. Fails if the label constraint cannot be met within the
/// attempt budget, naming the offending split.
pub fn split_by_patient<T: SplitRecord>(
    items: &[T],
    fractions: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit> {
    if fractions.iter().any(|f| !f.is_finite() || *f <= 0.0) {
        return Err(DataError::BadConfig(format!(
            "split fractions must be positive, got {fractions:?}"
        )));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadConfig(format!(
            "split fractions must sum to 1, got {fractions:?} (sum {sum})"
        )));
    }

    // Distinct patients in first-appearance order.
    let mut patients: Vec<&str> = Vec::new();
    for it in items {
        if !patients.contains(&it.patient_id()) {
            patients.push(it.patient_id());
        }
    }
    if patients.len() < 3 {
        return Err(DataError::BadConfig(format!(
            "need at least 3 patients to form three splits, got {}",
            patients.len()
        )));
    }
    let counts = apportion(patients.len(), &fractions);
    if counts.iter().any(|&c| c == 0) {
        return Err(DataError::BadConfig(format!(
            "fractions {fractions:?} allocate zero patients to a split \
             ({} patients -> {counts:?})",
            patients.len()
        )));
    }

    let tag = rng::str_tag("split");
    let mut failing: &'static str = SPLIT_NAMES[0];
    for attempt in 0..MAX_ATTEMPTS {
        let mut order = patients.clone();
        let mut r = rng::stream(seed, &[tag, attempt as u64]);
        order.shuffle(&mut r);

        let bounds = [0, counts[0], counts[0] + counts[1], patients.len()];
        let split_of = |pid: &str| -> usize {
            let pos = order.iter().position(|p| *p == pid).unwrap();
            (1..3).find(|&s| pos < bounds[s]).unwrap_or(3) - 1
        };

        let mut has_pos = [false; 3];
        let mut has_neg = [false; 3];
        let mut ids: [Vec<String>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for it in items {
            let s = split_of(it.patient_id());
            ids[s].push(it.acquisition_id().to_string());
            if it.positive() {
                has_pos[s] = true;
            } else {
                has_neg[s] = true;
            }
        }

        match (0..3).find(|&s| !has_pos[s] || !has_neg[s]) {
            None => {
                let [train, val, test] = ids;
                return Ok(DatasetSplit {
                    train,
                    val,
                    test,
                    split_seed: seed,
                });
            }
            Some(s) => failing = SPLIT_NAMES[s],
        }
    }
    Err(DataError::InfeasibleSplit {
        split: failing,
        attempts: MAX_ATTEMPTS,
    })
}

// ── Tests ────────────────────────────────────────────────────────────
