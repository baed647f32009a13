//! Patient-stratified cross-validation splits. Patients, not samples, are
//! shuffled into k groups; every sample follows its patient, so no patient
//! ever straddles a split boundary.

use crate::error::{Error, Result};
use crate::pipeline::manifest::ManifestRow;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{HashMap, HashSet};

#[derive(Debug, Clone, PartialEq)]
pub struct FoldSplit {
    pub fold: usize,
    /// Sample ids, in manifest order within each list.
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Fold f tests on patient group f, validates on group (f+1) mod k, trains
/// on the remaining k-2 groups.
pub fn make_folds(rows: &[ManifestRow], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 3 {
        return Err(Error::config(format!(
            "need k >= 3 folds for disjoint train/val/test, got {k}"
        )));
    }
    // first-appearance order keeps the shuffle independent of HashMap iteration
    let mut patients: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for row in rows {
        if seen.insert(row.patient_id.as_str()) {
            patients.push(row.patient_id.as_str());
        }
    }
    if patients.len() < k {
        return Err(Error::config(format!(
            "{} distinct patients cannot fill {k} folds",
            patients.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let group_of: HashMap<&str, usize> = patients
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i % k))
        .collect();

    let splits: Vec<FoldSplit> = (0..k)
        .map(|f| {
            let test_g = f;
            let val_g = (f + 1) % k;
            let mut split = FoldSplit { fold: f, train: vec![], val: vec![], test: vec![] };
            for row in rows {
                let g = group_of[row.patient_id.as_str()];
                let dest = if g == test_g {
                    &mut split.test
                } else if g == val_g {
                    &mut split.val
                } else {
                    &mut split.train
                };
                dest.push(row.sample_id.clone());
            }
            split
        })
        .collect();
    for split in &splits {
        assert_no_leakage(split, rows)?;
    }
    Ok(splits)
}

/// Hard check that the split partitions the cohort and that no patient
/// appears in more than one of train/val/test. Runs on every training run,
/// not only in tests.
pub fn assert_no_leakage(split: &FoldSplit, rows: &[ManifestRow]) -> Result<()> {
    let patient_of: HashMap<&str, &str> = rows
        .iter()
        .map(|r| (r.sample_id.as_str(), r.patient_id.as_str()))
        .collect();
    let mut seen_samples = HashSet::new();
    let mut role_of_patient: HashMap<&str, &str> = HashMap::new();
    for (role, ids) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for id in ids {
            if !seen_samples.insert(id.as_str()) {
                return Err(Error::contract(format!(
                    "fold {}: sample {id:?} assigned twice",
                    split.fold
                )));
            }
            let patient = patient_of.get(id.as_str()).ok_or_else(|| {
                Error::contract(format!("fold {}: unknown sample {id:?}", split.fold))
            })?;
            match role_of_patient.get(patient) {
                None => {
                    role_of_patient.insert(patient, role);
                }
                Some(prev) if *prev != role => {
                    return Err(Error::contract(format!(
                        "fold {}: patient {patient:?} leaks across {prev}/{role}",
                        split.fold
                    )));
                }
                Some(_) => {}
            }
        }
    }
    if seen_samples.len() != rows.len() {
        return Err(Error::contract(format!(
            "fold {}: {} samples assigned, cohort has {}",
            split.fold,
            seen_samples.len(),
            rows.len()
        )));
    }
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::contract(format!(
            "fold {}: every role needs at least one sample",
            split.fold
        )));
    }
    Ok(())
}
