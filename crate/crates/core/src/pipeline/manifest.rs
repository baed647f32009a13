//! Cohort manifest: one CSV row per slide linking it to its patient, outcome,
//! and bag file. Header is mandatory and column order is fixed.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: String,
    pub patient_id: String,
    pub time_days: f64,
    /// 1 = censored (no event observed), 0 = event
    pub censored: u8,
    pub bag_path: PathBuf,
}

impl ManifestRow {
    pub fn is_censored(&self) -> bool {
        self.censored != 0
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        let row: ManifestRow =
            record.map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        rows.push(row);
    }
    validate(&rows)?;
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    validate(rows)?;
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn validate(rows: &[ManifestRow]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::format("manifest has no rows"));
    }
    let mut seen = HashSet::new();
    for row in rows {
        if !seen.insert(row.sample_id.as_str()) {
            return Err(Error::format(format!(
                "duplicate sample_id {:?} in manifest",
                row.sample_id
            )));
        }
        if !row.time_days.is_finite() || row.time_days < 0.0 {
            return Err(Error::format(format!(
                "sample {:?}: time_days {} must be finite and non-negative",
                row.sample_id, row.time_days
            )));
        }
        if row.censored > 1 {
            return Err(Error::format(format!(
                "sample {:?}: censored must be 0 or 1, got {}",
                row.sample_id, row.censored
            )));
        }
        if row.patient_id.is_empty() {
            return Err(Error::format(format!(
                "sample {:?}: empty patient_id",
                row.sample_id
            )));
        }
    }
    Ok(())
}
