use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TimeSeriesMatrix;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One dataset manifest record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub label: usize,
}

const ROI_HEADER: &str = "# roi_names:";

/// Reads a subject CSV: one row per node, comma-separated frames, with an
/// optional leading `# roi_names: a, b, ...` line.
pub fn read_subject_csv(path: &Path, subject_id: &str, label: usize) -> Result<TimeSeriesMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let data_err = |message: String| Error::Data {
        path: path.to_path_buf(),
        message,
    };
    let mut roi_names = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(ROI_HEADER) {
            roi_names = Some(rest.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>());
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| data_err(format!("line {}: {e}", lineno + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(data_err("no signal rows".into()));
    }
    let signals = Tensor::from_rows(&rows).map_err(|_| data_err("rows have unequal lengths".into()))?;
    if let Some(names) = &roi_names {
        if names.len() != rows.len() {
            return Err(data_err(format!(
                "{} roi names for {} rows",
                names.len(),
                rows.len()
            )));
        }
    }
    let mut ts = TimeSeriesMatrix::new(subject_id, label, signals).map_err(|e| data_err(e.to_string()))?;
    ts.roi_names = roi_names;
    Ok(ts)
}

pub fn write_subject_csv(path: &Path, ts: &TimeSeriesMatrix) -> Result<()> {
    let mut out = String::new();
    if let Some(names) = &ts.roi_names {
        out.push_str(ROI_HEADER);
        out.push(' ');
        out.push_str(&names.join(", "));
        out.push('\n');
    }
    for r in 0..ts.nodes() {
        let row: Vec<String> = ts.signals().row(r).iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, &text, e))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Loads every subject of a manifest; relative paths resolve against the
/// manifest's directory.
pub fn load_dataset(manifest: &Path) -> Result<Vec<TimeSeriesMatrix>> {
    let base: PathBuf = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    read_manifest(manifest)?
        .iter()
        .map(|e| {
            let p = Path::new(&e.path);
            let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            read_subject_csv(&full, &e.id, e.label)
        })
        .collect()
}
