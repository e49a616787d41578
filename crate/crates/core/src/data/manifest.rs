//! Dataset manifest: CSV with header `app_id,label,date,path`, ISO-8601
//! dates. Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 4] = ["app_id", "label", "date", "path"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub app_id: String,
    pub label: u8,
    pub date: NaiveDate,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if !seen.insert(r.app_id.as_str()) {
                return Err(Error::Manifest {
                    line: i as u64 + 2,
                    message: format!("duplicate app_id {:?}", r.app_id),
                });
            }
            if r.label > 1 {
                return Err(Error::Manifest {
                    line: i as u64 + 2,
                    message: format!("label {} not in {{0,1}}", r.label),
                });
            }
        }
        Ok(())
    }

    /// Rewrites relative record paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for r in &mut self.records {
            if r.path.is_relative() {
                r.path = base.join(&r.path);
            }
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = MANIFEST_HEADER.join(",");
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.app_id,
                r.label,
                r.date.format("%Y-%m-%d"),
                r.path.display()
            ));
        }
        out
    }
}

pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Manifest {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Manifest {
            line: 1,
            message: format!("expected header {:?}", MANIFEST_HEADER.join(",")),
        });
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Manifest {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let err = |message: String| Error::Manifest { line, message };
        if row.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", row.len())));
        }
        let app_id = row[0].to_owned();
        if app_id.is_empty() {
            return Err(err("empty app_id".into()));
        }
        let label = match &row[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(err(format!("label {other:?} not in {{0,1}}"))),
        };
        let date = NaiveDate::parse_from_str(&row[2], "%Y-%m-%d")
            .map_err(|e| err(format!("bad date {:?}: {e}", &row[2])))?;
        if !seen.insert(app_id.clone()) {
            return Err(err(format!("duplicate app_id {app_id:?}")));
        }
        records.push(ManifestRecord {
            app_id,
            label,
            date,
            path: PathBuf::from(&row[3]),
        });
    }
    Ok(DatasetManifest { records })
}

/// Parses and validates; record paths are resolved against the
/// manifest's parent directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m = parse_manifest(&text)?;
    m.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(m)
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest.to_csv()).map_err(|e| Error::io(path, e))
}
