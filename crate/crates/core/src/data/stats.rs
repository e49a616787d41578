use std::collections::BTreeMap;
use std::fmt;

use chrono::Datelike;

use super::bagfile::read_bag_header;
use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeSummary {
    pub readable: usize,
    pub min: usize,
    pub median: f64,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub total: usize,
    pub benign: usize,
    pub malware: usize,
    /// year → (benign, malware)
    pub by_year: BTreeMap<i32, (usize, usize)>,
    /// `None` when no bag file could be read.
    pub bag_sizes: Option<SizeSummary>,
}

pub fn dataset_stats(manifest: &DatasetManifest) -> Result<DatasetStats> {
    if manifest.is_empty() {
        return Err(Error::arg("empty manifest"));
    }
    let mut by_year: BTreeMap<i32, (usize, usize)> = BTreeMap::new();
    let mut malware = 0;
    for r in &manifest.records {
        let e = by_year.entry(r.date.year()).or_default();
        if r.label == 1 {
            e.1 += 1;
            malware += 1;
        } else {
            e.0 += 1;
        }
    }
    let mut sizes: Vec<usize> = manifest
        .records
        .iter()
        .filter_map(|r| read_bag_header(&r.path).ok().map(|(n, _)| n))
        .collect();
    sizes.sort_unstable();
    let bag_sizes = (!sizes.is_empty()).then(|| {
        let k = sizes.len();
        let median = if k % 2 == 1 {
            sizes[k / 2] as f64
        } else {
            (sizes[k / 2 - 1] + sizes[k / 2]) as f64 / 2.0
        };
        SizeSummary {
            readable: k,
            min: sizes[0],
            median,
            max: sizes[k - 1],
        }
    });
    Ok(DatasetStats {
        total: manifest.len(),
        benign: manifest.len() - malware,
        malware,
        by_year,
        bag_sizes,
    })
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "total={}", self.total)?;
        writeln!(f, "benign={}", self.benign)?;
        write!(f, "malware={}", self.malware)?;
        for (year, (b, m)) in &self.by_year {
            write!(f, "\nyear.{year}.benign={b}\nyear.{year}.malware={m}")?;
        }
        if let Some(s) = &self.bag_sizes {
            write!(
                f,
                "\nbag_size.readable={}\nbag_size.min={}\nbag_size.median={}\nbag_size.max={}",
                s.readable, s.min, s.median, s.max
            )?;
        }
        Ok(())
    }
}
