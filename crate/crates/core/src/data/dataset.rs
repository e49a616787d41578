use std::path::Path;

use super::bagfile::read_bag;
use super::manifest::{load_manifest, DatasetManifest};
use crate::error::{Error, Result};
use crate::model::Bag;
use crate::par;

/// A manifest with its bags loaded, index-aligned.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub bags: Vec<Bag>,
}

impl Dataset {
    /// Reads every bag named by the manifest and checks widths agree.
    pub fn load(manifest: DatasetManifest) -> Result<Self> {
        let bags = par::try_map_indexed(manifest.len(), |i| {
            let r = &manifest.records[i];
            Ok::<_, Error>(Bag {
                app_id: r.app_id.clone(),
                label: r.label,
                date: r.date,
                embeddings: read_bag(&r.path)?,
            })
        })?;
        let ds = Self { manifest, bags };
        ds.width()?;
        Ok(ds)
    }

    pub fn open(manifest_path: impl AsRef<Path>) -> Result<Self> {
        Self::load(load_manifest(manifest_path)?)
    }

    /// Builds a dataset from in-memory bags (record paths left empty).
    pub fn from_bags(bags: Vec<Bag>) -> Result<Self> {
        let manifest = DatasetManifest {
            records: bags
                .iter()
                .map(|b| super::ManifestRecord {
                    app_id: b.app_id.clone(),
                    label: b.label,
                    date: b.date,
                    path: Default::default(),
                })
                .collect(),
        };
        manifest.validate()?;
        let ds = Self { manifest, bags };
        ds.width()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    /// Common embedding width.
    pub fn width(&self) -> Result<usize> {
        let d = self.bags.first().map_or(0, |b| b.width());
        if let Some(b) = self.bags.iter().find(|b| b.width() != d) {
            return Err(Error::arg(format!(
                "bag {} has width {}, expected {d}",
                b.app_id,
                b.width()
            )));
        }
        Ok(d)
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<&Bag> {
        indices.iter().map(|&i| &self.bags[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{gen_synthetic, SynthConfig};

    #[test]
    fn loads_what_the_generator_wrote() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig {
            num_bags: 12,
            d: 3,
            bag_size_min: 2,
            bag_size_max: 5,
            ..SynthConfig::default()
        };
        let (_, generated) = gen_synthetic(&config, dir.path().join("out")).unwrap();
        let ds = Dataset::open(dir.path().join("out/manifest.csv")).unwrap();
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.width().unwrap(), 3);
        for (b, g) in ds.bags.iter().zip(&generated) {
            assert_eq!(b, &g.bag);
        }
    }

    #[test]
    fn mixed_widths_rejected() {
        let mut rng = crate::rng::rng_for(0, "ds", 0);
        let a = crate::fixtures::random_bag(&mut rng, "a", 2, 3);
        let b = crate::fixtures::random_bag(&mut rng, "b", 2, 4);
        assert!(Dataset::from_bags(vec![a, b]).is_err());
    }

    #[test]
    fn missing_bag_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "app_id,label,date,path\nx,0,2019-01-01,nope.dbmb\n").unwrap();
        assert!(matches!(Dataset::open(&path), Err(Error::Io { .. })));
    }
}
