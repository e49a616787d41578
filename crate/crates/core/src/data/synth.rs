//! Synthetic correlated bags with planted witnesses.
//!
//! Every instance is background noise `√(1−c²)·e + c·z`, where `e` is
//! per-instance and `z` is shared by the whole bag (`c` is the correlation
//! strength), so instances stay marginally standard normal. In a positive
//! bag each instance independently becomes a witness with probability
//! `witness_rate`, at least one witness is forced, and witnesses are
//! shifted by `signal_shift` along a fixed unit direction. Benign bags
//! contain no witnesses, so a bag is positive exactly when it has one.

use std::fs;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::bagfile::write_bag;
use super::manifest::{save_manifest, DatasetManifest, ManifestRecord};
use crate::error::{Error, Result};
use crate::model::Bag;
use crate::numerics::DenseMatrix;
use crate::par;
use crate::rng::{mix64, rng_for, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_bags: usize,
    pub d: usize,
    pub bag_size_min: usize,
    pub bag_size_max: usize,
    pub witness_rate: f64,
    pub signal_shift: f64,
    pub correlation_strength: f64,
    pub positive_fraction: f64,
    /// Share of bags (taken from the front) dated 2019; the rest are 2020.
    pub train_year_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_bags: 1000,
            d: 768,
            bag_size_min: 20,
            bag_size_max: 200,
            witness_rate: 0.05,
            signal_shift: 4.0,
            correlation_strength: 0.5,
            positive_fraction: 0.39,
            train_year_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bags == 0 || self.d == 0 {
            return Err(Error::arg("num_bags and d must be positive"));
        }
        if self.bag_size_min == 0 || self.bag_size_min > self.bag_size_max {
            return Err(Error::arg(format!(
                "bag size range [{}, {}] invalid",
                self.bag_size_min, self.bag_size_max
            )));
        }
        if !(self.witness_rate > 0.0 && self.witness_rate <= 1.0) {
            return Err(Error::arg(format!("witness_rate {} outside (0, 1]", self.witness_rate)));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(Error::arg(format!(
                "positive_fraction {} outside (0, 1)",
                self.positive_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.correlation_strength) {
            return Err(Error::arg(format!(
                "correlation_strength {} outside [0, 1]",
                self.correlation_strength
            )));
        }
        if !(0.0..=1.0).contains(&self.train_year_fraction) {
            return Err(Error::arg("train_year_fraction outside [0, 1]"));
        }
        if !self.signal_shift.is_finite() {
            return Err(Error::arg("signal_shift must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBag {
    pub bag: Bag,
    /// Latent instance labels.
    pub witnesses: Vec<bool>,
}

impl SynthBag {
    pub fn witness_count(&self) -> usize {
        self.witnesses.iter().filter(|&&w| w).count()
    }
}

pub fn synth_app_id(i: usize) -> String {
    format!("synth-{i:06}")
}

/// The fixed unit direction witnesses are shifted along.
pub fn signal_direction(config: &SynthConfig) -> Vec<f64> {
    let mut rng = rng_for(config.seed, "synth-direction", 0);
    let mut u: Vec<f64> = (0..config.d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    u.iter_mut().for_each(|x| *x /= norm);
    u
}

fn date_for(i: usize, config: &SynthConfig) -> NaiveDate {
    let cutoff = (config.train_year_fraction * config.num_bags as f64).round() as usize;
    let year = if i < cutoff { 2019 } else { 2020 };
    let offset = mix64(config.seed ^ i as u64) % 365;
    NaiveDate::from_ymd_opt(year, 1, 1)
        .expect("valid")
        .checked_add_days(Days::new(offset))
        .expect("in range")
}

fn gen_one(i: usize, config: &SynthConfig, direction: &[f64]) -> SynthBag {
    let mut rng: Rng = rng_for(config.seed, "synth-bag", i as u64);
    let d = config.d;
    let label = u8::from(rng.random_bool(config.positive_fraction));
    let n = rng.random_range(config.bag_size_min..=config.bag_size_max);
    let c = config.correlation_strength;
    let own = (1.0 - c * c).sqrt();
    let shared: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();

    let mut witnesses = vec![false; n];
    if label == 1 {
        for w in witnesses.iter_mut() {
            *w = rng.random_bool(config.witness_rate);
        }
        if !witnesses.iter().any(|&w| w) {
            let forced = rng.random_range(0..n);
            witnesses[forced] = true;
        }
    }
    let mut emb = DenseMatrix::zeros(n, d);
    for (r, &is_witness) in witnesses.iter().enumerate() {
        for (j, v) in emb.row_mut(r).iter_mut().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            let mut x = own * e + c * shared[j];
            if is_witness {
                x += config.signal_shift * direction[j];
            }
            // stored precision
            *v = f64::from(x as f32);
        }
    }
    SynthBag {
        bag: Bag {
            app_id: synth_app_id(i),
            label,
            date: date_for(i, config),
            embeddings: emb,
        },
        witnesses,
    }
}

/// Generates every bag in memory; values are already rounded to the
/// 32-bit storage precision, so they equal what a reader gets back.
pub fn generate_bags(config: &SynthConfig) -> Result<Vec<SynthBag>> {
    config.validate()?;
    let direction = signal_direction(config);
    Ok(par::map_indexed(config.num_bags, |i| gen_one(i, config, &direction)))
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const WITNESS_FILE: &str = "witnesses.csv";
pub const BAG_DIR: &str = "bags";

fn witness_csv(bags: &[SynthBag]) -> String {
    let mut out = String::from("app_id,label,n,witnesses\n");
    for b in bags {
        let idx: Vec<String> = b
            .witnesses
            .iter()
            .enumerate()
            .filter(|(_, &w)| w)
            .map(|(i, _)| i.to_string())
            .collect();
        out.push_str(&format!("{},{},{},{}\n", b.bag.app_id, b.bag.label, b.bag.len(), idx.join(";")));
    }
    out
}

/// Writes `bags/<app_id>.dbmb`, `manifest.csv` (relative paths) and a
/// `witnesses.csv` sidecar under `out_dir`, creating it if needed. The
/// returned manifest has its paths resolved against `out_dir`.
pub fn gen_synthetic(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<SynthBag>)> {
    let out_dir = out_dir.as_ref();
    let bags = generate_bags(config)?;
    let bag_dir = out_dir.join(BAG_DIR);
    fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
    par::try_map_indexed(bags.len(), |i| {
        let b = &bags[i].bag;
        write_bag(&b.embeddings, bag_dir.join(format!("{}.dbmb", b.app_id)))
    })?;
    let manifest = DatasetManifest {
        records: bags
            .iter()
            .map(|b| ManifestRecord {
                app_id: b.bag.app_id.clone(),
                label: b.bag.label,
                date: b.bag.date,
                path: Path::new(BAG_DIR).join(format!("{}.dbmb", b.bag.app_id)),
            })
            .collect(),
    };
    save_manifest(&manifest, out_dir.join(MANIFEST_FILE))?;
    let mut manifest = manifest;
    manifest.resolve_paths(out_dir);
    let wpath = out_dir.join(WITNESS_FILE);
    fs::write(&wpath, witness_csv(&bags)).map_err(|e| Error::io(&wpath, e))?;
    Ok((manifest, bags))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_bags: 60,
            d: 8,
            bag_size_min: 2,
            bag_size_max: 30,
            witness_rate: 0.01,
            seed: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn witness_rule_holds_for_every_bag() {
        let bags = generate_bags(&small()).unwrap();
        let mut forced_seen = false;
        for b in &bags {
            if b.bag.label == 1 {
                assert!(b.witness_count() >= 1);
                forced_seen |= b.witness_count() == 1;
            } else {
                assert_eq!(b.witness_count(), 0);
            }
        }
        assert!(forced_seen);
    }

    #[test]
    fn deterministic_and_sized() {
        let c = small();
        let a = generate_bags(&c).unwrap();
        assert_eq!(a, generate_bags(&c).unwrap());
        assert!(a.iter().all(|b| (2..=30).contains(&b.bag.len()) && b.bag.width() == 8));
        let years: Vec<i32> = a.iter().map(|b| chrono::Datelike::year(&b.bag.date)).collect();
        assert_eq!(years.iter().filter(|&&y| y == 2019).count(), 30);
    }

    #[test]
    fn witnesses_carry_the_shift() {
        let c = SynthConfig {
            correlation_strength: 0.0,
            signal_shift: 10.0,
            witness_rate: 0.5,
            ..small()
        };
        let u = signal_direction(&c);
        for b in generate_bags(&c).unwrap() {
            for (r, &w) in b.witnesses.iter().enumerate() {
                let proj: f64 = b.bag.embeddings.row(r).iter().zip(&u).map(|(x, u)| x * u).sum();
                if w {
                    assert!(proj > 3.0, "witness projection {proj}");
                }
            }
        }
    }

    #[test]
    fn invalid_configs() {
        for bad in [
            SynthConfig { witness_rate: 0.0, ..small() },
            SynthConfig { positive_fraction: 1.0, ..small() },
            SynthConfig { bag_size_min: 0, ..small() },
            SynthConfig { bag_size_min: 9, bag_size_max: 3, ..small() },
            SynthConfig { correlation_strength: 1.5, ..small() },
        ] {
            assert!(generate_bags(&bad).is_err());
        }
    }
}
