//! `key=value` run settings: defaults, then a config file, then flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use bagscan::attention::AttentionConfig;
use bagscan::data::SynthConfig;
use bagscan::training::{AdamConfig, TrainConfig};
use bagscan::ModelKind;

pub type Settings = BTreeMap<String, String>;

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_config(text: &str) -> Result<Settings> {
    let mut out = Settings::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected key=value, got {raw:?}", i + 1))?;
        out.insert(normalize(k), v.trim().to_owned());
    }
    Ok(out)
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

/// Layers `file` and then `flags` over `defaults`. Keys absent from
/// `defaults` are rejected.
pub fn resolve(defaults: Settings, file: Option<&Path>, flags: Vec<(&str, String)>) -> Result<Settings> {
    let mut merged = defaults;
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        for (k, v) in parse_config(&text)? {
            if !merged.contains_key(&k) {
                bail!("unknown config key {k:?} in {}", path.display());
            }
            merged.insert(k, v);
        }
    }
    for (k, v) in flags {
        merged.insert(normalize(k), v);
    }
    Ok(merged)
}

pub fn render(settings: &Settings) -> String {
    settings.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn get<T: std::str::FromStr>(s: &Settings, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = s.get(key).ok_or_else(|| anyhow!("missing setting {key}"))?;
    raw.parse().map_err(|e| anyhow!("setting {key}={raw:?}: {e}"))
}

pub fn train_defaults() -> Settings {
    train_settings(&TrainConfig::default())
}

pub fn train_settings(c: &TrainConfig) -> Settings {
    let hidden: Vec<String> = c.readout_hidden.iter().map(usize::to_string).collect();
    [
        ("model", c.model.to_string()),
        ("learning_rate", c.learning_rate.to_string()),
        ("epochs", c.epochs.to_string()),
        ("lookahead_k", c.lookahead_k.to_string()),
        ("lookahead_alpha", c.lookahead_alpha.to_string()),
        ("adam_beta1", c.adam.beta1.to_string()),
        ("adam_beta2", c.adam.beta2.to_string()),
        ("adam_eps", c.adam.eps.to_string()),
        ("batch_size", c.batch_size.to_string()),
        ("seed", c.seed.to_string()),
        ("threshold", c.threshold.to_string()),
        ("num_blocks", c.num_blocks.to_string()),
        ("heads", c.attention.heads.to_string()),
        ("landmarks", c.attention.landmarks.to_string()),
        ("pinv_iters", c.attention.pinv_iters.to_string()),
        ("readout_hidden", hidden.join(",")),
        ("category_scale", c.category_scale.to_string()),
        ("weight_std", c.weight_std.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_owned(), v))
    .collect()
}

pub fn train_config(s: &Settings) -> Result<TrainConfig> {
    let model: ModelKind = s
        .get("model")
        .ok_or_else(|| anyhow!("missing setting model"))?
        .parse()?;
    let readout_hidden = s
        .get("readout_hidden")
        .map(String::as_str)
        .unwrap_or("")
        .split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| x.trim().parse().map_err(|e| anyhow!("readout_hidden entry {x:?}: {e}")))
        .collect::<Result<Vec<usize>>>()?;
    let config = TrainConfig {
        model,
        learning_rate: get(s, "learning_rate")?,
        epochs: get(s, "epochs")?,
        lookahead_k: get(s, "lookahead_k")?,
        lookahead_alpha: get(s, "lookahead_alpha")?,
        adam: AdamConfig {
            beta1: get(s, "adam_beta1")?,
            beta2: get(s, "adam_beta2")?,
            eps: get(s, "adam_eps")?,
        },
        batch_size: get(s, "batch_size")?,
        seed: get(s, "seed")?,
        threshold: get(s, "threshold")?,
        num_blocks: get(s, "num_blocks")?,
        attention: AttentionConfig {
            heads: get(s, "heads")?,
            landmarks: get(s, "landmarks")?,
            pinv_iters: get(s, "pinv_iters")?,
        },
        readout_hidden,
        category_scale: get(s, "category_scale")?,
        weight_std: get(s, "weight_std")?,
    };
    config.validate()?;
    Ok(config)
}

pub fn synth_settings(c: &SynthConfig) -> Settings {
    [
        ("num_bags", c.num_bags.to_string()),
        ("d", c.d.to_string()),
        ("bag_size_min", c.bag_size_min.to_string()),
        ("bag_size_max", c.bag_size_max.to_string()),
        ("witness_rate", c.witness_rate.to_string()),
        ("signal_shift", c.signal_shift.to_string()),
        ("correlation_strength", c.correlation_strength.to_string()),
        ("positive_fraction", c.positive_fraction.to_string()),
        ("train_year_fraction", c.train_year_fraction.to_string()),
        ("seed", c.seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_owned(), v))
    .collect()
}

pub fn synth_config(s: &Settings) -> Result<SynthConfig> {
    let config = SynthConfig {
        num_bags: get(s, "num_bags")?,
        d: get(s, "d")?,
        bag_size_min: get(s, "bag_size_min")?,
        bag_size_max: get(s, "bag_size_max")?,
        witness_rate: get(s, "witness_rate")?,
        signal_shift: get(s, "signal_shift")?,
        correlation_strength: get(s, "correlation_strength")?,
        positive_fraction: get(s, "positive_fraction")?,
        train_year_fraction: get(s, "train_year_fraction")?,
        seed: get(s, "seed")?,
    };
    config.validate()?;
    Ok(config)
}
