//! Line-based `key = value` run configuration.
//!
//! Values are layered: preset, then config file, then command-line flags.
//! Later layers win.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::csmodel::ModelConfig;
use crate::error::{Error, Result};
use crate::losses::{ExtractorSource, LossSpec};
use crate::trainer::TrainConfig;

/// Keys understood by `pcs train`.
pub const TRAIN_KEYS: &[&str] = &[
    "preset",
    "learning_rate",
    "momentum",
    "batch_size",
    "iterations",
    "seed",
    "loss",
    "tap",
    "extractor",
    "measurement_rate",
    "measurement_stride",
    "measurement_kernel",
    "measurement_channels",
    "recovery_channels",
    "res_blocks",
    "dataset_dir",
    "crop_size",
    "checkpoint_every",
    "out_dir",
    "init",
    "resume",
];

/// Effective key/value pairs plus where each value came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, (String, &'static str)>,
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are ignored.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: impl Into<String>, source: &'static str) -> Result<()> {
        if !TRAIN_KEYS.contains(&key) {
            return Err(Error::config(format!("unknown configuration key '{key}'")));
        }
        self.values.insert(key.to_string(), (value.into(), source));
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(e).in_file(path))?;
        for (k, v) in parse_config(&text).map_err(|e| e.in_file(path))? {
            self.set(&k, v, "file").map_err(|e| e.in_file(path))?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::config(format!("invalid value '{v}' for '{key}'")))
            })
            .transpose()
    }

    /// `key = value (source)` lines, in key order.
    pub fn echo(&self) -> Vec<String> {
        self.values
            .iter()
            .map(|(k, (v, src))| format!("{k} = {v} ({src})"))
            .collect()
    }

    /// Builds the training configuration. A `preset` key supplies defaults
    /// that every other key overrides.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut c = match self.get("preset") {
            Some(p) => TrainConfig::preset(p)?,
            None => TrainConfig {
                learning_rate: 1e-3,
                momentum: 0.9,
                batch_size: 5,
                iterations: 1000,
                seed: 0,
                loss: LossSpec::Pixel,
                model: ModelConfig::for_rate(0.25, 4),
                dataset_dir: PathBuf::from("data/train"),
                crop_size: 32,
                checkpoint_every: 100,
            },
        };
        if let Some(v) = self.parse("learning_rate")? {
            c.learning_rate = v;
        }
        if let Some(v) = self.parse("momentum")? {
            c.momentum = v;
        }
        if let Some(v) = self.parse("batch_size")? {
            c.batch_size = v;
        }
        if let Some(v) = self.parse("iterations")? {
            c.iterations = v;
        }
        if let Some(v) = self.parse("seed")? {
            c.seed = v;
        }
        if let Some(v) = self.get("dataset_dir") {
            c.dataset_dir = PathBuf::from(v);
        }
        if let Some(v) = self.parse("crop_size")? {
            c.crop_size = v;
        }
        if let Some(v) = self.parse("checkpoint_every")? {
            c.checkpoint_every = v;
        }

        // a new rate or stride re-derives the channel plan before explicit
        // channel/kernel overrides apply
        let rate: Option<f64> = self.parse("measurement_rate")?;
        let stride: Option<usize> = self.parse("measurement_stride")?;
        if rate.is_some() || stride.is_some() {
            let rc = c.model.recovery_channels;
            let rb = c.model.res_blocks;
            c.model = ModelConfig::for_rate(
                rate.unwrap_or(c.model.target_mr),
                stride.unwrap_or(c.model.measurement_stride),
            );
            c.model.recovery_channels = rc;
            c.model.res_blocks = rb;
        }
        if let Some(v) = self.parse("measurement_kernel")? {
            c.model.measurement_kernel = v;
        }
        if let Some(v) = self.parse("measurement_channels")? {
            c.model.measurement_channels = v;
        }
        if let Some(v) = self.parse("recovery_channels")? {
            c.model.recovery_channels = v;
        }
        if let Some(v) = self.parse("res_blocks")? {
            c.model.res_blocks = v;
        }

        let tap = self.get("tap").map(str::to_string);
        let extractor: Option<ExtractorSource> = self.get("extractor").map(str::parse).transpose()?;
        c.loss = match (self.get("loss"), c.loss) {
            (Some("pixel"), _) => LossSpec::Pixel,
            (Some("perceptual"), prev) | (None, prev @ LossSpec::Perceptual { .. }) => {
                let (prev_tap, prev_ex) = match prev {
                    LossSpec::Perceptual { tap, extractor } => (Some(tap), Some(extractor)),
                    LossSpec::Pixel => (None, None),
                };
                LossSpec::Perceptual {
                    tap: tap.or(prev_tap).unwrap_or_else(|| "pool2".into()),
                    extractor: extractor
                        .or(prev_ex)
                        .ok_or_else(|| Error::config("perceptual loss needs an 'extractor'"))?,
                }
            }
            (None, LossSpec::Pixel) => LossSpec::Pixel,
            (Some(other), _) => {
                return Err(Error::config(format!("unknown loss '{other}' (pixel or perceptual)")));
            }
        };
        Ok(c)
    }
}
