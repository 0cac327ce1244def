//! Run configuration: a preset architecture plus `key = value` lines from a
//! file and from `--set` overrides, applied in order (later wins).

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lfhn_core::data::SplitProtocol;
use lfhn_core::graph::LfhnConfig;
use lfhn_core::train::TrainConfig;

pub const SEED_ENV: &str = "LFHN_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 227x227x3 input, 96-channel root, streams 200-400 and 300.
    Full,
    /// 67x67x3 input with narrower layers.
    Desk,
    /// 8x8x3 input for gradient checks.
    Tiny,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" | "default" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            "tiny" => Ok(Preset::Tiny),
            _ => bail!("unknown preset {s:?} (expected full, desk or tiny)"),
        }
    }

    fn config(self) -> LfhnConfig {
        match self {
            Preset::Full => LfhnConfig::default(),
            Preset::Desk => LfhnConfig::desk(10),
            Preset::Tiny => LfhnConfig::tiny(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub net: LfhnConfig,
    /// Whether `classes` was given explicitly; otherwise it follows the data.
    pub classes_set: bool,
    pub train: TrainConfig,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub split: Option<SplitProtocol>,
    pub root_weights: Option<PathBuf>,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_lines(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`, got {raw:?}", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("override {s:?} is not key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| anyhow!("invalid value {v:?} for {key}"))
}

fn optional<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v.is_empty() || v == "none" {
        Ok(None)
    } else {
        value(key, v).map(Some)
    }
}

/// `76` or `76x80`.
fn extent(key: &str, v: &str) -> Result<(usize, usize)> {
    match v.split_once('x') {
        Some((h, w)) => Ok((value(key, h)?, value(key, w)?)),
        None => {
            let s = value(key, v)?;
            Ok((s, s))
        }
    }
}

impl RunConfig {
    /// Starts from `preset` (unless a `preset` key overrides it), the seed
    /// from `LFHN_SEED` if set, then applies `pairs` in order.
    pub fn from_pairs(preset: Preset, pairs: &[(String, String)]) -> Result<Self> {
        let preset = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) => Preset::parse(v)?,
            None => preset,
        };
        let seed = match std::env::var(SEED_ENV) {
            Ok(s) => value(SEED_ENV, &s)?,
            Err(_) => 0,
        };
        let mut cfg = RunConfig {
            net: preset.config(),
            classes_set: false,
            train: TrainConfig::default(),
            seed,
            data: None,
            split: None,
            root_weights: None,
        };
        for (k, v) in pairs {
            cfg.apply(k, v)?;
        }
        cfg.train.seed = cfg.seed;
        cfg.net.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(preset: Preset, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            pairs = parse_lines(&text, &path.display().to_string())?;
        }
        pairs.extend_from_slice(overrides);
        Self::from_pairs(preset, &pairs)
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        if self.net.apply(key, v)? {
            if key == "classes" {
                self.classes_set = true;
            }
            return Ok(());
        }
        let t = &mut self.train;
        match key {
            "preset" => {}
            "seed" => self.seed = value(key, v)?,
            "lr" => t.lr = value(key, v)?,
            "momentum" => t.momentum = value(key, v)?,
            "batch_size" => t.batch_size = value(key, v)?,
            "epochs" => t.epochs = value(key, v)?,
            "freeze_root" => t.freeze_root = value(key, v)?,
            "augment" => t.augment = value(key, v)?,
            "crop_source" => {
                t.crop_source = match v {
                    "" | "none" => None,
                    _ => Some(extent(key, v)?),
                }
            }
            "lr_decay_every" => t.lr_decay_every = optional(key, v)?,
            "target_accuracy" => t.target_accuracy = optional(key, v)?,
            "threads" => t.threads = value(key, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "split" => {
                self.split = match v {
                    "" | "none" | "all" => None,
                    _ => Some(v.parse()?),
                }
            }
            "root_weights" => self.root_weights = Some(PathBuf::from(v)),
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(text: &str) -> Vec<(String, String)> {
        parse_lines(text, "test").unwrap()
    }

    #[test]
    fn file_then_overrides() {
        let mut p = pairs("# run\nlr = 0.05  # fast\nepochs=3\npreset = tiny\n");
        p.push(parse_override("lr=0.2").unwrap());
        let c = RunConfig::from_pairs(Preset::Full, &p).unwrap();
        assert_eq!(c.train.lr, 0.2);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.net, LfhnConfig::tiny());
        assert!(!c.classes_set);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::from_pairs(Preset::Desk, &pairs("learning_rate = 1\n")).unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
        assert!(parse_lines("just words\n", "x").is_err());
    }

    #[test]
    fn typed_values() {
        let c = RunConfig::from_pairs(
            Preset::Desk,
            &pairs("classes=4\ncrop_source=76\nsplit=holdout-light\ntarget_accuracy=0.99\n"),
        )
        .unwrap();
        assert!(c.classes_set);
        assert_eq!(c.net.classes, 4);
        assert_eq!(c.train.crop_source, Some((76, 76)));
        assert_eq!(c.split, Some(SplitProtocol::HoldoutLight(vec![2, 6])));
        assert_eq!(c.train.target_accuracy, Some(0.99));
        assert!(RunConfig::from_pairs(Preset::Desk, &pairs("momentum=1.5\n")).is_err());
        assert!(RunConfig::from_pairs(Preset::Desk, &pairs("epochs=many\n")).is_err());
    }
}
