use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::LrnParams;

/// Architecture hyperparameters. `Default` is the full-size network:
/// 227x227x3 input, 11x11/4 root with 96 filters, streams `[200, 400]` and
/// `[300]`, a 500-wide 1x1 mixing layer, a 512-unit hidden FC and 337 classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LfhnConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub root_kernel: usize,
    pub root_channels: usize,
    pub root_stride: usize,
    pub root_pad: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    /// Widths of the 1x1 layers in each stream, streams in concat order.
    pub streams: Vec<Vec<usize>>,
    /// Width of the 1x1 convolution applied to the concatenated streams.
    pub mix_width: usize,
    pub fc_hidden: usize,
    pub classes: usize,
    pub relu_after_pointwise: bool,
    pub relu_after_hidden_fc: bool,
    pub lrn: LrnParams,
}

impl Default for LfhnConfig {
    fn default() -> Self {
        LfhnConfig {
            input_height: 227,
            input_width: 227,
            input_channels: 3,
            root_kernel: 11,
            root_channels: 96,
            root_stride: 4,
            root_pad: 0,
            pool_window: 3,
            pool_stride: 2,
            streams: vec![vec![200, 400], vec![300]],
            mix_width: 500,
            fc_hidden: 512,
            classes: 337,
            relu_after_pointwise: true,
            relu_after_hidden_fc: true,
            lrn: LrnParams::default(),
        }
    }
}

impl LfhnConfig {
    /// Reduced network for single-core experiments: 67x67 input (root output
    /// 15x15, pooled 7x7) with the channel widths scaled down.
    pub fn desk(classes: usize) -> Self {
        LfhnConfig {
            input_height: 67,
            input_width: 67,
            root_channels: 32,
            streams: vec![vec![32, 64], vec![48]],
            mix_width: 64,
            fc_hidden: 128,
            classes,
            ..Default::default()
        }
    }

    /// Smallest configuration that still has every node type: 8x8x3 input,
    /// 4x4/1 root (5x5 maps, 2x2 after pooling), streams `[4, 6]` and `[5]`.
    pub fn tiny() -> Self {
        LfhnConfig {
            input_height: 8,
            input_width: 8,
            input_channels: 3,
            root_kernel: 4,
            root_channels: 4,
            root_stride: 1,
            streams: vec![vec![4, 6], vec![5]],
            mix_width: 5,
            fc_hidden: 6,
            classes: 3,
            ..Default::default()
        }
    }

    pub fn concat_width(&self) -> usize {
        self.streams.iter().filter_map(|s| s.last()).sum()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_height, self.input_width, self.input_channels]
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("input_height", self.input_height),
            ("input_width", self.input_width),
            ("input_channels", self.input_channels),
            ("root_kernel", self.root_kernel),
            ("root_channels", self.root_channels),
            ("root_stride", self.root_stride),
            ("pool_window", self.pool_window),
            ("pool_stride", self.pool_stride),
            ("mix_width", self.mix_width),
            ("fc_hidden", self.fc_hidden),
            ("classes", self.classes),
        ];
        for (name, v) in widths {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.streams.is_empty() {
            return Err(Error::config("at least one stream is required"));
        }
        for (i, s) in self.streams.iter().enumerate() {
            if s.is_empty() || s.contains(&0) {
                return Err(Error::config(format!(
                    "stream {i} needs one or more non-zero widths, got {s:?}"
                )));
            }
        }
        self.lrn.validate()
    }

    /// Serializes to `key=value` lines, the same keys [`LfhnConfig::apply`]
    /// accepts. Floats use shortest round-trip formatting.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let streams = self
            .streams
            .iter()
            .map(|s| {
                s.iter()
                    .map(|w| w.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect::<Vec<_>>()
            .join(";");
        vec![
            ("input_height", self.input_height.to_string()),
            ("input_width", self.input_width.to_string()),
            ("input_channels", self.input_channels.to_string()),
            ("root_kernel", self.root_kernel.to_string()),
            ("root_channels", self.root_channels.to_string()),
            ("root_stride", self.root_stride.to_string()),
            ("root_pad", self.root_pad.to_string()),
            ("pool_window", self.pool_window.to_string()),
            ("pool_stride", self.pool_stride.to_string()),
            ("streams", streams),
            ("mix_width", self.mix_width.to_string()),
            ("fc_hidden", self.fc_hidden.to_string()),
            ("classes", self.classes.to_string()),
            ("relu_after_pointwise", self.relu_after_pointwise.to_string()),
            ("relu_after_hidden_fc", self.relu_after_hidden_fc.to_string()),
            ("lrn_size", self.lrn.size.to_string()),
            ("lrn_k", self.lrn.k.to_string()),
            ("lrn_alpha", self.lrn.alpha.to_string()),
            ("lrn_beta", self.lrn.beta.to_string()),
        ]
    }

    pub const KEYS: &'static [&'static str] = &[
        "input_height",
        "input_width",
        "input_channels",
        "root_kernel",
        "root_channels",
        "root_stride",
        "root_pad",
        "pool_window",
        "pool_stride",
        "streams",
        "mix_width",
        "fc_hidden",
        "classes",
        "relu_after_pointwise",
        "relu_after_hidden_fc",
        "lrn_size",
        "lrn_k",
        "lrn_alpha",
        "lrn_beta",
    ];

    /// Sets one field from its `key=value` form. Returns `Ok(false)` for keys
    /// that are not architecture keys, so callers can route them elsewhere.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "input_height" => self.input_height = parse(key, value)?,
            "input_width" => self.input_width = parse(key, value)?,
            "input_channels" => self.input_channels = parse(key, value)?,
            "root_kernel" => self.root_kernel = parse(key, value)?,
            "root_channels" => self.root_channels = parse(key, value)?,
            "root_stride" => self.root_stride = parse(key, value)?,
            "root_pad" => self.root_pad = parse(key, value)?,
            "pool_window" => self.pool_window = parse(key, value)?,
            "pool_stride" => self.pool_stride = parse(key, value)?,
            "streams" => self.streams = parse_streams(value)?,
            "mix_width" => self.mix_width = parse(key, value)?,
            "fc_hidden" => self.fc_hidden = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "relu_after_pointwise" => self.relu_after_pointwise = parse(key, value)?,
            "relu_after_hidden_fc" => self.relu_after_hidden_fc = parse(key, value)?,
            "lrn_size" => self.lrn.size = parse(key, value)?,
            "lrn_k" => self.lrn.k = parse(key, value)?,
            "lrn_alpha" => self.lrn.alpha = parse(key, value)?,
            "lrn_beta" => self.lrn.beta = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Builds a config from a complete key map; every key must be known.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = LfhnConfig::default();
        for (k, v) in pairs {
            if !cfg.apply(k, v)? {
                return Err(Error::Unknown {
                    kind: "config key",
                    name: k.clone(),
                });
            }
        }
        Ok(cfg)
    }
}

pub(crate) fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

/// `"200,400;300"` -> `[[200, 400], [300]]`
fn parse_streams(value: &str) -> Result<Vec<Vec<usize>>> {
    value
        .split(';')
        .map(|s| {
            s.split(',')
                .map(|w| parse("streams", w))
                .collect::<Result<Vec<usize>>>()
        })
        .collect()
}
