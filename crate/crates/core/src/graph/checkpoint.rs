//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! "LFHN"                      4-byte magic
//! version                     u32
//! config_len                  u32
//! config                      config_len bytes of UTF-8 `key=value` lines
//! param_count                 u32
//! param_count records:
//!   name_len u32, name        UTF-8
//!   rank u32, dims            rank x u64
//!   values                    product(dims) x f64
//! ```
//!
//! The config block holds every architecture key plus `frozen=<groups>`
//! (comma separated, possibly empty). Loading rebuilds the graph from the
//! config and requires each record to match a parameter of that graph by name
//! and shape.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{LfhnConfig, NetworkGraph};
use crate::error::{Error, Result};
use crate::tensor::ShapeDisplay;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LFHN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(net: &NetworkGraph) -> Vec<u8> {
    let mut config = String::new();
    for (k, v) in net.config().to_pairs() {
        config.push_str(&format!("{k}={v}\n"));
    }
    config.push_str(&format!("frozen={}\n", net.frozen_groups().join(",")));

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(net: &NetworkGraph, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(net))?;
    f.sync_all()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Format(format!(
                "truncated file while reading {what} at byte {}",
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(len, what)?)
            .map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NetworkGraph> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic bytes; not an LFHN checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = r.u32("config length")? as usize;
    let text = r.string(len, "config block")?;
    let mut pairs = BTreeMap::new();
    let mut frozen = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("config line without '=': {line:?}")))?;
        if k == "frozen" {
            frozen = v.split(',').filter(|g| !g.is_empty()).map(String::from).collect();
        } else {
            pairs.insert(k.to_string(), v.to_string());
        }
    }
    let cfg = LfhnConfig::from_pairs(&pairs)?;
    let mut net = NetworkGraph::zeroed(&cfg)?;

    let count = r.u32("parameter count")? as usize;
    if count != net.params().len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} parameter records, config implies {}",
            net.params().len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = r.u32("parameter name length")? as usize;
        let name = r.string(name_len, "parameter name")?.to_string();
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let idx = net
            .params()
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::Format(format!("unexpected parameter record {name:?}")))?;
        if seen[idx] {
            return Err(Error::Format(format!("duplicate parameter record {name:?}")));
        }
        seen[idx] = true;
        let param = &mut net.params[idx];
        if param.value.shape() != dims.as_slice() {
            return Err(Error::Shape(format!(
                "{name} stored as {} but the header config gives {}",
                ShapeDisplay(&dims),
                ShapeDisplay(param.value.shape())
            )));
        }
        let raw = r.take(param.value.len() * 8, "parameter values")?;
        for (v, b) in param.value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().unwrap());
        }
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last record",
            bytes.len() - r.at
        )));
    }
    for g in frozen {
        net.set_frozen(&g, true)?;
    }
    Ok(net)
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkGraph> {
    decode(&fs::read(path)?)
}
