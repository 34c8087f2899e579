use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::devcore::DEFAULT_SEGMENT_SIZE;
use crate::error::{Error, Result};
use crate::legacydrv::DEFAULT_KERNEL_POOL_PAGES;
use crate::libdrv::{DEFAULT_POLL_QUANTUM, DEFAULT_POOL_PAGES};
use crate::platform::{CostModel, DEFAULT_SYSTEM_PAGES};
use crate::simdev::DEFAULT_VRAM_BYTES;

/// Tunables shared by every bench command. Loaded from a flat `key=value`
/// file; `#` starts a comment.
///
/// ```text
/// cross = 1000
/// copy = 1
/// check = 2
/// cycle = 1
/// call = 10
/// pool_pages = 256
/// segment_size = 1048576
/// vram_bytes = 16777216
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub costs: CostModel,
    pub pool_pages: u32,
    pub segment_size: u32,
    pub vram_bytes: u32,
    pub system_pages: u32,
    pub kernel_pool_pages: u32,
    pub poll_quantum: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            costs: CostModel::default(),
            pool_pages: DEFAULT_POOL_PAGES,
            segment_size: DEFAULT_SEGMENT_SIZE,
            vram_bytes: DEFAULT_VRAM_BYTES,
            system_pages: DEFAULT_SYSTEM_PAGES,
            kernel_pool_pages: DEFAULT_KERNEL_POOL_PAGES,
            poll_quantum: DEFAULT_POLL_QUANTUM,
        }
    }
}

fn int<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    let v = v.replace('_', "");
    let parsed = match v.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16).ok().and_then(|x| x.to_string().parse().ok()),
        None => v.parse().ok(),
    };
    parsed.ok_or_else(|| Error::Config(format!("{key}: `{v}` is not a valid number")))
}

impl BenchConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let c = &mut self.costs;
        match key {
            "cross" => c.cross = int(key, value)?,
            "copy" => c.copy = int(key, value)?,
            "check" => c.check = int(key, value)?,
            "cycle" => c.cycle = int(key, value)?,
            "call" => c.call = int(key, value)?,
            "pool_pages" => self.pool_pages = int(key, value)?,
            "segment_size" => self.segment_size = int(key, value)?,
            "vram_bytes" => self.vram_bytes = int(key, value)?,
            "system_pages" => self.system_pages = int(key, value)?,
            "kernel_pool_pages" => self.kernel_pool_pages = int(key, value)?,
            "poll_quantum" => self.poll_quantum = int(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if cfg.poll_quantum == 0 {
            return Err(Error::Config("poll_quantum must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides_and_comments() {
        let cfg = BenchConfig::parse("# costs\ncross = 500\n\npool_pages=64 # small\nvram_bytes = 0x200_0000\n").unwrap();
        assert_eq!(cfg.costs.cross, 500);
        assert_eq!(cfg.costs.copy, 1);
        assert_eq!(cfg.pool_pages, 64);
        assert_eq!(cfg.vram_bytes, 32 << 20);
    }

    #[test]
    fn rejects_unknown_keys_and_garbage() {
        assert!(BenchConfig::parse("speed = 3").is_err());
        assert!(BenchConfig::parse("cross").is_err());
        assert!(BenchConfig::parse("cross = lots").is_err());
        assert!(BenchConfig::parse("poll_quantum = 0").is_err());
    }
}
