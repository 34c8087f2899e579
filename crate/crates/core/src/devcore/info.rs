use serde::Serialize;

use crate::error::{Error, Result};
use crate::simdev::DisplayMode;

pub const INFO_VERSION: u32 = 1;

/// Read-only device description handed to every library.
///
/// Binary layout, little-endian 32-bit words:
/// `version, vram_total, segment_size, n_displays`, then per display
/// `n_modes` followed by `n_modes` triples `(width, height, refresh)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InfoPage {
    pub version: u32,
    pub vram_total: u32,
    pub segment_size: u32,
    pub displays: Vec<Vec<DisplayMode>>,
}

impl InfoPage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = vec![
            self.version,
            self.vram_total,
            self.segment_size,
            self.displays.len() as u32,
        ];
        for modes in &self.displays {
            w.push(modes.len() as u32);
            for m in modes {
                w.extend([m.width, m.height, m.refresh]);
            }
        }
        w.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut words = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()));
        let mut next = || words.next().ok_or(Error::Inval);
        let version = next()?;
        let vram_total = next()?;
        let segment_size = next()?;
        let n = next()?;
        let mut displays = Vec::new();
        for _ in 0..n {
            let k = next()?;
            let mut modes = Vec::new();
            for _ in 0..k {
                modes.push(DisplayMode::new(next()?, next()?, next()?));
            }
            displays.push(modes);
        }
        Ok(Self {
            version,
            vram_total,
            segment_size,
            displays,
        })
    }

    pub fn supports(&self, display: u32, mode: DisplayMode) -> bool {
        self.displays
            .get(display as usize)
            .is_some_and(|modes| modes.contains(&mode))
    }
}
