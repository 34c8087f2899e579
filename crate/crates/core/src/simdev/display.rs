use std::io::{self, Write};

use serde::Serialize;

use super::regs::{DISP_ENABLE, DISP_PLL, DISP_TIMING_H, DISP_TIMING_V};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct DisplayMode {
    pub width: u32,
    pub height: u32,
    pub refresh: u32,
}

impl DisplayMode {
    pub const fn new(width: u32, height: u32, refresh: u32) -> Self {
        Self {
            width,
            height,
            refresh,
        }
    }

    pub fn pixels(&self) -> u32 {
        self.width * self.height
    }
}

/// The fixed mode-programming sequence: PLL, horizontal timing, vertical
/// timing, enable.
pub fn mode_sequence(mode: DisplayMode) -> [(u32, u32); 4] {
    [
        (DISP_PLL, mode.pixels().wrapping_mul(mode.refresh)),
        (DISP_TIMING_H, mode.width),
        (DISP_TIMING_V, mode.height),
        (DISP_ENABLE, 1),
    ]
}

/// One scanned-out frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u32>,
    pub digest: u64,
}

pub fn digest_words(words: &[u32]) -> u64 {
    use std::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    for w in words {
        h.write(&w.to_le_bytes());
    }
    h.finish()
}

impl Frame {
    pub fn new(width: u32, height: u32, pixels: Vec<u32>) -> Self {
        let digest = digest_words(&pixels);
        Self {
            width,
            height,
            pixels,
            digest,
        }
    }

    /// Binary portable pixmap (P6); pixels are 0x00RRGGBB.
    pub fn write_ppm<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.pixels.len() * 3);
        for p in &self.pixels {
            buf.extend([(p >> 16) as u8, (p >> 8) as u8, *p as u8]);
        }
        out.write_all(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv1a_known_vector() {
        // FNV-1a 64 of the empty input is the offset basis.
        assert_eq!(digest_words(&[]), 0xcbf2_9ce4_8422_2325);
        // FNV-1a 64 of bytes 00 00 00 00.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for _ in 0..4 {
            h ^= 0;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        assert_eq!(digest_words(&[0]), h);
    }

    #[test]
    fn ppm_header_and_size() {
        let f = Frame::new(2, 1, vec![0x00FF_0000, 0x0000_00FF]);
        let mut out = Vec::new();
        f.write_ppm(&mut out).unwrap();
        assert!(out.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&out[out.len() - 6..], &[255, 0, 0, 0, 0, 255]);
    }
}
