//! 16-bit grayscale raster files: `GIMG`, `u32` height, `u32` width,
//! `u32` reserved (0), then `height * width` little-endian `u16` pixels.

use std::path::Path;

use crate::error::{Error, Result};

pub const RASTER_MAGIC: &[u8; 4] = b"GIMG";
const HEADER: usize = 16;

pub fn write_raster(path: &Path, height: usize, width: usize, pixels: &[u16]) -> Result<()> {
    assert_eq!(pixels.len(), height * width, "raster size");
    let mut out = Vec::with_capacity(HEADER + pixels.len() * 2);
    out.extend_from_slice(RASTER_MAGIC);
    for v in [height as u32, width as u32, 0u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let what = || format!("raster {}", path.display());
    if bytes.len() < HEADER || &bytes[..4] != RASTER_MAGIC {
        return Err(Error::format(what(), "missing GIMG header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w) = (word(4), word(8));
    if bytes.len() != HEADER + 2 * h * w {
        return Err(Error::format(
            what(),
            format!("expected {} bytes for {h}x{w}, found {}", HEADER + 2 * h * w, bytes.len()),
        ));
    }
    let pixels = bytes[HEADER..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok((h, w, pixels))
}
