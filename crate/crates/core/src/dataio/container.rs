//! Raw clip container: `STV1` magic, little-endian `u32` T, H, W, C, then
//! `T·H·W·C` bytes in frame-major, row-major, channel-interleaved order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array4;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"STV1";
const HEADER_LEN: usize = 20;

/// Frame dimensions stored in a container header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerHeader {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ContainerHeader {
    pub fn payload_len(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }
}

pub fn encode(pixels: &Array4<u8>) -> Vec<u8> {
    let s = pixels.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + pixels.len());
    out.extend_from_slice(MAGIC);
    for &d in s {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend(pixels.iter().copied());
    out
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<ContainerHeader> {
    let bad = |reason: &str| Error::Container {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic (expected STV1)"));
    }
    let dim = |i: usize| {
        let start = 4 + 4 * i;
        u32::from_le_bytes(bytes[start..start + 4].try_into().expect("4 bytes")) as usize
    };
    let h = ContainerHeader {
        frames: dim(0),
        height: dim(1),
        width: dim(2),
        channels: dim(3),
    };
    if h.frames == 0 || h.height == 0 || h.width == 0 || h.channels == 0 {
        return Err(bad("zero-sized dimension"));
    }
    Ok(h)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Array4<u8>> {
    let h = parse_header(bytes, path)?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != h.payload_len() {
        return Err(Error::Container {
            path: path.to_path_buf(),
            reason: format!(
                "payload has {} bytes, header implies {}",
                payload.len(),
                h.payload_len()
            ),
        });
    }
    Ok(
        Array4::from_shape_vec((h.frames, h.height, h.width, h.channels), payload.to_vec())
            .expect("length checked"),
    )
}

pub fn write(path: &Path, pixels: &Array4<u8>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&encode(pixels)).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Array4<u8>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn read_header(path: &Path) -> Result<ContainerHeader> {
    let mut buf = [0u8; HEADER_LEN];
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
    parse_header(&buf[..n], path)
}

/// Pixels mapped to `[0, 1]` by division by 255.
pub fn to_unit(pixels: &Array4<u8>) -> Array4<f64> {
    pixels.mapv(|v| v as f64 / 255.0)
}
