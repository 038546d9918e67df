//! Single-channel images and Netpbm (P5) I/O.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed PGM: {0}")]
    Malformed(String),
}

/// Row-major intensity image, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0.0; width as usize * height as usize] }
    }

    pub fn filled(width: u32, height: u32, value: f32) -> Self {
        Self { width, height, data: vec![value; width as usize * height as usize] }
    }

    pub fn get(&self, u: u32, v: u32) -> f32 {
        self.data[v as usize * self.width as usize + u as usize]
    }

    /// Quantizes to 8 bits.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_u8(width: u32, height: u32, pixels: &[u8]) -> Self {
        Self { width, height, data: pixels.iter().map(|&p| p as f32 / 255.0).collect() }
    }
}

/// Raw PGM raster as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: u32,
    pub height: u32,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn header(width: u32, height: u32, maxval: u16) -> Vec<u8> {
    format!("P5\n{width} {height}\n{maxval}\n").into_bytes()
}

pub fn encode_pgm8(width: u32, height: u32, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width as usize * height as usize);
    let mut out = header(width, height, 255);
    out.extend_from_slice(pixels);
    out
}

/// 16-bit samples are written big-endian.
pub fn encode_pgm16(width: u32, height: u32, pixels: &[u16]) -> Vec<u8> {
    assert_eq!(pixels.len(), width as usize * height as usize);
    let mut out = header(width, height, 65535);
    out.reserve(pixels.len() * 2);
    for p in pixels {
        out.extend_from_slice(&p.to_be_bytes());
    }
    out
}

pub fn write_pgm8(path: &Path, width: u32, height: u32, pixels: &[u8]) -> Result<(), PgmError> {
    fs::write(path, encode_pgm8(width, height, pixels))?;
    Ok(())
}

pub fn write_pgm16(path: &Path, width: u32, height: u32, pixels: &[u16]) -> Result<(), PgmError> {
    fs::write(path, encode_pgm16(width, height, pixels))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Pgm, PgmError> {
    decode_pgm(&fs::read(path)?)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm, PgmError> {
    let mut pos = 0usize;
    let mut token = || -> Result<String, PgmError> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(PgmError::Malformed("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P5" {
        return Err(PgmError::Malformed(format!("unsupported magic {magic:?}")));
    }
    let num = |s: String| -> Result<u32, PgmError> {
        s.parse().map_err(|_| PgmError::Malformed(format!("bad header field {s:?}")))
    };
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(PgmError::Malformed(format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let n = width as usize * height as usize;
    let body = bytes.get(pos..).unwrap_or(&[]);
    let samples = if maxval < 256 {
        if body.len() < n {
            return Err(PgmError::Malformed("truncated raster".into()));
        }
        body[..n].iter().map(|&b| b as u16).collect()
    } else {
        if body.len() < 2 * n {
            return Err(PgmError::Malformed("truncated raster".into()));
        }
        body[..2 * n].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    Ok(Pgm { width, height, maxval: maxval as u16, samples })
}

impl Pgm {
    /// Normalizes samples by `maxval` into `[0, 1]`.
    pub fn to_gray(&self) -> GrayImage {
        let scale = self.maxval as f32;
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.samples.iter().map(|&s| s as f32 / scale).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm16_is_big_endian() {
        let bytes = encode_pgm16(2, 1, &[0x0102, 0xfffe]);
        assert!(bytes.starts_with(b"P5\n2 1\n65535\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0x01, 0x02, 0xff, 0xfe]);
        let back = decode_pgm(&bytes).unwrap();
        assert_eq!(back.samples, vec![0x0102, 0xfffe]);
    }

    #[test]
    fn pgm8_round_trip_with_comment() {
        let mut bytes = b"P5\n# made by hand\n3 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255]);
        let p = decode_pgm(&bytes).unwrap();
        assert_eq!((p.width, p.height, p.maxval), (3, 1, 255));
        assert_eq!(p.to_gray().data, vec![0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn rejects_truncated_and_wrong_magic() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n4 4\n255\n\x00\x01").is_err());
        assert!(decode_pgm(b"P5\n4").is_err());
    }
}
