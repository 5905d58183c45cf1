//! Binary PPM (`P6`) and PGM (`P5`) images with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB bytes, raster order.
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dim(format!("{width}×{height} RGB image with {} bytes", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn encode(&self) -> Vec<u8> {
        encode(b"P6", self.width, self.height, &self.data)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (width, height, data) = decode(bytes, b"P6", 3)?;
        Ok(Self { width, height, data })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dim(format!("{width}×{height} gray image with {} bytes", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        encode(b"P5", self.width, self.height, &self.data)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (width, height, data) = decode(bytes, b"P5", 1)?;
        Ok(Self { width, height, data })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

fn encode(magic: &[u8], width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() + 20);
    out.extend_from_slice(magic);
    out.extend_from_slice(format!("\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(data);
    out
}

fn parse_error(offset: usize, message: impl Into<String>) -> Error {
    Error::ImageParse { offset, message: message.into() }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    /// Skips whitespace and `#` comments.
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_error(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_error(start, format!("{what} out of range")))
    }
}

fn decode(bytes: &[u8], magic: &[u8], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 {
        return Err(parse_error(bytes.len(), "file too short for magic number"));
    }
    if &bytes[..2] != magic {
        return Err(parse_error(
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..2]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = {
        cur.skip_space();
        cur.pos
    };
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(parse_error(maxval_at, format!("maxval {maxval} unsupported, expected 255")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(parse_error(cur.pos, "missing whitespace after header")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| parse_error(2, "image dimensions overflow"))?;
    let avail = bytes.len() - cur.pos;
    if avail < need {
        return Err(parse_error(bytes.len(), format!("pixel data short: {avail} of {need} bytes")));
    }
    Ok((width, height, bytes[cur.pos..cur.pos + need].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_pixel_ppm_byte_count() {
        let img = RgbImage::new(2, 1, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let bytes = img.encode();
        assert_eq!(bytes.len(), 17);
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(RgbImage::decode(&bytes).unwrap(), img);
    }

    #[test]
    fn pgm_roundtrip_with_comments() {
        let img = GrayImage::new(3, 2, vec![0, 10, 20, 30, 40, 255]).unwrap();
        assert_eq!(GrayImage::decode(&img.encode()).unwrap(), img);
        let commented = b"P5 # made by hand\n3 # width\n2\n255\n\x00\x0a\x14\x1e\x28\xff";
        assert_eq!(GrayImage::decode(commented).unwrap(), img);
    }

    #[test]
    fn parse_errors_report_offsets() {
        let offset = |r: Result<RgbImage>| match r {
            Err(Error::ImageParse { offset, .. }) => offset,
            other => panic!("{other:?}"),
        };
        assert_eq!(offset(RgbImage::decode(b"P3\n1 1\n255\n0 0 0")), 0);
        assert_eq!(offset(RgbImage::decode(b"P6\n1 1\n65535\n")), 7);
        assert_eq!(offset(RgbImage::decode(b"P6\n2 1\n255\n\x01\x02")), 13);
        assert_eq!(offset(RgbImage::decode(b"P6\nx")), 3);
        assert_eq!(offset(RgbImage::decode(b"P")), 1);
        assert!(GrayImage::decode(&RgbImage::new(1, 1, vec![0; 3]).unwrap().encode()).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let img = RgbImage::new(2, 2, (0..12).collect()).unwrap();
        img.save(&path).unwrap();
        assert_eq!(RgbImage::load(&path).unwrap(), img);
        assert!(matches!(RgbImage::load(dir.path().join("missing.ppm")), Err(Error::Io { .. })));
    }
}
