//! Binary greyscale PGM (P5) images, 8 bits per pixel.

use std::fs;
use std::io;
use std::path::Path;

/// Maps `[0, 1]` to `0..=255`, clamping out-of-range values.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write(path: &Path, width: usize, height: usize, pixels: &[u8]) -> io::Result<()> {
    fs::write(path, encode(width, height, pixels))
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

/// Parses a P5 image with maxval 255. Comments are not supported.
pub fn decode(bytes: &[u8]) -> io::Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PGM header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM header field"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing PGM payload"))?;
    if data.len() != w * h {
        return Err(bad("PGM payload size mismatch"));
    }
    Ok((w, h, data.to_vec()))
}

pub fn read(path: &Path) -> io::Result<(usize, usize, Vec<u8>)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let px: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        let bytes = encode(4, 3, &px);
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(decode(&bytes).unwrap(), (4, 3, px));
    }

    #[test]
    fn rejects_short_payload() {
        let mut bytes = encode(2, 2, &[1, 2, 3, 4]);
        bytes.pop();
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn quantize_clamps() {
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(2.0), 255);
    }
}
