//! Binary P6 PPM with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageGrid;

pub fn encode(img: &ImageGrid) -> Vec<u8> {
    let side = img.side();
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    out.extend(img.to_bytes());
    out
}

pub fn write(path: &Path, img: &ImageGrid) -> Result<()> {
    fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<ImageGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::malformed(path, reason))
}

/// Parses a P6 image. Header tokens are separated by whitespace and may be
/// interleaved with `#` comments; exactly one whitespace byte precedes the
/// raster.
pub fn decode(bytes: &[u8]) -> std::result::Result<ImageGrid, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(format!("bad magic `{}`", fields[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header number `{s}`"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if w != h || w == 0 {
        return Err(format!("expected a square image, got {w}x{h}"));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < need {
        return Err(format!("truncated raster: {} of {need} bytes", raster.len()));
    }
    if raster.len() > need {
        return Err(format!("{} trailing bytes after raster", raster.len() - need));
    }
    ImageGrid::from_bytes(w, raster).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::quantize;

    #[test]
    fn header_is_exact() {
        let img = ImageGrid::filled(2, [1.0, 0.0, 0.5]);
        let bytes = encode(&img);
        assert_eq!(&bytes[..11], b"P6\n2 2\n255\n");
        assert_eq!(&bytes[11..14], &[255, 0, 128]);
        assert_eq!(bytes.len(), 11 + 12);
    }

    #[test]
    fn decode_accepts_comments() {
        let mut bytes = b"P6 # made by hand\n1 1\n255\n".to_vec();
        bytes.extend([10, 20, 30]);
        let img = decode(&bytes).unwrap();
        assert_eq!(img.pixel(0, 0), [quantize(10.0 / 255.0), quantize(20.0 / 255.0), quantize(30.0 / 255.0)]);
    }

    #[test]
    fn truncation_is_reported() {
        let img = ImageGrid::filled(4, [0.2; 3]);
        let bytes = encode(&img);
        assert!(decode(&bytes[..bytes.len() - 1]).unwrap_err().contains("truncated"));
        assert!(decode(b"P5\n1 1\n255\n\0").is_err());
    }
}
