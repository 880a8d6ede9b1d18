//! Binary portable pixmap (P6, maxval 255).

use std::io::Write;
use std::path::Path;

use rottrans_core::data::RgbImage;
use rottrans_core::{Scalar, Tensor};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("PPM format error at byte {offset}: {message}")]
pub struct PpmError {
    pub offset: usize,
    pub message: String,
}

fn fail<T>(offset: usize, message: impl Into<String>) -> Result<T, PpmError> {
    Err(PpmError {
        offset,
        message: message.into(),
    })
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
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

    fn number(&mut self, what: &str) -> Result<usize, PpmError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return match self.bytes.get(start) {
                None => fail(start, format!("header ends before {what}")),
                Some(_) => fail(start, format!("expected {what}")),
            };
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse().or_else(|_| fail(start, format!("{what} {text} is out of range")))
    }
}

/// Decodes a P6 image.
pub fn decode(bytes: &[u8]) -> Result<RgbImage, PpmError> {
    if bytes.len() < 2 {
        return fail(0, "file too short for the P6 magic");
    }
    if &bytes[..2] != b"P6" {
        return fail(0, "missing P6 magic");
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    h.skip_space();
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return fail(maxval_at, format!("maxval {maxval} is not supported, expected 255"));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        Some(_) => return fail(h.pos, "expected a single whitespace byte after maxval"),
        None => return fail(h.pos, "header ends before the pixel data"),
    }
    if width == 0 || height == 0 {
        return fail(2, format!("degenerate {width}x{height} image"));
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| PpmError {
            offset: 2,
            message: format!("{width}x{height} is too large"),
        })?;
    let payload = &bytes[h.pos..];
    if payload.len() != need {
        return fail(
            h.pos + payload.len().min(need),
            format!(
                "header declares {width}x{height} ({need} payload bytes) but {} follow",
                payload.len()
            ),
        );
    }
    Ok(RgbImage::new(width, height, payload.to_vec()).expect("length checked"))
}

pub fn encode(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn read(path: &Path) -> AppResult<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode(&bytes).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))
}

pub fn write(path: &Path, image: &RgbImage) -> AppResult<()> {
    let mut f = std::fs::File::create(path).map_err(|e| AppError::io(path, e))?;
    f.write_all(&encode(image)).map_err(|e| AppError::io(path, e))
}

/// `[H, W, 3]` tensor in `[0, 1]`.
pub fn load_image<F: Scalar>(path: &Path) -> AppResult<Tensor<F>> {
    Ok(read(path)?.to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel() {
        let img = decode(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        let t = img.to_tensor::<f64>();
        assert_eq!(t.shape(), &[1, 1, 3]);
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let img = decode(b"P6 # made by hand\n2 1\n# max\n255\n\x00\x01\x02\x03\x04\x05").unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.pixels, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn payload_length_mismatch_reports_offset() {
        let e = decode(b"P6\n2 2\n255\n\x00\x00\x00").unwrap_err();
        assert_eq!(e.offset, 14);
        assert!(e.message.contains("12 payload bytes"));
        let e = decode(b"P6\n1 1\n255\n\x00\x00\x00\x00").unwrap_err();
        assert_eq!(e.offset, 14);
    }

    #[test]
    fn malformed_headers() {
        assert_eq!(decode(b"P5\n1 1\n255\n\x00").unwrap_err().offset, 0);
        assert_eq!(decode(b"P6\nx 1\n255\n").unwrap_err().offset, 3);
        assert_eq!(decode(b"P6\n1 1\n65535\n\x00").unwrap_err().offset, 7);
        assert!(decode(b"P6\n1").unwrap_err().message.contains("height"));
    }

    #[test]
    fn encode_round_trip() {
        let px: Vec<u8> = (0..5 * 3 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let img = RgbImage::new(5, 3, px).unwrap();
        assert_eq!(decode(&encode(&img)).unwrap(), img);
    }
}
