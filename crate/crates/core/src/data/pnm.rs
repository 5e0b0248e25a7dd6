use std::fs;
use std::io::Write;
use std::path::Path;

use super::DataError;

/// A decoded binary PNM image with samples scaled to `[0, 1]`,
/// stored channel-planar: `[channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PnmImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

fn malformed(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::MalformedImage { path: path.to_path_buf(), reason: reason.into() }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

/// Parses binary `P6` (RGB) or `P5` (gray) data with maxval up to 255.
pub fn parse_pnm(bytes: &[u8], path: &Path) -> Result<PnmImage, DataError> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(malformed(path, "bad magic")),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let (width, height, maxval) = match (cur.number(), cur.number(), cur.number()) {
        (Some(w), Some(h), Some(m)) => (w, h, m),
        _ => return Err(malformed(path, "unreadable header")),
    };
    if width == 0 || height == 0 {
        return Err(malformed(path, format!("bad dimensions {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(malformed(path, format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed(path, "missing separator after header"));
    }
    let body = &bytes[cur.pos + 1..];
    let plane = width * height;
    if body.len() != plane * channels {
        return Err(malformed(
            path,
            format!("expected {} data bytes for {width}x{height}, found {}", plane * channels, body.len()),
        ));
    }
    let mut data = vec![0.0; channels * plane];
    let scale = maxval as f64;
    for (i, px) in body.chunks_exact(channels).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            data[c * plane + i] = (b as f64 / scale).min(1.0);
        }
    }
    Ok(PnmImage { channels, height, width, data })
}

pub fn read_pnm(path: &Path) -> Result<PnmImage, DataError> {
    parse_pnm(&fs::read(path)?, path)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_pnm(
    path: &Path,
    magic: &str,
    channels: usize,
    height: usize,
    width: usize,
    data: &[f64],
) -> std::io::Result<()> {
    let plane = height * width;
    let mut out = Vec::with_capacity(plane * channels + 20);
    write!(out, "{magic}\n{width} {height}\n255\n")?;
    for i in 0..plane {
        for c in 0..channels {
            out.push(quantize(data[c * plane + i]));
        }
    }
    fs::write(path, out)
}

/// Writes channel-planar RGB data `[3, H, W]` as binary P6.
pub fn write_ppm(path: &Path, height: usize, width: usize, data: &[f64]) -> std::io::Result<()> {
    write_pnm(path, "P6", 3, height, width, data)
}

/// Writes one gray plane `[H, W]` as binary P5.
pub fn write_pgm(path: &Path, height: usize, width: usize, data: &[f64]) -> std::io::Result<()> {
    write_pnm(path, "P5", 1, height, width, data)
}
