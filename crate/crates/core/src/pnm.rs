//! Binary PGM (P5) and PPM (P6) readers and writers.
//!
//! Grayscale maps store as 8-bit PGM with `byte = round(v * 255)`; a 16-bit
//! PGM mode (big-endian samples, maxval 65535) exists for uncertainty maps.
//! Reading reproduces the quantized values exactly: `v = sample / maxval`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Decoded PNM payload: values normalized to [0, 1] by the stored maxval.
#[derive(Clone, Debug, PartialEq)]
pub struct PnmData {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    /// Channel-major, i.e. `[c, h, w]` order.
    pub values: Vec<f64>,
}

impl PnmData {
    pub fn into_tensor(self) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.values)
    }
}

fn check_range(data: &[f64], what: &str) -> Result<()> {
    if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Config(format!("{what}: values must lie in [0, 1]")));
    }
    Ok(())
}

fn plane_dims(map: &Tensor, channels: usize, what: &str) -> Result<(usize, usize)> {
    let s = &map.shape;
    match (s.len(), channels) {
        (2, 1) => Ok((s[0], s[1])),
        (3, c) if s[0] == c => Ok((s[1], s[2])),
        _ => Err(Error::ShapeMismatch {
            context: what.into(),
            detail: format!("got {s:?}, expected [h, w] or [{channels}, h, w]"),
        }),
    }
}

/// 8-bit grayscale: `byte = round(v * 255)`.
pub fn write_pgm8(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = plane_dims(map, 1, "write_pgm8")?;
    check_range(&map.data, "write_pgm8")?;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = map.data.iter().map(|&v| (v * 255.0).round() as u8).collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// 16-bit grayscale, big-endian samples: `sample = round(v * 65535)`.
pub fn write_pgm16(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = plane_dims(map, 1, "write_pgm16")?;
    check_range(&map.data, "write_pgm16")?;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n65535\n")?;
    for &v in &map.data {
        let s = (v * 65535.0).round() as u16;
        out.write_all(&s.to_be_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// 8-bit three-channel color from a `[3, h, w]` tensor.
pub fn write_ppm8(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = plane_dims(image, 3, "write_ppm8")?;
    check_range(&image.data, "write_ppm8")?;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push((image.data[c * plane + i] * 255.0).round() as u8);
        }
    }
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn parse_err(&self, message: &str) -> Error {
        Error::Parse { offset: self.pos, message: message.to_string() }
    }

    fn skip_whitespace_and_comments(&mut self) -> Result<()> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    fn read_number(&mut self) -> Result<u32> {
        self.skip_whitespace_and_comments()?;
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.parse_err("expected a decimal number"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.parse_err("number out of range"))
    }
}

/// Read a binary PGM or PPM file.
pub fn read_pnm(path: &Path) -> Result<PnmData> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    let mut r = HeaderReader { bytes: &raw, pos: 0 };

    let channels = match raw.get(0..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Parse { offset: 0, message: "not a binary PGM/PPM (magic P5/P6)".into() }),
    };
    r.pos = 2;
    let width = r.read_number()? as usize;
    let height = r.read_number()? as usize;
    let maxval = r.read_number()?;
    if maxval == 0 || maxval > 65535 {
        return Err(r.parse_err("maxval must be in 1..=65535"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    match r.bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(r.parse_err("missing whitespace before payload")),
    }

    let count = channels * width * height;
    let wide = maxval > 255;
    let need = count * if wide { 2 } else { 1 };
    let payload = &raw[r.pos.min(raw.len())..];
    if payload.len() < need {
        return Err(Error::Parse {
            offset: raw.len(),
            message: format!("truncated payload: need {need} bytes, have {}", payload.len()),
        });
    }

    let scale = 1.0 / maxval as f64;
    let plane = width * height;
    let mut values = vec![0.0; count];
    if wide {
        for i in 0..count {
            let s = u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]);
            let (pix, c) = (i / channels, i % channels);
            values[c * plane + pix] = s as f64 * scale;
        }
    } else {
        for (i, &b) in payload[..count].iter().enumerate() {
            let (pix, c) = (i / channels, i % channels);
            values[c * plane + pix] = b as f64 * scale;
        }
    }
    Ok(PnmData { channels, width, height, maxval, values })
}
