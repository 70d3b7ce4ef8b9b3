//! Netpbm gray (PGM) and color (PPM) images, plain and raw, 8-bit only.

use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::tensor::{ImageTensor, MaskMap, Tensor};

const MAXVAL: u32 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmFormat {
    /// Plain gray.
    P2,
    /// Plain color.
    P3,
    /// Raw gray.
    P5,
    /// Raw color.
    P6,
}

impl PnmFormat {
    fn channels(self) -> usize {
        match self {
            Self::P2 | Self::P5 => 1,
            Self::P3 | Self::P6 => 3,
        }
    }

    fn is_raw(self) -> bool {
        matches!(self, Self::P5 | Self::P6)
    }

    fn magic(self) -> &'static str {
        match self {
            Self::P2 => "P2",
            Self::P3 => "P3",
            Self::P5 => "P5",
            Self::P6 => "P6",
        }
    }

    /// Raw format for the given channel count.
    pub fn raw_for(channels: usize) -> Result<Self> {
        match channels {
            1 => Ok(Self::P5),
            3 => Ok(Self::P6),
            n => Err(invalid(format!("no PNM format for {n} channels"))),
        }
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    /// Skips whitespace and `#` comments running to end of line.
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

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(if start >= self.bytes.len() {
                parse_err(start, format!("unexpected end of file, expected {what}"))
            } else {
                parse_err(start, format!("expected {what}"))
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| parse_err(start, format!("{what} out of range")))
    }

    /// A header field must be followed by at least one more byte.
    fn header_number(&mut self, what: &str) -> Result<u32> {
        let v = self.number(what)?;
        if self.pos >= self.bytes.len() {
            return Err(parse_err(
                self.pos,
                format!("unexpected end of file after {what}"),
            ));
        }
        Ok(v)
    }
}

/// Decodes a PGM (1 channel) or PPM (3 channels) byte stream into `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.len() < 2 {
        return Err(parse_err(
            bytes.len(),
            "unexpected end of file in magic number",
        ));
    }
    let format = match &bytes[..2] {
        b"P2" => PnmFormat::P2,
        b"P3" => PnmFormat::P3,
        b"P5" => PnmFormat::P5,
        b"P6" => PnmFormat::P6,
        [b'P', b'1' | b'4'] => return Err(Error::UnsupportedFormat("bitmap PNM".into())),
        _ => return Err(parse_err(0, "bad magic number")),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.header_number("width")? as usize;
    let height = cur.header_number("height")? as usize;
    let maxval_at = {
        cur.skip_space();
        cur.pos
    };
    let maxval = cur.header_number("maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(2, "zero image dimension"));
    }
    if maxval != MAXVAL {
        return Err(Error::UnsupportedFormat(format!(
            "maxval {maxval} at byte {maxval_at}, only 255 is supported"
        )));
    }
    let channels = format.channels();
    let n = width * height * channels;
    let data: Vec<f64> = if format.is_raw() {
        match cur.bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            Some(_) => return Err(parse_err(cur.pos, "expected whitespace before raster")),
            None => return Err(parse_err(cur.pos, "unexpected end of file before raster")),
        }
        let raster = &bytes[cur.pos..];
        if raster.len() < n {
            return Err(parse_err(
                bytes.len(),
                format!("truncated raster: {} of {n} samples", raster.len()),
            ));
        }
        raster[..n].iter().map(|&v| v as f64 / 255.0).collect()
    } else {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            cur.skip_space();
            let at = cur.pos;
            let v = cur.number("sample")?;
            if v > maxval {
                return Err(parse_err(at, format!("sample {v} exceeds maxval")));
            }
            out.push(v as f64 / 255.0);
        }
        out
    };
    Tensor::image(height, width, channels, data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an `h×w×1` or `h×w×3` image; samples are `round(v·255)`.
pub fn encode_pnm(img: &ImageTensor, format: PnmFormat) -> Result<Vec<u8>> {
    if img.rank() != 3 || img.channels() != format.channels() {
        return Err(invalid(format!(
            "{} needs {} channel(s), image has shape {:?}",
            format.magic(),
            format.channels(),
            img.shape()
        )));
    }
    if !img.is_finite() {
        return Err(invalid("image holds non-finite values"));
    }
    let (h, w, c) = img.dim3();
    let mut out = format!("{}\n{w} {h}\n{MAXVAL}\n", format.magic()).into_bytes();
    if format.is_raw() {
        out.extend(img.data().iter().map(|&v| quantize(v)));
    } else {
        for row in img.data().chunks(w * c) {
            let line: Vec<String> = row.iter().map(|&v| quantize(v).to_string()).collect();
            out.extend_from_slice(line.join(" ").as_bytes());
            out.push(b'\n');
        }
    }
    Ok(out)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    decode_pnm(&fs::read(path)?)
}

/// Writes raw PGM or PPM depending on the channel count.
pub fn save_image(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    let bytes = encode_pnm(img, PnmFormat::raw_for(img.channels())?)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Loads a mask; colour files are reduced to their channel mean.
pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskMap> {
    let img = load_image(path)?;
    mask_from_image(&img)
}

pub fn mask_from_image(img: &ImageTensor) -> Result<MaskMap> {
    let (h, w, c) = img.dim3();
    let data = img
        .data()
        .chunks(c)
        .map(|p| p.iter().sum::<f64>() / c as f64)
        .collect();
    MaskMap::new(h, w, data)
}

pub fn encode_mask(m: &MaskMap) -> Result<Vec<u8>> {
    encode_pnm(&m.clamp01().to_tensor(), PnmFormat::P5)
}

/// Writes a raw PGM with samples `round(m·255)`.
pub fn save_mask(path: impl AsRef<Path>, m: &MaskMap) -> Result<()> {
    fs::write(path, encode_mask(m)?)?;
    Ok(())
}
