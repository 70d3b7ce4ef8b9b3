//! Plain-text parameter checkpoints.
//!
//! ```text
//! runseg-checkpoint 1
//! stages 4
//! hidden 4
//! param stage1.alpha - <sha256>
//! -2.2521684610440903
//! param stage1.sofs.small1.weight 3x3x6x4 <sha256>
//! 0.0123 -0.2 ...
//! ```
//!
//! Each `param` line carries the name, the shape (`-` for a scalar) and
//! the SHA-256 of the value line that follows it. Values are written in
//! Rust's shortest round-trip notation, so a load restores every bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "runseg-checkpoint";
const VERSION: u32 = 1;

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn shape_token(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".into()
    } else {
        shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x")
    }
}

pub fn write_checkpoint(mut out: impl Write, params: &ParamSet) -> Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC} {VERSION}")?;
    writeln!(out, "stages {}", params.stages())?;
    writeln!(out, "hidden {}", params.hidden())?;
    for (name, t) in params.entries() {
        let values = t
            .data()
            .iter()
            .map(|v| format!("{v:?}"))
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(
            out,
            "param {name} {} {}",
            shape_token(t.shape()),
            hex_digest(values.as_bytes())
        )?;
        writeln!(out, "{values}")?;
    }
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamSet) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params)?;
    fs::write(path, buf)?;
    Ok(())
}

struct Lines<'a> {
    text: &'a str,
    offset: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        if self.offset >= self.text.len() {
            return Err(Error::Parse {
                offset: self.offset,
                message: "unexpected end of checkpoint".into(),
            });
        }
        let rest = &self.text[self.offset..];
        let len = rest.find('\n').unwrap_or(rest.len());
        let start = self.offset;
        self.offset += (len + 1).min(rest.len());
        Ok((start, &rest[..len]))
    }

    fn done(&self) -> bool {
        self.offset >= self.text.len()
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

fn header_value(lines: &mut Lines, key: &str) -> Result<usize> {
    let (at, line) = lines.next()?;
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(at, format!("expected `{key} <n>`")))
}

pub fn read_checkpoint(text: &str) -> Result<ParamSet> {
    let mut lines = Lines { text, offset: 0 };
    let (at, magic) = lines.next()?;
    let version = magic
        .strip_prefix(CHECKPOINT_MAGIC)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| parse_err(at, "not a checkpoint file"))?;
    if version != VERSION.to_string() {
        return Err(Error::UnsupportedFormat(format!(
            "checkpoint version {version}"
        )));
    }
    let stages = header_value(&mut lines, "stages")?;
    let hidden = header_value(&mut lines, "hidden")?;

    let mut entries = Vec::new();
    while !lines.done() {
        let (at, head) = lines.next()?;
        let fields: Vec<&str> = head.split(' ').collect();
        if fields.len() != 4 || fields[0] != "param" {
            return Err(parse_err(at, "expected `param <name> <shape> <sha256>`"));
        }
        let shape: Vec<usize> = if fields[2] == "-" {
            Vec::new()
        } else {
            fields[2]
                .split('x')
                .map(|d| {
                    d.parse()
                        .map_err(|_| parse_err(at, format!("bad shape `{}`", fields[2])))
                })
                .collect::<Result<_>>()?
        };
        let (vat, values) = lines.next()?;
        if hex_digest(values.as_bytes()) != fields[3] {
            return Err(Error::Checksum(format!("parameter `{}`", fields[1])));
        }
        let data: Vec<f64> = values
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|v| {
                v.parse()
                    .map_err(|_| parse_err(vat, format!("bad value `{v}`")))
            })
            .collect::<Result<_>>()?;
        let t = Tensor::new(&shape, data).map_err(|e| parse_err(vat, e.to_string()))?;
        entries.push((fields[1].to_string(), t));
    }
    ParamSet::from_entries(stages, hidden, entries)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet> {
    let bytes = fs::read(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| parse_err(e.valid_up_to(), "checkpoint is not UTF-8"))?;
    read_checkpoint(text)
}
