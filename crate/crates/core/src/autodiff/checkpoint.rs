//! Flat container of named tensors.
//!
//! ```text
//! MOCNN-CKPT v1\n
//! tensors <count>\n
//! then per tensor:
//! <name> <trainable 0|1> <ndim> <dim>...\n
//! <product(dims) little-endian f64 values>
//! ```

use std::io::{BufRead, Read, Write};
use std::path::Path;

use super::tensor::{Parameter, Tensor};
use crate::error::{Error, IoContext, Result};

pub const MAGIC: &str = "MOCNN-CKPT v1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

pub fn encode(tensors: &[(&str, &Parameter)]) -> Vec<u8> {
    let mut out = Vec::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "tensors {}", tensors.len()).unwrap();
    for (name, p) in tensors {
        let shape = p.value.shape();
        write!(out, "{name} {} {}", u8::from(p.trainable), shape.len()).unwrap();
        for d in shape {
            write!(out, " {d}").unwrap();
        }
        out.push(b'\n');
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_line(r: &mut impl BufRead) -> Result<String> {
    let mut line = String::new();
    let n = r
        .read_line(&mut line)
        .map_err(|e| format_err(format!("unreadable header: {e}")))?;
    if n == 0 || !line.ends_with('\n') {
        return Err(format_err("unexpected end of file"));
    }
    line.pop();
    Ok(line)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = bytes;
    if read_line(&mut r)? != MAGIC {
        return Err(format_err("missing MOCNN-CKPT v1 header"));
    }
    let count: usize = read_line(&mut r)?
        .strip_prefix("tensors ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| format_err("bad tensor count line"))?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let line = read_line(&mut r)?;
        let fields: Vec<&str> = line.split(' ').collect();
        let bad = || format_err(format!("bad tensor header `{line}`"));
        if fields.len() < 3 {
            return Err(bad());
        }
        let trainable = match fields[1] {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        };
        let ndim: usize = fields[2].parse().map_err(|_| bad())?;
        if fields.len() != 3 + ndim {
            return Err(bad());
        }
        let shape = fields[3..]
            .iter()
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad())?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)
            .map_err(|_| format_err(format!("truncated values for `{}`", fields[0])))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor {
            name: fields[0].to_string(),
            trainable,
            value: Tensor::new(shape, data)?,
        });
    }
    if !r.is_empty() {
        return Err(format_err("trailing bytes after last tensor"));
    }
    Ok(out)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).at(&tmp)?;
        f.write_all(bytes).at(&tmp)?;
        f.sync_all().at(&tmp)?;
    }
    std::fs::rename(&tmp, path).at(path)
}

pub fn save(path: &Path, tensors: &[(&str, &Parameter)]) -> Result<()> {
    write_atomic(path, &encode(tensors))
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path).at(path)?;
    decode(&bytes)
}
