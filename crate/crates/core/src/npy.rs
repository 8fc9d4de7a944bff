//! `.npy` version 1.0 files: little-endian `f4`, `f8`, `i4`, `i8` and `b1`,
//! C order only.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::shape::Shape;
use crate::tensor::{TensorBuffer, TensorData};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

fn descr(dtype: DType) -> &'static str {
    match dtype {
        DType::Bool => "|b1",
        DType::I32 => "<i4",
        DType::I64 => "<i8",
        DType::F32 => "<f4",
        DType::F64 => "<f8",
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Npy(msg.into())
}

pub fn header(dtype: DType, shape: &Shape) -> String {
    let dims = match shape.dims() {
        [d] => format!("({d},)"),
        dims => format!("({})", dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    };
    let mut h = format!("{{'descr': '{}', 'fortran_order': False, 'shape': {dims}, }}", descr(dtype));
    // magic + version + length + header + '\n' is a multiple of 64 bytes
    let used = MAGIC.len() + 2 + 2 + h.len() + 1;
    h.extend(std::iter::repeat_n(' ', used.next_multiple_of(64) - used));
    h.push('\n');
    h
}

pub fn write(w: &mut impl Write, buf: &TensorBuffer) -> Result<()> {
    let h = header(buf.dtype(), buf.shape());
    let len = u16::try_from(h.len()).map_err(|_| bad("header longer than 65535 bytes"))?;
    w.write_all(MAGIC)?;
    w.write_all(&[1, 0])?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(h.as_bytes())?;
    let mut bytes = Vec::with_capacity(buf.len() * buf.dtype().size());
    match buf.data() {
        TensorData::Bool(v) => bytes.extend(v.iter().map(|&b| u8::from(b))),
        TensorData::I32(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        TensorData::I64(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        TensorData::F32(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn to_bytes(buf: &TensorBuffer) -> Vec<u8> {
    let mut out = Vec::new();
    write(&mut out, buf).expect("writing to memory");
    out
}

pub fn save(path: impl AsRef<Path>, buf: &TensorBuffer) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w, buf)?;
    w.flush()?;
    Ok(())
}

pub fn read(r: &mut impl Read) -> Result<TensorBuffer> {
    let mut pre = [0u8; 10];
    r.read_exact(&mut pre).map_err(|_| bad("truncated preamble"))?;
    if &pre[..6] != MAGIC {
        return Err(bad("missing magic string"));
    }
    if pre[6..8] != [1, 0] {
        return Err(bad(format!("unsupported version {}.{}", pre[6], pre[7])));
    }
    let len = u16::from_le_bytes([pre[8], pre[9]]) as usize;
    let mut h = vec![0u8; len];
    r.read_exact(&mut h).map_err(|_| bad("truncated header"))?;
    let h = std::str::from_utf8(&h).map_err(|_| bad("header is not text"))?;
    let (dtype, fortran, shape) = parse_header(h)?;
    if fortran {
        return Err(bad("fortran_order=True is not supported"));
    }
    let n = shape.element_count();
    let mut bytes = vec![0u8; n * dtype.size()];
    r.read_exact(&mut bytes).map_err(|_| bad(format!("expected {} data bytes", bytes.len())))?;
    let data = match dtype {
        DType::Bool => TensorData::Bool(
            bytes.iter().map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(bad(format!("invalid bool byte {b}"))),
            })
            .collect::<Result<_>>()?,
        ),
        DType::I32 => TensorData::I32(bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
        DType::I64 => TensorData::I64(bytes.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
        DType::F32 => TensorData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        DType::F64 => TensorData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
    };
    TensorBuffer::new(shape, data)
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<TensorBuffer> {
    read(&mut bytes)
}

pub fn load(path: impl AsRef<Path>) -> Result<TensorBuffer> {
    read(&mut BufReader::new(File::open(path)?))
}

/// Parses the header dict: `descr`, `fortran_order` and `shape`, in any
/// order.
fn parse_header(h: &str) -> Result<(DType, bool, Shape)> {
    let body = h.trim().strip_prefix('{').and_then(|b| b.strip_suffix('}')).ok_or_else(|| bad("header is not a dict"))?;
    let (mut dtype, mut fortran, mut shape) = (None, None, None);
    let mut rest = body.trim();
    while !rest.is_empty() {
        let (key, after) = quoted(rest)?;
        let after = after.trim_start().strip_prefix(':').ok_or_else(|| bad("expected ':'"))?.trim_start();
        rest = match key {
            "descr" => {
                let (d, tail) = quoted(after)?;
                dtype = Some(match d {
                    "|b1" => DType::Bool,
                    "<i4" => DType::I32,
                    "<i8" => DType::I64,
                    "<f4" => DType::F32,
                    "<f8" => DType::F64,
                    other => return Err(bad(format!("unsupported descr {other:?}"))),
                });
                tail
            }
            "fortran_order" => {
                let (v, tail) = if let Some(t) = after.strip_prefix("False") {
                    (false, t)
                } else if let Some(t) = after.strip_prefix("True") {
                    (true, t)
                } else {
                    return Err(bad("fortran_order must be True or False"));
                };
                fortran = Some(v);
                tail
            }
            "shape" => {
                let after = after.strip_prefix('(').ok_or_else(|| bad("shape must be a tuple"))?;
                let close = after.find(')').ok_or_else(|| bad("unterminated shape"))?;
                let dims = after[..close]
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.trim_end_matches('L').parse::<usize>().map_err(|_| bad(format!("bad dimension {s:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                shape = Some(Shape::new(dims));
                &after[close + 1..]
            }
            other => return Err(bad(format!("unexpected key {other:?}"))),
        };
        rest = rest.trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }
    match (dtype, fortran, shape) {
        (Some(d), Some(f), Some(s)) => Ok((d, f, s)),
        _ => Err(bad("header lacks descr, fortran_order or shape")),
    }
}

/// Splits a leading `'...'` or `"..."` literal from `s`.
fn quoted(s: &str) -> Result<(&str, &str)> {
    let q = s.chars().next().filter(|c| *c == '\'' || *c == '"').ok_or_else(|| bad("expected a quoted string"))?;
    let end = s[1..].find(q).ok_or_else(|| bad("unterminated string"))? + 1;
    Ok((&s[1..end], &s[end + 1..]))
}
