//! Strict NPY 1.0 reader and writer for the handful of dtypes the archives use:
//! little-endian `f32`, `u8` and `i64`, C order.

use crate::error::{Error, Result};

const MAGIC: &[u8] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum NpyArray {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
    I64 { shape: Vec<usize>, data: Vec<i64> },
}

impl NpyArray {
    pub fn shape(&self) -> &[usize] {
        match self {
            NpyArray::F32 { shape, .. }
            | NpyArray::U8 { shape, .. }
            | NpyArray::I64 { shape, .. } => shape,
        }
    }

    fn descr(&self) -> &'static str {
        match self {
            NpyArray::F32 { .. } => "<f4",
            NpyArray::U8 { .. } => "|u1",
            NpyArray::I64 { .. } => "<i8",
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            NpyArray::F32 { .. } => "float32",
            NpyArray::U8 { .. } => "uint8",
            NpyArray::I64 { .. } => "int64",
        }
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedArchive(msg.into())
}

pub fn encode(array: &NpyArray) -> Vec<u8> {
    let shape = array.shape();
    let dims = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {dims}, }}",
        array.descr()
    );
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    header.extend(std::iter::repeat_n(' ', (ALIGN - unpadded % ALIGN) % ALIGN));
    header.push('\n');

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match array {
        NpyArray::F32 { data, .. } => data
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        NpyArray::U8 { data, .. } => out.extend_from_slice(data),
        NpyArray::I64 { data, .. } => data
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(malformed("bad NPY magic"));
    }
    if bytes[6..8] != [1, 0] {
        return Err(malformed(format!(
            "unsupported NPY version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let body_start = 10 + header_len;
    if bytes.len() < body_start {
        return Err(malformed("truncated NPY header"));
    }
    let header = std::str::from_utf8(&bytes[10..body_start])
        .map_err(|_| malformed("NPY header is not text"))?;
    let descr = quoted_value(header, "descr")?;
    match raw_value(header, "fortran_order")? {
        "False" => {}
        "True" => return Err(malformed("Fortran-ordered arrays are not accepted")),
        other => return Err(malformed(format!("bad fortran_order {other:?}"))),
    }
    let shape = parse_shape(header)?;
    let count: usize = shape.iter().product();
    let body = &bytes[body_start..];

    let take = |width: usize| -> Result<&[u8]> {
        if body.len() != count * width {
            Err(malformed(format!(
                "NPY payload has {} bytes, expected {}",
                body.len(),
                count * width
            )))
        } else {
            Ok(body)
        }
    };
    match descr {
        "<f4" => Ok(NpyArray::F32 {
            data: take(4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            shape,
        }),
        "|u1" | "<u1" => Ok(NpyArray::U8 {
            data: take(1)?.to_vec(),
            shape,
        }),
        "<i8" => Ok(NpyArray::I64 {
            data: take(8)?
                .chunks_exact(8)
                .map(|b| i64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            shape,
        }),
        d if d.starts_with('>') => Err(malformed(format!("big-endian dtype {d} is not accepted"))),
        d => Err(malformed(format!("unsupported dtype {d}"))),
    }
}

fn raw_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}':");
    let start = header
        .find(&pat)
        .ok_or_else(|| malformed(format!("NPY header lacks {key}")))?
        + pat.len();
    let rest = header[start..].trim_start();
    let end = rest.find([',', '}']).unwrap_or(rest.len());
    Ok(rest[..end].trim())
}

fn quoted_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let raw = raw_value(header, key)?;
    raw.strip_prefix('\'')
        .and_then(|r| r.strip_suffix('\''))
        .ok_or_else(|| malformed(format!("NPY {key} is not a string")))
}

fn parse_shape(header: &str) -> Result<Vec<usize>> {
    let start = header
        .find("'shape':")
        .ok_or_else(|| malformed("NPY header lacks shape"))?
        + 8;
    let rest = header[start..].trim_start();
    let inner = rest
        .strip_prefix('(')
        .and_then(|r| r.find(')').map(|end| &r[..end]))
        .ok_or_else(|| malformed("NPY shape is not a tuple"))?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| malformed(format!("bad NPY dimension {s:?}")))
        })
        .collect()
}
