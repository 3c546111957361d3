//! NPY v1.0 reader/writer for little-endian `f32` arrays in C order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8] = b"\x93NUMPY";
const ALIGN: usize = 64;

/// Serializes `t` with a header padded to a multiple of 64 bytes.
pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let shape = match t.shape() {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape}, }}");
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    header.push_str(&" ".repeat(pad));
    header.push('\n');

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses NPY bytes; `path` only labels errors.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let malformed = |reason: &str| Error::MalformedNpy {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < MAGIC.len() + 2 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let major = bytes[MAGIC.len()];
    let (len_bytes, start) = match major {
        1 => (2, MAGIC.len() + 4),
        2 | 3 => (4, MAGIC.len() + 6),
        v => return Err(malformed(&format!("unknown version {v}"))),
    };
    if bytes.len() < start {
        return Err(malformed("truncated header length"));
    }
    let lb = &bytes[MAGIC.len() + 2..start];
    let header_len = if len_bytes == 2 {
        u16::from_le_bytes([lb[0], lb[1]]) as usize
    } else {
        u32::from_le_bytes([lb[0], lb[1], lb[2], lb[3]]) as usize
    };
    let body_start = start + header_len;
    if bytes.len() < body_start {
        return Err(malformed("truncated header"));
    }
    let header = std::str::from_utf8(&bytes[start..body_start])
        .map_err(|_| malformed("header is not UTF-8"))?;

    let descr = dict_value(header, "descr").ok_or_else(|| malformed("missing descr"))?;
    let descr = descr.trim_matches(|c| c == '\'' || c == '"');
    if descr != "<f4" {
        return Err(Error::UnsupportedDtype {
            path: path.to_path_buf(),
            descr: descr.to_string(),
        });
    }
    match dict_value(header, "fortran_order") {
        Some("False") => {}
        Some("True") => return Err(malformed("Fortran-ordered arrays are not supported")),
        _ => return Err(malformed("missing fortran_order")),
    }
    let shape_src = dict_value(header, "shape").ok_or_else(|| malformed("missing shape"))?;
    let shape = parse_shape(shape_src).ok_or_else(|| malformed("unparsable shape"))?;

    let count: usize = shape.iter().product();
    let body = &bytes[body_start..];
    if body.len() != 4 * count {
        return Err(malformed(&format!(
            "expected {} data bytes, found {}",
            4 * count,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| malformed(&e.to_string()))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    from_bytes(&bytes, path)
}

/// Raw text of `key`'s value in a Python dict literal.
fn dict_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let quoted = [format!("'{key}'"), format!("\"{key}\"")];
    let pos = quoted.iter().find_map(|q| header.find(q.as_str()).map(|p| p + q.len()))?;
    let rest = header[pos..].trim_start().strip_prefix(':')?.trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')')? + 1
    } else {
        rest.find([',', '}'])?
    };
    Some(rest[..end].trim())
}

fn parse_shape(src: &str) -> Option<Vec<usize>> {
    let inner = src.strip_prefix('(')?.strip_suffix(')')?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.trim_end_matches('L').parse().ok())
        .collect()
}
