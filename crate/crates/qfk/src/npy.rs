//! NPY v1.0 reader and writer for little-endian `f32` arrays.

use std::path::Path;

use qfk_core::tensor::{Shape, TensorF32};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum NpyError {
    #[error("malformed NPY header: {0}")]
    Header(String),
    #[error("NPY data section has {got} bytes, expected {expected}")]
    DataLength { got: usize, expected: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] qfk_core::Error),
}

fn shape_tuple(dims: &[usize]) -> String {
    match dims {
        [d] => format!("({d},)"),
        _ => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    }
}

/// Serializes a C-ordered `<f4` array.
pub fn encode(dims: &[usize], data: &[f32]) -> Vec<u8> {
    assert_eq!(
        dims.iter().product::<usize>(),
        data.len(),
        "shape does not match data"
    );
    let dict = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': {}, }}",
        shape_tuple(dims)
    );
    // magic + version + u16 length, then the dict padded with spaces and a newline
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let header_len = dict.len() + 1 + (ALIGN - unpadded % ALIGN) % ALIGN;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header_len + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.resize(out.len() + header_len - dict.len() - 1, b' ');
    out.push(b'\n');
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn header_err(msg: impl Into<String>) -> NpyError {
    NpyError::Header(msg.into())
}

fn dict_value<'a>(dict: &'a str, key: &str) -> Result<&'a str, NpyError> {
    let pat = format!("'{key}':");
    let start = dict
        .find(&pat)
        .ok_or_else(|| header_err(format!("missing key {key}")))?
        + pat.len();
    Ok(dict[start..].trim_start())
}

fn parse_shape(rest: &str) -> Result<Vec<usize>, NpyError> {
    let rest = rest
        .strip_prefix('(')
        .ok_or_else(|| header_err("shape is not a tuple"))?;
    let end = rest
        .find(')')
        .ok_or_else(|| header_err("unterminated shape"))?;
    rest[..end]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| header_err(format!("bad dimension {s:?}")))
        })
        .collect()
}

/// Parses an NPY v1.0 `<f4` C-ordered array.
pub fn decode(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>), NpyError> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(header_err("bad magic"));
    }
    if bytes[6..8] != [1, 0] {
        return Err(header_err(format!(
            "unsupported version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = bytes
        .get(10..10 + hlen)
        .ok_or_else(|| header_err("truncated header"))?;
    let dict = std::str::from_utf8(header).map_err(|_| header_err("header is not text"))?;
    let dict = dict.trim_end();
    if !(dict.starts_with('{') && dict.ends_with('}')) {
        return Err(header_err("header is not a dict"));
    }
    let descr = dict_value(dict, "descr")?;
    if !descr.starts_with("'<f4'") {
        return Err(header_err("only '<f4' arrays are supported"));
    }
    if !dict_value(dict, "fortran_order")?.starts_with("False") {
        return Err(header_err("only C-ordered arrays are supported"));
    }
    let dims = parse_shape(dict_value(dict, "shape")?)?;
    let data = &bytes[10 + hlen..];
    let expected = 4 * dims.iter().product::<usize>();
    if data.len() != expected {
        return Err(NpyError::DataLength {
            got: data.len(),
            expected,
        });
    }
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, values))
}

/// Writes a (2, H, W) or (H, W) mask.
pub fn save_mask_npy(mask: &TensorF32, path: &Path) -> Result<(), NpyError> {
    let dims = mask.shape().dims();
    if !matches!(dims.len(), 2 | 3) {
        return Err(header_err(format!(
            "mask shape {} is not (2,H,W) or (H,W)",
            mask.shape()
        )));
    }
    std::fs::write(path, encode(dims, mask.data()))?;
    Ok(())
}

pub fn load_mask_npy(path: &Path) -> Result<TensorF32, NpyError> {
    let (dims, data) = decode(&std::fs::read(path)?)?;
    Ok(TensorF32::new(Shape::new(dims)?, data)?)
}
