//! IDX container (the MNIST file format): big-endian header
//! `0x00 0x00 <type> <ndim>`, `ndim` u32 dimensions, then raw values.
//! Only unsigned-byte payloads (type 0x08) are supported.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::kernel::Tensor;

const UBYTE: u8 = 0x08;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "IDX",
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes).map_err(|reason| malformed(path, reason))
}

fn parse_idx(bytes: &[u8]) -> std::result::Result<IdxArray, String> {
    if bytes.len() < 4 {
        return Err("file shorter than the 4-byte magic number".into());
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format!("bad magic {:02x}{:02x}{:02x}{:02x}", bytes[0], bytes[1], bytes[2], bytes[3]));
    }
    if bytes[2] != UBYTE {
        return Err(format!("unsupported element type 0x{:02x}", bytes[2]));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err("zero dimensions".into());
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err("truncated dimension header".into());
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("dimension product overflows")?;
    let payload = &bytes[header..];
    if payload.len() != count {
        return Err(format!("expected {count} data bytes, found {}", payload.len()));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    let mut out = vec![0, 0, UBYTE, array.dims.len() as u8];
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads an image file (`n x ...`) and a label file (`n`) into a dataset
/// with features scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if img.dims.len() < 2 {
        return Err(malformed(images, "image file needs at least two dimensions"));
    }
    if lab.dims.len() != 1 {
        return Err(malformed(labels, "label file must be one-dimensional"));
    }
    if img.dims[0] != lab.dims[0] {
        return Err(malformed(
            labels,
            format!("{} labels for {} images", lab.dims[0], img.dims[0]),
        ));
    }
    let n = img.dims[0];
    if n == 0 {
        return Err(malformed(images, "no samples"));
    }
    let d: usize = img.dims[1..].iter().product();
    let features = Tensor::matrix(n, d, img.data.iter().map(|&b| b as f64 / 255.0).collect())?;
    let labels_vec: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    let num_classes = labels_vec.iter().max().map_or(1, |m| m + 1);
    let name = images
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(features, labels_vec, num_classes, name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_fixture() {
        // two 2x2 images
        let bytes = [
            0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 51, 102, 1, 2, 3, 4,
        ];
        let arr = parse_idx(&bytes).unwrap();
        assert_eq!(arr.dims, vec![2, 2, 2]);
        assert_eq!(arr.data, vec![0, 255, 51, 102, 1, 2, 3, 4]);
    }

    #[test]
    fn malformed_headers() {
        assert!(parse_idx(&[]).is_err());
        assert!(parse_idx(&[1, 0, 8, 1, 0, 0, 0, 0]).is_err());
        assert!(parse_idx(&[0, 0, 0x0d, 1, 0, 0, 0, 0]).is_err());
        assert!(parse_idx(&[0, 0, 8, 2, 0, 0, 0, 1]).is_err());
        assert!(parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 1, 2]).is_err());
        assert!(parse_idx(&[0, 0, 8, 1, 0, 0, 0, 1, 1, 2]).is_err());
    }
}
