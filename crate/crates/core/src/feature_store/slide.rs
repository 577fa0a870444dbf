//! `.h2t` slide feature files.
//!
//! Layout (all little-endian):
//!
//! | offset | size            | field                                   |
//! |--------|-----------------|-----------------------------------------|
//! | 0      | 4               | magic `H2T1`                            |
//! | 4      | 4               | version (`u32`, currently 1)            |
//! | 8      | 4               | num_patches (`u32`)                     |
//! | 12     | 4               | feature_dim (`u32`)                     |
//! | 16     | 8 · n           | positions, `(grid_x, grid_y)` as `i32`  |
//! | …      | 4 · n · d       | features, row-major `f32`               |

use std::collections::HashSet;
use std::path::Path;

use super::bytes::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::error::{H2tError, Result};

pub const SLIDE_MAGIC: &[u8; 4] = b"H2T1";
pub const SLIDE_VERSION: u32 = 1;
pub const SLIDE_HEADER_LEN: usize = 16;

/// One patch: its grid position in stride units and its feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub grid_x: u32,
    pub grid_y: u32,
    pub feature: Vec<f32>,
}

impl PatchRecord {
    pub fn new(grid_x: u32, grid_y: u32, feature: Vec<f32>) -> Self {
        Self {
            grid_x,
            grid_y,
            feature,
        }
    }

    pub fn feature_f64(&self) -> Vec<f64> {
        self.feature.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Checks the single-slide invariants: non-empty, uniform dimension, unique positions.
/// Returns the feature dimension.
pub fn validate_records(records: &[PatchRecord]) -> Result<usize> {
    let first = records
        .first()
        .ok_or_else(|| H2tError::invalid("empty slide"))?;
    let dim = first.feature.len();
    if dim == 0 {
        return Err(H2tError::invalid("feature dimension must be positive"));
    }
    let mut seen = HashSet::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if r.feature.len() != dim {
            return Err(H2tError::invalid(format!(
                "inconsistent dimensions: patch {i} has {} features, expected {dim}",
                r.feature.len()
            )));
        }
        if r.grid_x > i32::MAX as u32 || r.grid_y > i32::MAX as u32 {
            return Err(H2tError::invalid(format!(
                "patch {i}: grid position ({}, {}) exceeds the signed 32-bit range",
                r.grid_x, r.grid_y
            )));
        }
        if !seen.insert((r.grid_x, r.grid_y)) {
            return Err(H2tError::invalid(format!(
                "duplicate position ({}, {})",
                r.grid_x, r.grid_y
            )));
        }
    }
    Ok(dim)
}

pub fn encode_slide(records: &[PatchRecord]) -> Result<Vec<u8>> {
    let dim = validate_records(records)?;
    let n = records.len();
    let mut w = ByteWriter::with_capacity(SLIDE_HEADER_LEN + n * 8 + n * dim * 4);
    w.bytes(SLIDE_MAGIC);
    w.u32(SLIDE_VERSION);
    w.u32(n as u32);
    w.u32(dim as u32);
    for r in records {
        w.i32(r.grid_x as i32);
        w.i32(r.grid_y as i32);
    }
    for r in records {
        for &v in &r.feature {
            w.f32(v);
        }
    }
    Ok(w.into_inner())
}

pub fn decode_slide(bytes: &[u8]) -> Result<Vec<PatchRecord>> {
    let (n, dim, mut r) = decode_header(bytes)?;
    r.section("features section");
    let body = n
        .checked_mul(8 + 4 * dim)
        .ok_or_else(|| H2tError::format("header sizes overflow"))?;
    r.require(body)?;
    let mut positions = Vec::with_capacity(n);
    for i in 0..n {
        let x = r.i32()?;
        let y = r.i32()?;
        if x < 0 || y < 0 {
            return Err(H2tError::format(format!(
                "patch {i} has negative grid position ({x}, {y})"
            )));
        }
        positions.push((x as u32, y as u32));
    }
    let mut records = Vec::with_capacity(n);
    for (x, y) in positions {
        records.push(PatchRecord::new(x, y, r.f32_vec(dim)?));
    }
    r.finish()?;
    validate_records(&records)?;
    Ok(records)
}

/// Parses and validates the fixed header. Returns `(num_patches, feature_dim, reader)`.
fn decode_header(bytes: &[u8]) -> Result<(usize, usize, ByteReader<'_>)> {
    let mut r = ByteReader::new(bytes);
    r.magic(SLIDE_MAGIC)?;
    let version = r.u32()?;
    if version != SLIDE_VERSION {
        return Err(H2tError::format(format!(
            "version mismatch: expected {SLIDE_VERSION}, found {version}"
        )));
    }
    let n = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if n == 0 {
        return Err(H2tError::format("empty slide"));
    }
    if dim == 0 {
        return Err(H2tError::format("feature dimension is zero"));
    }
    Ok((n, dim, r))
}

pub fn write_slide_features(records: &[PatchRecord], path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_slide(records)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_slide_features(path: impl AsRef<Path>) -> Result<Vec<PatchRecord>> {
    let path = path.as_ref();
    decode_slide(&read_file(path)?).map_err(|e| e.context(path.display()))
}

/// Reads only the header: `(num_patches, feature_dim)`.
pub fn read_slide_header(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    use std::io::Read;
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| H2tError::io(path, e))?;
    let mut head = [0u8; SLIDE_HEADER_LEN];
    let got = f.read(&mut head).map_err(|e| H2tError::io(path, e))?;
    let (n, d, _) = decode_header(&head[..got]).map_err(|e| e.context(path.display()))?;
    Ok((n, d))
}
