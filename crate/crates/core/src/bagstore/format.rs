//! Bag binary format.
//!
//! ```text
//! offset  size       content
//! 0       16         b"SPTBAG01" followed by 8 zero bytes
//! 16      4          n (u32, little-endian)
//! 20      4          d (u32, little-endian)
//! 24      4·n·d      embeddings, f32 little-endian, row-major
//! ..      8·n        coords, i32 little-endian, (row, col) per token
//! ```
//!
//! Slide id and label live in a JSON sidecar `<slide_id>.json` next to the
//! bag file.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::SlideBag;
use crate::error::{Error, Result};

pub const BAG_MAGIC: &[u8; 8] = b"SPTBAG01";
pub const BAG_HEADER_LEN: usize = 24;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    slide_id: String,
    n: usize,
    d: usize,
    label: Option<u32>,
}

fn sidecar_path(bag_path: &Path, slide_id: &str) -> PathBuf {
    bag_path.with_file_name(format!("{slide_id}.json"))
}

/// Serializes the binary payload. Embeddings are narrowed to f32.
pub fn encode_bag(bag: &SlideBag) -> Vec<u8> {
    let (n, d) = bag.embeddings.dim();
    let mut out = Vec::with_capacity(BAG_HEADER_LEN + 4 * n * d + 8 * n);
    out.extend_from_slice(BAG_MAGIC);
    out.extend_from_slice(&[0u8; 8]);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in bag.embeddings.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for c in &bag.coords {
        out.extend_from_slice(&c[0].to_le_bytes());
        out.extend_from_slice(&c[1].to_le_bytes());
    }
    out
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4-byte slice"))
}

/// Parses a binary payload into `(embeddings, coords)`. `path` is only used
/// in error messages.
pub fn decode_bag(bytes: &[u8], path: &Path) -> Result<(Array2<f64>, Vec<[i32; 2]>)> {
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < BAG_HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: BAG_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..8] != BAG_MAGIC || bytes[8..16].iter().any(|&b| b != 0) {
        return Err(malformed("bad magic".into()));
    }
    let n = le_u32(&bytes[16..20]) as usize;
    let d = le_u32(&bytes[20..24]) as usize;
    if n == 0 || d == 0 {
        return Err(malformed(format!("header declares n={n}, d={d}")));
    }
    let row_bytes = 4 * d as u64 + 8;
    let expected = BAG_HEADER_LEN as u64 + n as u64 * row_bytes;
    let found = bytes.len() as u64;
    let payload = found - BAG_HEADER_LEN as u64;
    if found != expected {
        // A payload that is a whole number of rows for a different n means the
        // header disagrees with the data; anything else is a cut-off file.
        if found > expected || payload.is_multiple_of(row_bytes) {
            return Err(malformed(format!(
                "header declares n={n}, d={d} ({expected} bytes) but file has {found} bytes"
            )));
        }
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    let emb_end = BAG_HEADER_LEN + 4 * n * d;
    let values: Vec<f64> = bytes[BAG_HEADER_LEN..emb_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let coords = bytes[emb_end..]
        .chunks_exact(8)
        .map(|c| {
            [
                i32::from_le_bytes(c[..4].try_into().expect("4 bytes")),
                i32::from_le_bytes(c[4..].try_into().expect("4 bytes")),
            ]
        })
        .collect();
    let embeddings = Array2::from_shape_vec((n, d), values).expect("length checked above");
    Ok((embeddings, coords))
}

/// Writes `bag` to `path` plus its sidecar. The bag is validated first and
/// nothing is written if it is invalid.
pub fn save_bag(bag: &SlideBag, path: &Path) -> Result<()> {
    bag.validate()?;
    let sidecar = Sidecar {
        slide_id: bag.slide_id.clone(),
        n: bag.len(),
        d: bag.dim(),
        label: bag.label,
    };
    fs::write(path, encode_bag(bag)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path, &bag.slide_id);
    fs::write(&side, serde_json::to_string(&sidecar)?).map_err(|e| Error::io(side, e))
}

/// Reads a bag and validates every invariant. Without a sidecar the slide id
/// is the file stem and the label is absent.
pub fn load_bag(path: &Path) -> Result<SlideBag> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (embeddings, coords) = decode_bag(&bytes, path)?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    let side = sidecar_path(path, &stem);
    let (slide_id, label) = if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: side.clone(),
            reason: e.to_string(),
        })?;
        if sc.n != embeddings.nrows() || sc.d != embeddings.ncols() {
            return Err(Error::Malformed {
                path: side,
                reason: format!(
                    "sidecar declares n={}, d={} but payload has n={}, d={}",
                    sc.n,
                    sc.d,
                    embeddings.nrows(),
                    embeddings.ncols()
                ),
            });
        }
        (sc.slide_id, sc.label)
    } else {
        (stem, None)
    };
    SlideBag::new(slide_id, embeddings, coords, label)
}
