//! Slide bags, their on-disk format, and dataset directories.

mod format;
mod synthetic;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{decode_bag, encode_bag, load_bag, save_bag, BAG_HEADER_LEN, BAG_MAGIC};
pub use synthetic::{generate_synthetic, SyntheticOutput, SyntheticSpec};

/// One whole slide: `n` patch embeddings of width `d`, each at a distinct
/// integer grid cell `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideBag {
    pub slide_id: String,
    pub embeddings: Array2<f64>,
    pub coords: Vec<[i32; 2]>,
    pub label: Option<u32>,
}

impl SlideBag {
    pub fn new(
        slide_id: impl Into<String>,
        embeddings: Array2<f64>,
        coords: Vec<[i32; 2]>,
        label: Option<u32>,
    ) -> Result<Self> {
        let bag = Self {
            slide_id: slide_id.into(),
            embeddings,
            coords,
            label,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidBag {
            slide_id: self.slide_id.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_slide_id(&self.slide_id)?;
        if self.is_empty() {
            return Err(self.invalid("bag has no tokens"));
        }
        if self.coords.len() != self.len() {
            return Err(self.invalid(format!(
                "{} embedding rows but {} coordinate rows",
                self.len(),
                self.coords.len()
            )));
        }
        if let Some(pos) = self.embeddings.iter().position(|v| !v.is_finite()) {
            return Err(self.invalid(format!(
                "non-finite embedding value at row {} col {}",
                pos / self.dim(),
                pos % self.dim()
            )));
        }
        let mut seen = HashSet::with_capacity(self.coords.len());
        for (i, c) in self.coords.iter().enumerate() {
            if !seen.insert(*c) {
                return Err(self.invalid(format!(
                    "duplicate coordinate ({}, {}) at row {i}",
                    c[0], c[1]
                )));
            }
        }
        Ok(())
    }

    /// Coordinates as a `k × 2` real matrix for the given rows.
    pub fn coords_matrix(&self, rows: &[usize]) -> Array2<f64> {
        Array2::from_shape_fn((rows.len(), 2), |(i, j)| self.coords[rows[i]][j] as f64)
    }

    /// Embedding rows selected by `rows`, in that order.
    pub fn select_embeddings(&self, rows: &[usize]) -> Array2<f64> {
        self.embeddings.select(ndarray::Axis(0), rows)
    }

    /// Unweighted mean of all embedding rows.
    pub fn mean_pool(&self) -> ndarray::Array1<f64> {
        self.embeddings
            .mean_axis(ndarray::Axis(0))
            .expect("bag is nonempty")
    }
}

/// Slide ids double as file stems, so they are restricted to a portable set.
pub fn validate_slide_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "manifest"
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidBag {
            slide_id: id.to_string(),
            reason: "slide ids must be nonempty and use only [A-Za-z0-9._-]".into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub bags: Vec<SlideBag>,
    pub class_names: Option<Vec<String>>,
    pub split: SplitTag,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    slide_ids: Vec<String>,
    class_names: Option<Vec<String>>,
    split: SplitTag,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BAG_EXTENSION: &str = "bag";

impl Dataset {
    pub fn new(bags: Vec<SlideBag>, class_names: Option<Vec<String>>, split: SplitTag) -> Result<Self> {
        let ds = Self {
            bags,
            class_names,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    /// Shared embedding width, if the dataset is nonempty.
    pub fn dim(&self) -> Option<usize> {
        self.bags.first().map(SlideBag::dim)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let d = self.dim();
        for bag in &self.bags {
            bag.validate()?;
            if !ids.insert(bag.slide_id.as_str()) {
                return Err(Error::InvalidDataset(format!(
                    "duplicate slide_id `{}`",
                    bag.slide_id
                )));
            }
            if Some(bag.dim()) != d {
                return Err(Error::InvalidDataset(format!(
                    "bag `{}` has d={} but dataset d={}",
                    bag.slide_id,
                    bag.dim(),
                    d.unwrap_or(0)
                )));
            }
        }
        Ok(())
    }

    /// Number of classes implied by `class_names` or the largest label.
    pub fn num_classes(&self) -> usize {
        let from_labels = self
            .bags
            .iter()
            .filter_map(|b| b.label)
            .max()
            .map_or(0, |m| m as usize + 1);
        self.class_names
            .as_ref()
            .map_or(from_labels, |c| c.len().max(from_labels))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for bag in &self.bags {
            save_bag(bag, &dir.join(format!("{}.{BAG_EXTENSION}", bag.slide_id)))?;
        }
        let manifest = Manifest {
            slide_ids: self.bags.iter().map(|b| b.slide_id.clone()).collect(),
            class_names: self.class_names.clone(),
            split: self.split,
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidDataset(format!("{}: {e}", path.display())))?;
        let bags = manifest
            .slide_ids
            .iter()
            .map(|id| {
                validate_slide_id(id)?;
                let bag = load_bag(&dir.join(format!("{id}.{BAG_EXTENSION}")))?;
                if bag.slide_id != *id {
                    return Err(Error::InvalidDataset(format!(
                        "manifest lists `{id}` but its sidecar names `{}`",
                        bag.slide_id
                    )));
                }
                Ok(bag)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bags, manifest.class_names, manifest.split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_duplicate_coords() {
        let err = SlideBag::new("a", array![[0.0, 1.0], [2.0, 3.0]], vec![[1, 1], [1, 1]], None)
            .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn rejects_nan() {
        assert!(SlideBag::new("a", array![[f64::NAN, 1.0]], vec![[0, 0]], None).is_err());
    }

    #[test]
    fn rejects_row_mismatch_and_empty() {
        assert!(SlideBag::new("a", array![[0.0], [1.0]], vec![[0, 0]], None).is_err());
        assert!(SlideBag::new("a", Array2::zeros((0, 3)), vec![], None).is_err());
    }

    #[test]
    fn dataset_rejects_mixed_dims_and_duplicate_ids() {
        let a = SlideBag::new("a", array![[0.0, 1.0]], vec![[0, 0]], None).unwrap();
        let b = SlideBag::new("b", array![[0.0]], vec![[0, 0]], None).unwrap();
        assert!(Dataset::new(vec![a.clone(), b], None, SplitTag::Train).is_err());
        assert!(Dataset::new(vec![a.clone(), a], None, SplitTag::Train).is_err());
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = SlideBag::new("a", array![[0.5, 1.0]], vec![[0, 0]], Some(1)).unwrap();
        let b = SlideBag::new("b", array![[0.25, -1.0], [3.0, 4.0]], vec![[0, 0], [0, 1]], Some(0))
            .unwrap();
        let ds = Dataset::new(vec![a, b], Some(vec!["x".into(), "y".into()]), SplitTag::Val).unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }
}
