use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::bagstore::{decode_bag, encode_bag};
use crate::bagstore::{Dataset, SlideBag};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::trainer::Network;
use crate::transforms::TokenView;

/// One feature row per slide.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub slide_ids: Vec<String>,
    pub features: Array2<f64>,
    pub labels: Vec<Option<u32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureSidecar {
    slide_ids: Vec<String>,
    labels: Vec<Option<u32>>,
}

impl FeatureTable {
    pub fn new(slide_ids: Vec<String>, features: Array2<f64>, labels: Vec<Option<u32>>) -> Result<Self> {
        if slide_ids.len() != features.nrows() || labels.len() != features.nrows() {
            return Err(Error::Eval(format!(
                "{} ids, {} labels, {} feature rows",
                slide_ids.len(),
                labels.len(),
                features.nrows()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Eval("non-finite feature value".into()));
        }
        Ok(Self {
            slide_ids,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn require_labels(&self) -> Result<Vec<u32>> {
        self.labels
            .iter()
            .zip(&self.slide_ids)
            .map(|(l, id)| l.ok_or_else(|| Error::Eval(format!("slide `{id}` has no label"))))
            .collect()
    }

    /// Writes the matrix in the bag binary format (row `i` at coordinate
    /// `(i, 0)`, stored as 32-bit reals) with ids and labels in a
    /// `.json` sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let coords = (0..self.len()).map(|i| [i as i32, 0]).collect();
        let bag = SlideBag::new("features", self.features.clone(), coords, None)?;
        fs::write(path, encode_bag(&bag)).map_err(|e| Error::io(path, e))?;
        let side = FeatureSidecar {
            slide_ids: self.slide_ids.clone(),
            labels: self.labels.clone(),
        };
        let side_path = path.with_extension("json");
        fs::write(&side_path, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&side_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (features, _) = decode_bag(&bytes, path)?;
        let side_path = path.with_extension("json");
        let text = fs::read(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let side: FeatureSidecar = serde_json::from_slice(&text)?;
        Self::new(side.slide_ids, features, side.labels)
    }
}

/// Slide representations from the frozen encoder, each bag encoded whole
/// with no transformation.
pub fn extract_features(ds: &Dataset, net: &Network, exec: Execution) -> Result<FeatureTable> {
    if let Some(d) = ds.dim() {
        if d != net.encoder.input_dim() {
            return Err(Error::Shape(format!(
                "dataset has d={d} but the checkpoint expects {}",
                net.encoder.input_dim()
            )));
        }
    }
    let rows = exec
        .map(&ds.bags, |bag| net.encode_view(&TokenView::full(bag), bag).map(|t| t.h))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let dm = net.encoder.d_model();
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let features = if views.is_empty() {
        Array2::zeros((0, dm))
    } else {
        ndarray::stack(Axis(0), &views).expect("equal widths")
    };
    FeatureTable::new(
        ds.bags.iter().map(|b| b.slide_id.clone()).collect(),
        features,
        ds.bags.iter().map(|b| b.label).collect(),
    )
}

/// Mean of the token embeddings of each bag: the non-learned baseline.
pub fn mean_pool_features(ds: &Dataset) -> Result<FeatureTable> {
    let d = ds.dim().unwrap_or(0);
    let mut features = Array2::zeros((ds.len(), d));
    for (mut row, bag) in features.rows_mut().into_iter().zip(&ds.bags) {
        row.assign(&bag.mean_pool());
    }
    FeatureTable::new(
        ds.bags.iter().map(|b| b.slide_id.clone()).collect(),
        features,
        ds.bags.iter().map(|b| b.label).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagstore::SplitTag;
    use ndarray::array;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bag");
        let t = FeatureTable::new(
            vec!["a".into(), "b".into()],
            array![[0.5, -1.0, 2.0], [0.25, 0.0, 8.0]],
            vec![Some(1), None],
        )
        .unwrap();
        t.save(&path).unwrap();
        assert_eq!(FeatureTable::load(&path).unwrap(), t);
    }

    #[test]
    fn mean_pool_rows() {
        let bag = SlideBag::new("x", array![[1.0, 2.0], [3.0, 4.0]], vec![[0, 0], [0, 1]], Some(0)).unwrap();
        let ds = Dataset::new(vec![bag], None, SplitTag::Val).unwrap();
        let t = mean_pool_features(&ds).unwrap();
        assert_eq!(t.features, array![[2.0, 3.0]]);
        assert_eq!(t.labels, vec![Some(0)]);
    }
}
