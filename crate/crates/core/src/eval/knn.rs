use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::FeatureTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// `1 − cos(a, b)`; zero vectors are at distance 1 from everything.
    Cosine,
    Euclidean,
}

impl Distance {
    pub fn between(self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        match self {
            Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Distance::Cosine => {
                let na = a.dot(&a).sqrt();
                let nb = b.dot(&b).sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - a.dot(&b) / (na * nb)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnOutput {
    pub predictions: Vec<u32>,
    /// Vote fraction per class, one row per query.
    pub scores: Array2<f64>,
}

/// Majority vote among the `k` nearest training rows. Equal distances are
/// ordered by training row index. A vote tie goes to the tied class with
/// the smallest summed neighbour distance, then to the lowest class id.
pub fn knn_predict(
    train: &FeatureTable,
    query: &FeatureTable,
    k: usize,
    distance: Distance,
    num_classes: usize,
) -> Result<KnnOutput> {
    if train.is_empty() {
        return Err(Error::Eval("kNN needs a nonempty training table".into()));
    }
    if k == 0 || k > train.len() {
        return Err(Error::Eval(format!("k={k} with {} training rows", train.len())));
    }
    if train.dim() != query.dim() {
        return Err(Error::Shape(format!(
            "train width {} vs query width {}",
            train.dim(),
            query.dim()
        )));
    }
    let labels = train.require_labels()?;
    let classes = num_classes.max(labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0));

    let mut predictions = Vec::with_capacity(query.len());
    let mut scores = Array2::zeros((query.len(), classes));
    for q in 0..query.len() {
        let mut dists: Vec<(f64, usize)> = (0..train.len())
            .map(|i| (distance.between(query.row(q), train.row(i)), i))
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; classes];
        let mut summed = vec![0.0; classes];
        for &(d, i) in &dists[..k] {
            votes[labels[i] as usize] += 1;
            summed[labels[i] as usize] += d;
        }
        let best = (0..classes)
            .max_by(|&a, &b| {
                votes[a]
                    .cmp(&votes[b])
                    .then(summed[b].total_cmp(&summed[a]))
                    .then(b.cmp(&a))
            })
            .expect("at least one class");
        predictions.push(best as u32);
        for c in 0..classes {
            scores[[q, c]] = votes[c] as f64 / k as f64;
        }
    }
    Ok(KnnOutput { predictions, scores })
}
