use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::Protocol;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    /// Recall per class; `None` for classes absent from the labels.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub mca: f64,
    pub macro_f1: f64,
    pub auc: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub num_samples: usize,
}

/// Rank-statistic AUC: the fraction of positive/negative pairs ordered
/// correctly by `scores`, ties counted as one half. `None` without both
/// a positive and a negative.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Midranks over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            if positive[t] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Binary AUC on the positive-class column for two classes; the mean of
/// one-vs-rest AUCs over classes that have both positives and negatives
/// otherwise.
pub fn macro_auc(scores: ArrayView2<f64>, labels: &[u32]) -> Option<f64> {
    let c = scores.ncols();
    if c == 2 {
        let col: Vec<f64> = scores.column(1).to_vec();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return binary_auc(&col, &pos);
    }
    let aucs: Vec<f64> = (0..c)
        .filter_map(|k| {
            let col: Vec<f64> = scores.column(k).to_vec();
            let pos: Vec<bool> = labels.iter().map(|&l| l as usize == k).collect();
            binary_auc(&col, &pos)
        })
        .collect();
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Classification metrics. MCA and macro-F1 average over the classes that
/// occur in `labels`; a class that is never predicted scores F1 = 0.
pub fn compute_metrics(
    predictions: &[u32],
    scores: ArrayView2<f64>,
    labels: &[u32],
    num_classes: usize,
    protocol: Protocol,
) -> Result<EvalReport> {
    let n = labels.len();
    if predictions.len() != n || scores.nrows() != n {
        return Err(Error::Eval(format!(
            "{} predictions, {} score rows, {} labels",
            predictions.len(),
            scores.nrows(),
            n
        )));
    }
    if n == 0 {
        return Err(Error::Eval("no samples to score".into()));
    }
    if let Some(&bad) = labels.iter().chain(predictions).find(|&&l| l as usize >= num_classes) {
        return Err(Error::Eval(format!("class id {bad} outside 0..{num_classes}")));
    }
    if scores.ncols() != num_classes {
        return Err(Error::Eval(format!(
            "score rows have {} columns for {num_classes} classes",
            scores.ncols()
        )));
    }
    let mut confusion = Array2::<usize>::zeros((num_classes, num_classes));
    for (&t, &p) in labels.iter().zip(predictions) {
        confusion[[t as usize, p as usize]] += 1;
    }
    let mut per_class = Vec::with_capacity(num_classes);
    let mut f1s = Vec::new();
    for c in 0..num_classes {
        let support: usize = confusion.row(c).sum();
        if support == 0 {
            log::warn!("class {c} has no samples; excluded from MCA and F1");
            per_class.push(None);
            continue;
        }
        let tp = confusion[[c, c]] as f64;
        let predicted: usize = confusion.column(c).sum();
        let recall = tp / support as f64;
        per_class.push(Some(recall));
        let f1 = if predicted == 0 || tp == 0.0 {
            0.0
        } else {
            let precision = tp / predicted as f64;
            2.0 * precision * recall / (precision + recall)
        };
        f1s.push(f1);
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mca = present.iter().sum::<f64>() / present.len() as f64;
    let macro_f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
    let auc = macro_auc(scores, labels).unwrap_or(f64::NAN);
    if auc.is_nan() {
        log::warn!("AUC undefined: labels contain a single class");
    }
    Ok(EvalReport {
        protocol,
        per_class_accuracy: per_class,
        mca,
        macro_f1,
        auc,
        confusion: confusion.rows().into_iter().map(|r| r.to_vec()).collect(),
        num_samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn auc_pair_count() {
        let auc = binary_auc(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn auc_ties_count_half() {
        assert_eq!(binary_auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(binary_auc(&[0.5, 0.5], &[true, true]), None);
    }

    #[test]
    fn mca_half_and_full() {
        let scores = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let r = compute_metrics(&[0, 0, 1, 0], scores.view(), &[0, 0, 1, 1], 2, Protocol::Knn).unwrap();
        assert_eq!(r.mca, 0.75);
        assert_eq!(r.per_class_accuracy, vec![Some(1.0), Some(0.5)]);
        assert_eq!(r.confusion, vec![vec![2, 0], vec![1, 1]]);
    }

    #[test]
    fn perfect_predictions() {
        let scores = array![[0.9, 0.1, 0.0], [0.1, 0.8, 0.1], [0.0, 0.2, 0.8]];
        let r = compute_metrics(&[0, 1, 2], scores.view(), &[0, 1, 2], 3, Protocol::Linear).unwrap();
        assert_eq!((r.mca, r.macro_f1, r.auc), (1.0, 1.0, 1.0));
    }

    #[test]
    fn missing_class_excluded() {
        let scores = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let r = compute_metrics(&[0, 0], scores.view(), &[0, 1], 3, Protocol::Knn).unwrap();
        assert_eq!(r.per_class_accuracy, vec![Some(1.0), Some(0.0), None]);
        assert_eq!(r.mca, 0.5);
        // Class 1 never predicted: F1 0. Class 0: precision 1/2, recall 1.
        assert!((r.macro_f1 - (2.0 / 3.0) / 2.0).abs() < 1e-15);
    }
}
