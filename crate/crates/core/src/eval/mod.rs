//! Frozen-encoder evaluation: feature extraction, kNN and linear-probe
//! classification, classification metrics, and CLS-attention heatmaps.

mod features;
mod heatmap;
mod knn;
mod metrics;
mod probe;

pub use features::{extract_features, mean_pool_features, FeatureTable};
pub use heatmap::{attention_heatmap, HeadSelect, HeatCell, Heatmap, LayerSelect};
pub use knn::{knn_predict, Distance, KnnOutput};
pub use metrics::{binary_auc, compute_metrics, macro_auc, EvalReport};
pub use probe::{fit_linear_probe, fit_linear_probe_from, LinearProbe, ProbeConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Knn,
    Linear,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn" => Ok(Protocol::Knn),
            "linear" => Ok(Protocol::Linear),
            other => Err(Error::config("eval.protocol", format!("unknown protocol `{other}`"))),
        }
    }
}

/// `[eval]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub k: usize,
    pub distance: Distance,
    pub probe_l2: f64,
    pub probe_max_iter: usize,
    pub probe_tol: f64,
    pub heatmap_layer: LayerSelect,
    pub heatmap_head: HeadSelect,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let probe = ProbeConfig::default();
        Self {
            protocol: Protocol::Knn,
            k: 5,
            distance: Distance::Cosine,
            probe_l2: probe.l2,
            probe_max_iter: probe.max_iter,
            probe_tol: probe.tol,
            heatmap_layer: LayerSelect::Last,
            heatmap_head: HeadSelect::Mean,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("eval.k", "must be at least 1"));
        }
        if !(self.probe_l2 >= 0.0 && self.probe_l2.is_finite()) {
            return Err(Error::config("eval.probe_l2", "must be >= 0"));
        }
        if self.probe_max_iter == 0 {
            return Err(Error::config("eval.probe_max_iter", "must be at least 1"));
        }
        if !(self.probe_tol > 0.0) {
            return Err(Error::config("eval.probe_tol", "must be positive"));
        }
        Ok(())
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            l2: self.probe_l2,
            max_iter: self.probe_max_iter,
            tol: self.probe_tol,
        }
    }
}

/// Classifies `query` from `train` under `cfg.protocol` and scores the result.
pub fn evaluate(train: &FeatureTable, query: &FeatureTable, num_classes: usize, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let truth = query.require_labels()?;
    let (pred, scores) = match cfg.protocol {
        Protocol::Knn => {
            let out = knn_predict(train, query, cfg.k, cfg.distance, num_classes)?;
            (out.predictions, out.scores)
        }
        Protocol::Linear => {
            let probe = fit_linear_probe(train, num_classes, &cfg.probe())?;
            let scores = probe.predict_proba(query.features.view());
            (probe.predict(query.features.view()), scores)
        }
    };
    compute_metrics(&pred, scores.view(), &truth, num_classes, cfg.protocol)
}
