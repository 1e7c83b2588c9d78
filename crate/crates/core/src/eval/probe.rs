use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::FeatureTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// L2 penalty `(λ/2)·‖W‖²` on the weights (not the bias).
    pub l2: f64,
    pub max_iter: usize,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            max_iter: 5000,
            tol: 1e-6,
        }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

impl LinearProbe {
    fn standardize(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.scale
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Array2<f64> {
        softmax(self.standardize(x).dot(&self.weight) + &self.bias)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<u32> {
        self.predict_proba(x)
            .rows()
            .into_iter()
            .map(|r| {
                (0..r.len())
                    .max_by(|&a, &b| r[a].total_cmp(&r[b]).then(b.cmp(&a)))
                    .expect("nonempty row") as u32
            })
            .collect()
    }
}

fn softmax(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    logits
}

struct Problem {
    x: Array2<f64>,
    y: Array2<f64>,
    l2: f64,
}

impl Problem {
    fn loss_grad(&self, w: &Array2<f64>, b: &Array1<f64>) -> (f64, Array2<f64>, Array1<f64>) {
        let n = self.x.nrows() as f64;
        let logits = self.x.dot(w) + b;
        let mut ce = 0.0;
        for (row, yrow) in logits.rows().into_iter().zip(self.y.rows()) {
            let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = m + row.mapv(|v| (v - m).exp()).sum().ln();
            ce += lse - row.dot(&yrow);
        }
        let loss = ce / n + 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>();
        let resid = (softmax(logits) - &self.y) / n;
        let gw = self.x.t().dot(&resid) + &(w * self.l2);
        let gb = resid.sum_axis(Axis(0));
        (loss, gw, gb)
    }
}

fn norm(gw: &Array2<f64>, gb: &Array1<f64>) -> f64 {
    (gw.iter().chain(gb.iter()).map(|v| v * v).sum::<f64>()).sqrt()
}

/// Fits a probe from zero weights. See [`fit_linear_probe_from`].
pub fn fit_linear_probe(train: &FeatureTable, num_classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    let d = train.dim();
    fit_linear_probe_from(
        train,
        num_classes,
        cfg,
        Array2::zeros((d, num_classes)),
        Array1::zeros(num_classes),
    )
}

/// Full-batch gradient descent with backtracking line search on softmax
/// cross-entropy plus L2, starting from the given parameters. Features are
/// standardized with training statistics; constant features are left
/// centered but unscaled.
pub fn fit_linear_probe_from(
    train: &FeatureTable,
    num_classes: usize,
    cfg: &ProbeConfig,
    w0: Array2<f64>,
    b0: Array1<f64>,
) -> Result<LinearProbe> {
    let labels = train.require_labels()?;
    let mut present = vec![false; num_classes];
    for &l in &labels {
        let slot = present
            .get_mut(l as usize)
            .ok_or_else(|| Error::Eval(format!("label {l} outside 0..{num_classes}")))?;
        *slot = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Eval("linear probe needs at least two classes".into()));
    }
    if w0.dim() != (train.dim(), num_classes) || b0.len() != num_classes {
        return Err(Error::Shape("initial probe parameters have the wrong shape".into()));
    }

    let mean = train.features.mean_axis(Axis(0)).expect("nonempty table");
    let scale = train
        .features
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let x = (&train.features - &mean) / &scale;
    let mut y = Array2::zeros((labels.len(), num_classes));
    for (i, &l) in labels.iter().enumerate() {
        y[[i, l as usize]] = 1.0;
    }
    let problem = Problem { x, y, l2: cfg.l2 };

    let (mut w, mut b) = (w0, b0);
    let (mut loss, mut gw, mut gb) = problem.loss_grad(&w, &b);
    let mut step = 1.0;
    let mut iterations = 0;
    while iterations < cfg.max_iter && norm(&gw, &gb) >= cfg.tol {
        let g2 = gw.iter().chain(gb.iter()).map(|v| v * v).sum::<f64>();
        let mut t = step * 2.0;
        loop {
            let w_new = &w - &(&gw * t);
            let b_new = &b - &(&gb * t);
            let (l_new, gw_new, gb_new) = problem.loss_grad(&w_new, &b_new);
            if l_new <= loss - 0.5 * t * g2 || t < 1e-12 {
                w = w_new;
                b = b_new;
                loss = l_new;
                gw = gw_new;
                gb = gb_new;
                break;
            }
            t *= 0.5;
        }
        step = t;
        iterations += 1;
    }
    Ok(LinearProbe {
        mean,
        scale,
        grad_norm: norm(&gw, &gb),
        weight: w,
        bias: b,
        loss,
        iterations,
    })
}
