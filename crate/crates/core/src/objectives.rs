//! Pair objectives with analytic gradients.
//!
//! Every loss takes the two branch outputs of a batch (row `i` of each is a
//! view of slide `i`) and returns the scalar loss plus its gradient with
//! respect to each input. Contrastive losses use in-batch negatives only.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    #[serde(rename = "simclr")]
    SimClr,
    Byol,
    Vicreg,
    Supcon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Softmax temperature for simclr and supcon.
    pub temperature: f64,
    pub vicreg_lambda: f64,
    pub vicreg_mu: f64,
    pub vicreg_nu: f64,
    pub vicreg_gamma: f64,
    pub vicreg_eps: f64,
    /// Target-network EMA momentum for byol.
    pub byol_momentum: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::SimClr,
            temperature: 0.1,
            vicreg_lambda: 25.0,
            vicreg_mu: 25.0,
            vicreg_nu: 1.0,
            vicreg_gamma: 1.0,
            vicreg_eps: 1e-4,
            byol_momentum: 0.99,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("objective.{k}");
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(key("temperature"), "must be positive"));
        }
        for (name, v) in [
            ("vicreg_lambda", self.vicreg_lambda),
            ("vicreg_mu", self.vicreg_mu),
            ("vicreg_nu", self.vicreg_nu),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key(name), "must be >= 0"));
            }
        }
        if !(self.vicreg_gamma > 0.0) {
            return Err(Error::config(key("vicreg_gamma"), "must be positive"));
        }
        if !(self.vicreg_eps > 0.0) {
            return Err(Error::config(key("vicreg_eps"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.byol_momentum) {
            return Err(Error::config(key("byol_momentum"), "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Loss value and gradients w.r.t. both inputs.
#[derive(Debug, Clone)]
pub struct PairLoss {
    pub loss: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
    /// Per-anchor losses over the stacked `[a; b]` rows (contrastive
    /// objectives only; NaN for anchors without positives).
    pub per_anchor: Vec<f64>,
}

fn check_pair(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Objective(format!(
            "branch shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.nrows() < 2 {
        return Err(Error::Objective(format!("need at least 2 pairs, got {}", a.nrows())));
    }
    Ok(())
}

fn normalize(x: ArrayView2<f64>) -> Result<(Array2<f64>, ndarray::Array1<f64>)> {
    let (u, norms) = nn::l2_normalize_rows(x);
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0 && n.is_finite())) {
        return Err(Error::Objective(format!("row {i} has zero or non-finite norm")));
    }
    Ok((u, norms))
}

/// Shared softmax-over-cosine kernel. `groups` assigns each of the `2N`
/// stacked rows a positive-set id: anchors sharing an id are positives.
fn contrastive(a: ArrayView2<f64>, b: ArrayView2<f64>, groups: &[usize], tau: f64) -> Result<PairLoss> {
    check_pair(&a, &b)?;
    if !(tau > 0.0) {
        return Err(Error::Objective("temperature must be positive".into()));
    }
    let n = a.nrows();
    let m = 2 * n;
    let x = concatenate![Axis(0), a, b];
    let (u, norms) = normalize(x.view())?;
    let sim = u.dot(&u.t()) / tau;

    let mut grad_s = Array2::<f64>::zeros((m, m));
    let mut per_anchor = vec![f64::NAN; m];
    let mut active = 0usize;
    for i in 0..m {
        let positives = (0..m).filter(|&j| j != i && groups[j] == groups[i]).count();
        if positives == 0 {
            continue;
        }
        active += 1;
        let row = sim.row(i);
        let max = (0..m).filter(|&j| j != i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..m).filter(|&j| j != i).map(|j| (row[j] - max).exp()).sum();
        let lse = max + denom.ln();
        let mut pos_sum = 0.0;
        let mut grow = grad_s.row_mut(i);
        for j in (0..m).filter(|&j| j != i) {
            let p = (row[j] - lse).exp();
            let is_pos = groups[j] == groups[i];
            if is_pos {
                pos_sum += row[j];
            }
            grow[j] = p - if is_pos { 1.0 / positives as f64 } else { 0.0 };
        }
        per_anchor[i] = lse - pos_sum / positives as f64;
    }
    if active == 0 {
        return Err(Error::Objective("no anchor has a positive".into()));
    }
    grad_s /= active as f64;
    let loss = per_anchor.iter().filter(|v| !v.is_nan()).sum::<f64>() / active as f64;
    let sym = &grad_s + &grad_s.t();
    let du = sym.dot(&u) / tau;
    let dx = nn::l2_normalize_rows_backward(&u, &norms, du.view());
    Ok(PairLoss {
        loss,
        grad_a: dx.slice(s![..n, ..]).to_owned(),
        grad_b: dx.slice(s![n.., ..]).to_owned(),
        per_anchor,
    })
}

/// NT-Xent: every anchor's positive is the other view of the same slide,
/// all other `2N − 2` embeddings are negatives.
pub fn nt_xent(a: ArrayView2<f64>, b: ArrayView2<f64>, tau: f64) -> Result<PairLoss> {
    let n = a.nrows();
    let groups: Vec<usize> = (0..n).chain(0..n).collect();
    contrastive(a, b, &groups, tau)
}

/// Supervised contrastive loss: positives are all other embeddings with the
/// same label. Anchors without positives are left out of the mean.
pub fn supcon(a: ArrayView2<f64>, b: ArrayView2<f64>, labels: &[u32], tau: f64) -> Result<PairLoss> {
    if labels.len() != a.nrows() {
        return Err(Error::Objective(format!(
            "{} labels for {} pairs",
            labels.len(),
            a.nrows()
        )));
    }
    let groups: Vec<usize> = labels.iter().chain(labels).map(|&l| l as usize).collect();
    contrastive(a, b, &groups, tau)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VicregWeights {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub gamma: f64,
    pub eps: f64,
}

impl From<&ObjectiveConfig> for VicregWeights {
    fn from(c: &ObjectiveConfig) -> Self {
        Self {
            lambda: c.vicreg_lambda,
            mu: c.vicreg_mu,
            nu: c.vicreg_nu,
            gamma: c.vicreg_gamma,
            eps: c.vicreg_eps,
        }
    }
}

/// Variance + covariance terms of one branch, each already averaged over
/// the two branches (factor 1/2), with the gradient w.r.t. that branch.
fn vicreg_branch(z: ArrayView2<f64>, w: &VicregWeights) -> (f64, Array2<f64>) {
    let (n, d) = z.dim();
    let mean = z.mean_axis(Axis(0)).expect("n >= 2");
    let zc = &z - &mean;
    let cov = zc.t().dot(&zc) / (n as f64 - 1.0);

    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, d));
    // variance hinge: mean_j max(0, γ − sqrt(var_j + ε))
    for j in 0..d {
        let std = (cov[[j, j]] + w.eps).sqrt();
        if w.gamma > std {
            loss += 0.5 * w.mu * (w.gamma - std) / d as f64;
            let coef = -0.5 * w.mu / d as f64 / ((n as f64 - 1.0) * std);
            grad.column_mut(j).scaled_add(coef, &zc.column(j));
        }
    }
    // covariance: Σ_{a≠b} C_ab² / d
    let mut off = cov.clone();
    off.diag_mut().fill(0.0);
    loss += 0.5 * w.nu * off.iter().map(|c| c * c).sum::<f64>() / d as f64;
    // G = dL/dC = ν·off/d (halved twice over: branch average and C²'s 2C);
    // dL/dZc = Zc·(G + Gᵀ)/(n−1)
    let g = off * (w.nu / d as f64);
    grad += &(zc.dot(&(&g + &g.t())) / (n as f64 - 1.0));
    (loss, grad)
}

/// VICReg: `λ·invariance + μ·variance + ν·covariance`, variance and
/// covariance averaged over the two branches. Variances use the unbiased
/// `n − 1` estimator.
pub fn vicreg(a: ArrayView2<f64>, b: ArrayView2<f64>, w: &VicregWeights) -> Result<PairLoss> {
    check_pair(&a, &b)?;
    let (n, d) = a.dim();
    let diff = &a - &b;
    let inv = diff.iter().map(|v| v * v).sum::<f64>() / (n * d) as f64;
    let dinv = &diff * (2.0 * w.lambda / (n * d) as f64);
    let (la, ga) = vicreg_branch(a, w);
    let (lb, gb) = vicreg_branch(b, w);
    Ok(PairLoss {
        loss: w.lambda * inv + la + lb,
        grad_a: ga + &dinv,
        grad_b: gb - &dinv,
        per_anchor: Vec::new(),
    })
}

/// BYOL regression loss `mean_i ‖p̂_i − ẑ_i‖² = 2 − 2·cos(p_i, z_i)`.
/// The target is a constant: only the gradient w.r.t. `p` is returned.
pub fn byol_loss(p: ArrayView2<f64>, z_target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if p.dim() != z_target.dim() || p.nrows() == 0 {
        return Err(Error::Objective(format!(
            "prediction {:?} and target {:?} shapes differ",
            p.dim(),
            z_target.dim()
        )));
    }
    let n = p.nrows() as f64;
    let (pu, pn) = normalize(p)?;
    let (zu, _) = normalize(z_target)?;
    let cos = (&pu * &zu).sum_axis(Axis(1));
    let loss = cos.iter().map(|c| 2.0 - 2.0 * c).sum::<f64>() / n;
    let du = zu * (-2.0 / n);
    let dp = nn::l2_normalize_rows_backward(&pu, &pn, du.view());
    Ok((loss, dp))
}
