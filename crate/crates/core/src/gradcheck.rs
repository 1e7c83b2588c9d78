//! Finite-difference verification of every hand-written backward pass.
//!
//! Each check builds a small module with randomized parameters, takes a
//! scalar loss `Σ output ⊙ R` for a fixed random `R` (or the objective
//! itself), and compares the analytic gradient of every parameter entry
//! with a central difference at `h = 1e-5`. Relative error is
//! `|a − n| / max(|a|, |n|, 1e-4)`; the floor keeps entries whose true
//! gradient is exactly zero (key biases under softmax) from measuring
//! round-off alone.

use std::fmt;
use std::str::FromStr;

use ndarray::{array, Array1, Array2};
use serde::Serialize;

use crate::encoder::{Encoder, Heads, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Params, TensorRef};
use crate::objectives::{self, ObjectiveConfig, ObjectiveKind, VicregWeights};
use crate::posembed::PosEmbed;
use crate::rng::RandomSource;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    PosEmbed,
    Encoder,
    Heads,
    Objectives,
    All,
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posembed" => Ok(Self::PosEmbed),
            "encoder" => Ok(Self::Encoder),
            "heads" => Ok(Self::Heads),
            "objectives" => Ok(Self::Objectives),
            "all" => Ok(Self::All),
            other => Err(Error::config(
                "component",
                format!("unknown component `{other}` (posembed, encoder, heads, objectives, all)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub component: String,
    pub tensor: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cw = self.entries.iter().map(|e| e.component.len()).chain([9]).max().unwrap_or(9);
        let tw = self.entries.iter().map(|e| e.tensor.len()).chain([6]).max().unwrap_or(6);
        writeln!(f, "{:<cw$}  {:<tw$}  {:>8}  {:>11}", "component", "tensor", "entries", "max_rel_err")?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<cw$}  {:<tw$}  {:>8}  {:>11.3e}",
                e.component, e.tensor, e.entries, e.max_rel_err
            )?;
        }
        write!(f, "overall max relative error {:.3e}", self.max_rel_err())
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Central difference of `loss` w.r.t. entry `i` of tensor `t` of `module`.
fn numeric<M: Params>(module: &mut M, t: usize, i: usize, loss: &dyn Fn(&M) -> f64) -> f64 {
    let orig = module.tensors()[t].data[i];
    module.tensors_mut()[t][i] = orig + STEP;
    let up = loss(module);
    module.tensors_mut()[t][i] = orig - STEP;
    let down = loss(module);
    module.tensors_mut()[t][i] = orig;
    (up - down) / (2.0 * STEP)
}

/// Compares `analytic` (same layout as `module`) against finite differences
/// for every entry of every tensor.
pub fn check_params<M: Params>(
    component: &str,
    module: &mut M,
    analytic: &M,
    loss: &dyn Fn(&M) -> f64,
) -> Vec<GradCheckEntry> {
    let grads: Vec<(String, Vec<f64>)> = analytic
        .tensors()
        .into_iter()
        .map(|t: TensorRef<'_>| (t.name, t.data.to_vec()))
        .collect();
    grads
        .iter()
        .enumerate()
        .map(|(t, (name, g))| {
            let max = (0..g.len())
                .map(|i| rel_err(g[i], numeric(module, t, i, loss)))
                .fold(0.0, f64::max);
            GradCheckEntry {
                component: component.to_string(),
                tensor: name.clone(),
                entries: g.len(),
                max_rel_err: max,
            }
        })
        .collect()
}

/// Same as [`check_params`] for a plain matrix input.
pub fn check_input(
    component: &str,
    name: &str,
    x: &Array2<f64>,
    analytic: &Array2<f64>,
    loss: &dyn Fn(&Array2<f64>) -> f64,
) -> GradCheckEntry {
    let mut x = x.clone();
    let mut max: f64 = 0.0;
    for idx in 0..x.len() {
        let orig = x.as_slice().expect("contiguous")[idx];
        x.as_slice_mut().expect("contiguous")[idx] = orig + STEP;
        let up = loss(&x);
        x.as_slice_mut().expect("contiguous")[idx] = orig - STEP;
        let down = loss(&x);
        x.as_slice_mut().expect("contiguous")[idx] = orig;
        let n = (up - down) / (2.0 * STEP);
        max = max.max(rel_err(analytic.as_slice().expect("contiguous")[idx], n));
    }
    GradCheckEntry {
        component: component.to_string(),
        tensor: name.to_string(),
        entries: x.len(),
        max_rel_err: max,
    }
}

fn randomize<M: Params>(m: &mut M, scale: f64, rng: &mut RandomSource) {
    for t in m.tensors_mut() {
        t.iter_mut().for_each(|v| *v += scale * rng.normal());
    }
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut RandomSource) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.normal())
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a * b).sum()
}

/// Configuration of the tiny encoder used by the checks.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        ffn_mult: 2,
        fourier_dim: 4,
        pos_hidden: 6,
        proj_hidden: 5,
        d_proj: 4,
        init_std: 0.02,
    }
}

fn sample_coords() -> Array2<f64> {
    array![[0.0, 0.0], [3.0, -2.0], [1.0, 5.0]]
}

pub fn check_posembed(seed: u64) -> Vec<GradCheckEntry> {
    let mut rng = RandomSource::new(seed);
    let mut pos = PosEmbed::init(4, 6, 5, &mut rng);
    randomize(&mut pos, 0.3, &mut rng);
    let coords = sample_coords();
    let r = gaussian(coords.nrows(), 5, 1.0, &mut rng);
    let mut grad = pos.zeros_like();
    let (_, cache) = pos.forward(coords.view());
    pos.backward(&cache, r.view(), &mut grad);
    let loss = |p: &PosEmbed| dot(&p.forward(coords.view()).0, &r);
    check_params("posembed", &mut pos, &grad, &loss)
}

/// Position encoder and transformer checked together, since the encoder
/// routes its token gradient into the positional MLP.
#[derive(Clone)]
struct Backbone {
    pos: PosEmbed,
    encoder: Encoder,
}

impl Params for Backbone {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        self.pos.collect(&crate::nn::join(prefix, "pos"), out);
        self.encoder.collect(&crate::nn::join(prefix, "encoder"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<&'a mut [f64]>) {
        self.pos.collect_mut(prefix, out);
        self.encoder.collect_mut(prefix, out);
    }
}

/// Tiny encoder (`L = 2`, `d_model = 8`, 2 heads) over 3 tokens, plus one
/// padded row that must not matter.
pub fn check_encoder(seed: u64) -> Vec<GradCheckEntry> {
    let cfg = tiny_model();
    let mut rng = RandomSource::new(seed);
    let d_in = 3;
    let mut net = Backbone {
        pos: PosEmbed::init(cfg.fourier_dim, cfg.pos_hidden, cfg.d_model, &mut rng),
        encoder: Encoder::init(d_in, &cfg, &mut rng),
    };
    randomize(&mut net, 0.3, &mut rng);
    let tokens = gaussian(3, d_in, 1.0, &mut rng);
    let coords = sample_coords();
    let r = Array1::from_shape_simple_fn(cfg.d_model, || rng.normal());

    let mut grad = net.zeros_like();
    let trace = net
        .encoder
        .forward(&net.pos, tokens.view(), coords.view(), 3)
        .expect("valid shapes");
    net.encoder
        .backward(&net.pos, &trace, r.view(), &mut grad.encoder, &mut grad.pos);
    let loss = |m: &Backbone| {
        m.encoder
            .forward(&m.pos, tokens.view(), coords.view(), 3)
            .expect("valid shapes")
            .h
            .dot(&r)
    };
    check_params("encoder", &mut net, &grad, &loss)
}

pub fn check_heads(seed: u64) -> Vec<GradCheckEntry> {
    let cfg = tiny_model();
    let mut out = Vec::new();
    for kind in [ObjectiveKind::SimClr, ObjectiveKind::Byol] {
        let mut rng = RandomSource::new(seed);
        let mut heads = Heads::init(kind, &cfg, &mut rng);
        randomize(&mut heads, 0.3, &mut rng);
        let h = gaussian(4, cfg.d_model, 1.0, &mut rng);
        let rz = gaussian(4, cfg.d_proj, 1.0, &mut rng);
        let rp = gaussian(4, cfg.d_proj, 1.0, &mut rng);
        let scalar = |heads: &Heads, h: &Array2<f64>| {
            let (o, _) = heads.forward(h.view(), kind).expect("valid shapes");
            dot(&o.z, &rz) + o.p.map_or(0.0, |p| dot(&p, &rp))
        };
        let mut grad = heads.zeros_like();
        let (o, cache) = heads.forward(h.view(), kind).expect("valid shapes");
        let dp = o.p.as_ref().map(|_| rp.view());
        let dh = heads.backward(&cache, Some(rz.view()), dp, &mut grad);
        let name = format!("heads.{}", kind_name(kind));
        out.extend(check_params(&name, &mut heads, &grad, &|m: &Heads| scalar(m, &h)));
        out.push(check_input(&name, "input", &h, &dh, &|x| scalar(&heads, x)));
    }
    out
}

fn kind_name(kind: ObjectiveKind) -> &'static str {
    match kind {
        ObjectiveKind::SimClr => "simclr",
        ObjectiveKind::Byol => "byol",
        ObjectiveKind::Vicreg => "vicreg",
        ObjectiveKind::Supcon => "supcon",
    }
}

/// All four objectives, gradients w.r.t. both branch inputs.
type PairFn<'a> = Box<dyn Fn(&Array2<f64>, &Array2<f64>) -> objectives::PairLoss + 'a>;

pub fn check_objectives(seed: u64) -> Vec<GradCheckEntry> {
    let mut rng = RandomSource::new(seed);
    let (n, d) = (6, 4);
    let a = gaussian(n, d, 1.0, &mut rng);
    let b = gaussian(n, d, 1.0, &mut rng);
    let tau = 0.3;
    let labels = [0u32, 1, 0, 2, 1, 0];
    // Inputs scaled so per-dimension standard deviations sit well away from
    // the variance hinge.
    let (va, vb) = (&a * 0.5, &b * 0.5);
    let weights = VicregWeights::from(&ObjectiveConfig::default());
    let mut out = Vec::new();

    let pairs: [(&str, PairFn, &Array2<f64>, &Array2<f64>); 3] = [
        ("simclr", Box::new(|x, y| objectives::nt_xent(x.view(), y.view(), tau).expect("valid")), &a, &b),
        (
            "supcon",
            Box::new(|x, y| objectives::supcon(x.view(), y.view(), &labels, tau).expect("valid")),
            &a,
            &b,
        ),
        ("vicreg", Box::new(|x, y| objectives::vicreg(x.view(), y.view(), &weights).expect("valid")), &va, &vb),
    ];
    for (name, f, x, y) in &pairs {
        let pl = f(x, y);
        let comp = format!("objective.{name}");
        out.push(check_input(&comp, "a", x, &pl.grad_a, &|v| f(v, y).loss));
        out.push(check_input(&comp, "b", y, &pl.grad_b, &|v| f(x, v).loss));
    }
    let (_, dp) = objectives::byol_loss(a.view(), b.view()).expect("valid");
    out.push(check_input("objective.byol", "p", &a, &dp, &|v| {
        objectives::byol_loss(v.view(), b.view()).expect("valid").0
    }));
    out
}

pub fn grad_check(component: Component, seed: u64) -> GradCheckReport {
    let mut entries = Vec::new();
    if matches!(component, Component::PosEmbed | Component::All) {
        entries.extend(check_posembed(seed));
    }
    if matches!(component, Component::Encoder | Component::All) {
        entries.extend(check_encoder(seed));
    }
    if matches!(component, Component::Heads | Component::All) {
        entries.extend(check_heads(seed));
    }
    if matches!(component, Component::Objectives | Component::All) {
        entries.extend(check_objectives(seed));
    }
    GradCheckReport { entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_err(1e-9, 0.0) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn parse_component() {
        assert_eq!("encoder".parse::<Component>().unwrap(), Component::Encoder);
        assert!("nope".parse::<Component>().is_err());
    }

    #[test]
    fn every_component_passes() {
        for seed in 0..2 {
            let report = grad_check(Component::All, seed);
            assert!(report.passed(TOLERANCE), "seed {seed}\n{report}");
        }
    }
}
