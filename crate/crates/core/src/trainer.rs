//! Training loop: view generation, encoding, objective, backward pass,
//! AdamW, and the BYOL target network.
//!
//! Randomness is keyed by purpose and position: the epoch shuffle by
//! `(seed, epoch)`, view transforms by `(seed, step, slot in batch)`, and
//! initialization by `seed` alone. Gradients are accumulated per fixed-size
//! shard of views and the shards are summed in index order, so a run is
//! bit-for-bit reproducible for a given `grad_shard_size` regardless of the
//! number of worker threads.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::bagstore::{Dataset, SlideBag};
use crate::checkpoint::Checkpoint;
use crate::encoder::{encode_view, EncodeTrace, Encoder, Heads, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{self, Params, TensorRef};
use crate::objectives::{self, ObjectiveConfig, ObjectiveKind, VicregWeights};
use crate::optim::{adamw_step, ema_update, lr_at, AdamWConfig, OptimizerState};
use crate::par::Execution;
use crate::posembed::PosEmbed;
use crate::rng::{stream, RandomSource};
use crate::transforms::{make_view_pair, TokenView, TransformConfig};

/// Optimizer, schedule and loop settings (`[optim]` section).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Views per gradient shard. Results are reproducible for a fixed value.
    pub grad_shard_size: usize,
    /// Worker threads; defaults to the number of logical cores.
    pub workers: usize,
}

fn logical_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 100,
            lr_max: 1e-3,
            lr_min: 1e-6,
            warmup_frac: 0.1,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            seed: 0,
            checkpoint_every: 0,
            grad_shard_size: 8,
            workers: logical_cores(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("optim.{k}");
        if self.batch_size < 2 {
            return Err(Error::config(key("batch_size"), "must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::config(key("epochs"), "must be at least 1"));
        }
        if !(self.lr_min > 0.0 && self.lr_min.is_finite()) {
            return Err(Error::config(key("lr_min"), "must be positive"));
        }
        if self.lr_min > self.lr_max {
            return Err(Error::config(
                key("lr_min"),
                format!("lr_min {} exceeds lr_max {}", self.lr_min, self.lr_max),
            ));
        }
        if !self.lr_max.is_finite() {
            return Err(Error::config(key("lr_max"), "must be finite"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::config(key("warmup_frac"), "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(key("weight_decay"), "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config(key("beta1"), "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(key("beta2"), "must lie in [0, 1)"));
        }
        if !(self.eps_adam > 0.0) {
            return Err(Error::config(key("eps_adam"), "must be positive"));
        }
        if self.grad_shard_size == 0 {
            return Err(Error::config(key("grad_shard_size"), "must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::config(key("workers"), "must be at least 1"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps_adam,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub transforms: TransformConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.transforms.validate()?;
        self.model.validate()?;
        self.optim.validate()
    }
}

/// All trainable tensors: positional encoding, encoder, heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub pos: PosEmbed,
    pub encoder: Encoder,
    pub heads: Heads,
}

impl Network {
    pub fn init(d_in: usize, model: &ModelConfig, objective: ObjectiveKind, seed: u64) -> Self {
        let mut rng = RandomSource::derive(seed, &[stream::INIT]);
        let pos = PosEmbed::init(model.fourier_dim, model.pos_hidden, model.d_model, &mut rng);
        let encoder = Encoder::init(d_in, model, &mut rng);
        let heads = Heads::init(objective, model, &mut rng);
        Self { pos, encoder, heads }
    }

    pub fn encode_view(&self, view: &TokenView, bag: &SlideBag) -> Result<EncodeTrace> {
        encode_view(view, bag, &self.encoder, &self.pos)
    }
}

impl Params for Network {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        self.pos.collect(&nn::join(prefix, "pos"), out);
        self.encoder.collect(&nn::join(prefix, "encoder"), out);
        self.heads.collect(&nn::join(prefix, "heads"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<&'a mut [f64]>) {
        self.pos.collect_mut(prefix, out);
        self.encoder.collect_mut(prefix, out);
        self.heads.collect_mut(prefix, out);
    }
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub network: Network,
    /// EMA target network (BYOL only).
    pub target: Option<Network>,
    pub optimizer: OptimizerState,
    pub step: u64,
}

impl TrainState {
    pub fn init(d_in: usize, cfg: &TrainConfig) -> Self {
        let network = Network::init(d_in, &cfg.model, cfg.objective.kind, cfg.optim.seed);
        let target = (cfg.objective.kind == ObjectiveKind::Byol).then(|| network.clone());
        let optimizer = OptimizerState::new(&network);
        Self {
            network,
            target,
            optimizer,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub resume: Option<Checkpoint>,
    /// Stop once this many optimizer steps have completed.
    pub stop_after: Option<u64>,
    /// Directory for periodic and final checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Newline-delimited JSON metrics log.
    pub metrics_path: Option<PathBuf>,
    pub execution: Option<Execution>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
}

pub fn steps_per_epoch(num_bags: usize, batch_size: usize) -> usize {
    num_bags / batch_size
}

/// Batch of gradient-carrying results for one training step.
pub struct StepResult {
    pub loss: f64,
    pub grads: Network,
}

/// Loss and gradients for one batch of bags. `step` keys the transform draws.
pub fn batch_gradients(
    state: &TrainState,
    bags: &[&SlideBag],
    cfg: &TrainConfig,
    step: u64,
    exec: Execution,
) -> Result<StepResult> {
    let net = &state.network;
    let kind = cfg.objective.kind;
    let b = bags.len();
    let seed = cfg.optim.seed;

    let pairs = exec.map_range(b, |i| {
        let mut rng = RandomSource::derive(seed, &[stream::TRANSFORM, step, i as u64]);
        make_view_pair(bags[i], &cfg.transforms, &mut rng)
    });
    let pairs = pairs.into_iter().collect::<Result<Vec<_>>>()?;
    let view_at = |j: usize| -> (&TokenView, &SlideBag) {
        let (a, bv) = &pairs[j % b];
        (if j < b { a } else { bv }, bags[j % b])
    };

    let traces = exec
        .map_range(2 * b, |j| {
            let (v, bag) = view_at(j);
            net.encode_view(v, bag)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let stack = |rows: &[EncodeTrace]| -> Array2<f64> {
        let views: Vec<_> = rows.iter().map(|t| t.h.view()).collect();
        ndarray::stack(Axis(0), &views).expect("equal widths")
    };
    let h1 = stack(&traces[..b]);
    let h2 = stack(&traces[b..]);
    let (out1, cache1) = net.heads.forward(h1.view(), kind)?;
    let (out2, cache2) = net.heads.forward(h2.view(), kind)?;

    let mut grads = net.zeros_like();
    let (loss, dh1, dh2) = match kind {
        ObjectiveKind::SimClr | ObjectiveKind::Supcon | ObjectiveKind::Vicreg => {
            let pl = match kind {
                ObjectiveKind::SimClr => objectives::nt_xent(out1.z.view(), out2.z.view(), cfg.objective.temperature)?,
                ObjectiveKind::Supcon => {
                    let labels = bags
                        .iter()
                        .map(|bag| {
                            bag.label.ok_or_else(|| {
                                Error::InvalidDataset(format!("supcon needs a label on `{}`", bag.slide_id))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    objectives::supcon(out1.z.view(), out2.z.view(), &labels, cfg.objective.temperature)?
                }
                _ => objectives::vicreg(out1.z.view(), out2.z.view(), &VicregWeights::from(&cfg.objective))?,
            };
            let dh1 = net.heads.backward(&cache1, Some(pl.grad_a.view()), None, &mut grads.heads);
            let dh2 = net.heads.backward(&cache2, Some(pl.grad_b.view()), None, &mut grads.heads);
            (pl.loss, dh1, dh2)
        }
        ObjectiveKind::Byol => {
            let target = state
                .target
                .as_ref()
                .ok_or_else(|| Error::Objective("byol needs a target network".into()))?;
            let (zt1, zt2) = target_projections(target, &view_at, b, exec)?;
            let p1 = out1.p.as_ref().expect("byol heads have a predictor");
            let p2 = out2.p.as_ref().expect("byol heads have a predictor");
            let (l1, dp1) = objectives::byol_loss(p1.view(), zt2.view())?;
            let (l2, dp2) = objectives::byol_loss(p2.view(), zt1.view())?;
            let dp1 = dp1 * 0.5;
            let dp2 = dp2 * 0.5;
            let dh1 = net.heads.backward(&cache1, None, Some(dp1.view()), &mut grads.heads);
            let dh2 = net.heads.backward(&cache2, None, Some(dp2.view()), &mut grads.heads);
            (0.5 * (l1 + l2), dh1, dh2)
        }
    };
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }

    let shard = cfg.optim.grad_shard_size;
    let n_views = 2 * b;
    let shards = exec.map_range(n_views.div_ceil(shard), |s| {
        let mut g_enc = net.encoder.zeros_like();
        let mut g_pos = net.pos.zeros_like();
        for j in s * shard..((s + 1) * shard).min(n_views) {
            let dh = if j < b { dh1.row(j) } else { dh2.row(j - b) };
            net.encoder.backward(&net.pos, &traces[j], dh, &mut g_enc, &mut g_pos);
        }
        (g_enc, g_pos)
    });
    for (g_enc, g_pos) in &shards {
        grads.encoder.add_assign_from(g_enc);
        grads.pos.add_assign_from(g_pos);
    }
    Ok(StepResult { loss, grads })
}

/// Target-branch projections; no gradient is ever computed for them.
fn target_projections<'v, F>(
    target: &Network,
    view_at: &F,
    b: usize,
    exec: Execution,
) -> Result<(Array2<f64>, Array2<f64>)>
where
    F: Fn(usize) -> (&'v TokenView, &'v SlideBag) + Sync,
{
    let hs = exec
        .map_range(2 * b, |j| {
            let (v, bag) = view_at(j);
            target.encode_view(v, bag).map(|t| t.h)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = hs.iter().map(|h| h.view()).collect();
    let h = ndarray::stack(Axis(0), &views).expect("equal widths");
    let (z1, _) = target.heads.forward(h.slice(ndarray::s![..b, ..]), ObjectiveKind::Byol)?;
    let (z2, _) = target.heads.forward(h.slice(ndarray::s![b.., ..]), ObjectiveKind::Byol)?;
    Ok((z1.z, z2.z))
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    RandomSource::derive(seed, &[stream::SHUFFLE, epoch]).shuffle(&mut order);
    order
}

/// Trains on `train` and returns the final checkpoint and per-step metrics.
///
/// An epoch is one pass over a seeded shuffle of the bags; the last partial
/// batch is dropped.
pub fn fit(train: &Dataset, cfg: &TrainConfig, opts: &FitOptions) -> Result<FitOutcome> {
    cfg.validate()?;
    let d_in = train
        .dim()
        .ok_or_else(|| Error::InvalidDataset("training set is empty".into()))?;
    if cfg.objective.kind == ObjectiveKind::Supcon {
        if let Some(b) = train.bags.iter().find(|b| b.label.is_none()) {
            return Err(Error::InvalidDataset(format!(
                "supcon needs labels on every training bag; `{}` has none",
                b.slide_id
            )));
        }
    }
    let b = cfg.optim.batch_size;
    let spe = steps_per_epoch(train.len(), b) as u64;
    if spe == 0 {
        return Err(Error::config(
            "optim.batch_size",
            format!("batch of {b} exceeds the {} training bags", train.len()),
        ));
    }
    let total = spe * cfg.optim.epochs as u64;
    let exec = opts.execution.unwrap_or_default();

    let mut state = match &opts.resume {
        Some(ckpt) => {
            ckpt.check_compatible(d_in, cfg)?;
            ckpt.state.clone()
        }
        None => TrainState::init(d_in, cfg),
    };
    let stop = opts.stop_after.unwrap_or(total).min(total);

    if let Some(dir) = &opts.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = match &opts.metrics_path {
        Some(p) => {
            let f = fs::OpenOptions::new()
                .create(true)
                .append(opts.resume.is_some())
                .write(true)
                .truncate(opts.resume.is_none())
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            Some((p.clone(), std::io::BufWriter::new(f)))
        }
        None => None,
    };

    let adamw = cfg.optim.adamw();
    let mut metrics = Vec::new();
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();
    while state.step < stop {
        let step = state.step;
        let epoch = step / spe;
        if epoch != order_epoch {
            order = epoch_order(train.len(), cfg.optim.seed, epoch);
            order_epoch = epoch;
        }
        let start = (step % spe) as usize * b;
        let batch: Vec<&SlideBag> = order[start..start + b].iter().map(|&i| &train.bags[i]).collect();

        let result = batch_gradients(&state, &batch, cfg, step, exec)?;
        let lr = lr_at(step + 1, total, cfg.optim.warmup_frac, cfg.optim.lr_max, cfg.optim.lr_min);
        adamw_step(&mut state.network, &result.grads, &mut state.optimizer, lr, &adamw)?;
        if let Some(target) = state.target.as_mut() {
            ema_update(target, &state.network, cfg.objective.byol_momentum);
        }
        state.step += 1;

        let m = StepMetrics {
            step: state.step,
            lr,
            loss: result.loss,
        };
        log::debug!("step {} lr {:.3e} loss {:.6}", m.step, m.lr, m.loss);
        if let Some((path, w)) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io(path.as_path(), e))?;
        }
        metrics.push(m);

        if let Some(dir) = &opts.checkpoint_dir {
            let every = cfg.optim.checkpoint_every;
            if every > 0 && state.step % every == 0 {
                Checkpoint::new(d_in, cfg.clone(), state.clone())
                    .save(&dir.join(format!("step-{:06}.ckpt", state.step)))?;
            }
        }
    }
    if let Some((path, mut w)) = log {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    let checkpoint = Checkpoint::new(d_in, cfg.clone(), state);
    if let Some(dir) = &opts.checkpoint_dir {
        checkpoint.save(&dir.join("final.ckpt"))?;
    }
    Ok(FitOutcome { checkpoint, metrics })
}
