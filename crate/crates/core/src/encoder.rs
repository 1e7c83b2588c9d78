//! Transformer slide encoder and projection/prediction heads.
//!
//! A view's tokens pass through a dense input adapter, receive positional
//! encodings, and are prefixed by a learnable CLS token. `n_layers` pre-norm
//! blocks (multi-head self-attention + GELU feed-forward, both residual)
//! follow; the slide representation is the layer-normalized final CLS
//! state. Every forward pass keeps what its backward pass needs, so training
//! does not rely on a general autodiff tape.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::bagstore::SlideBag;
use crate::error::{Error, Result};
use crate::nn::{self, Dense, LayerNorm, LayerNormCache, Params, TensorRef};
use crate::objectives::ObjectiveKind;
use crate::posembed::{PosEmbed, PosEmbedCache};
use crate::rng::RandomSource;
use crate::transforms::TokenView;

/// Architecture hyperparameters. The input width comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Feed-forward width as a multiple of `d_model`.
    pub ffn_mult: usize,
    /// Fourier feature width of the positional encoding (even).
    pub fourier_dim: usize,
    pub pos_hidden: usize,
    pub proj_hidden: usize,
    pub d_proj: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_layers: 6,
            ffn_mult: 4,
            fourier_dim: 64,
            pos_hidden: 256,
            proj_hidden: 128,
            d_proj: 128,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("model.{k}");
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("ffn_mult", self.ffn_mult),
            ("pos_hidden", self.pos_hidden),
            ("proj_hidden", self.proj_hidden),
            ("d_proj", self.d_proj),
        ] {
            if v == 0 {
                return Err(Error::config(key(name), "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                key("n_heads"),
                format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        if self.fourier_dim < 2 || !self.fourier_dim.is_multiple_of(2) {
            return Err(Error::config(key("fourier_dim"), "must be even and at least 2"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config(key("init_std"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Dense,
    pub wk: Dense,
    pub wv: Dense,
    pub wo: Dense,
    pub ln2: LayerNorm,
    pub ff1: Dense,
    pub ff2: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub adapter: Dense,
    pub cls: Array1<f64>,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
    pub n_heads: usize,
}

/// CLS-query attention rows: `rows[layer][head]` has one weight per key
/// (index 0 is the CLS token itself).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub rows: Vec<Vec<Array1<f64>>>,
}

impl AttentionRecord {
    pub fn num_layers(&self) -> usize {
        self.rows.len()
    }

    /// Head-averaged CLS row of `layer`.
    pub fn head_mean(&self, layer: usize) -> Array1<f64> {
        let heads = &self.rows[layer];
        let mut acc = Array1::zeros(heads[0].len());
        for h in heads {
            acc += h;
        }
        acc / heads.len() as f64
    }
}

struct BlockCache {
    ln1: LayerNormCache,
    xn1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LayerNormCache,
    xn2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

/// Forward state of one encoded sequence.
pub struct EncodeTrace {
    pub h: Array1<f64>,
    pub attention: AttentionRecord,
    tokens: Array2<f64>,
    pos: PosEmbedCache,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
}

impl Block {
    fn init(d_model: usize, ffn: usize, std: f64, rng: &mut RandomSource) -> Self {
        Self {
            ln1: LayerNorm::new(d_model),
            wq: Dense::init(d_model, d_model, std, rng),
            wk: Dense::init(d_model, d_model, std, rng),
            wv: Dense::init(d_model, d_model, std, rng),
            wo: Dense::init(d_model, d_model, std, rng),
            ln2: LayerNorm::new(d_model),
            ff1: Dense::init(d_model, ffn, std, rng),
            ff2: Dense::init(ffn, d_model, std, rng),
        }
    }

    /// `valid` is the number of leading rows (CLS included) that may be attended to.
    fn forward(&self, x: &Array2<f64>, n_heads: usize, valid: usize) -> (Array2<f64>, BlockCache) {
        let (t, dm) = x.dim();
        let dh = dm / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (xn1, ln1) = self.ln1.forward(x.view());
        let q = self.wq.forward(xn1.view());
        let k = self.wk.forward(xn1.view());
        let v = self.wv.forward(xn1.view());
        let mut o = Array2::zeros((t, dm));
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t());
            a *= scale;
            nn::softmax_rows_masked(&mut a, valid);
            o.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            probs.push(a);
        }
        let mut x1 = self.wo.forward(o.view());
        x1 += x;
        let (xn2, ln2) = self.ln2.forward(x1.view());
        let pre_act = self.ff1.forward(xn2.view());
        let act = nn::gelu_forward(&pre_act);
        let mut out = self.ff2.forward(act.view());
        out += &x1;
        let cache = BlockCache {
            ln1,
            xn1,
            q,
            k,
            v,
            probs,
            o,
            ln2,
            xn2,
            pre_act,
            act,
        };
        (out, cache)
    }

    fn backward(&self, c: &BlockCache, dout: Array2<f64>, n_heads: usize, grad: &mut Block) -> Array2<f64> {
        let dm = dout.ncols();
        let dh = dm / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let dact = self.ff2.backward(c.act.view(), dout.view(), &mut grad.ff2);
        let dpre = nn::gelu_backward(&c.pre_act, dact.view());
        let dxn2 = self.ff1.backward(c.xn2.view(), dpre.view(), &mut grad.ff1);
        let mut dx1 = self.ln2.backward(&c.ln2, dxn2.view(), &mut grad.ln2);
        dx1 += &dout;

        let d_o = self.wo.backward(c.o.view(), dx1.view(), &mut grad.wo);
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, a) in c.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let doh = d_o.slice(cols);
            let da = doh.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&doh));
            let mut ds = &da * a;
            for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                let inner = row.sum();
                row.zip_mut_with(&arow, |g, &p| *g -= p * inner);
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let mut dxn1 = self.wq.backward(c.xn1.view(), dq.view(), &mut grad.wq);
        dxn1 += &self.wk.backward(c.xn1.view(), dk.view(), &mut grad.wk);
        dxn1 += &self.wv.backward(c.xn1.view(), dv.view(), &mut grad.wv);
        let mut dx = self.ln1.backward(&c.ln1, dxn1.view(), &mut grad.ln1);
        dx += &dx1;
        dx
    }
}

impl Params for Block {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        self.ln1.collect(&nn::join(prefix, "ln1"), out);
        self.wq.collect(&nn::join(prefix, "wq"), out);
        self.wk.collect(&nn::join(prefix, "wk"), out);
        self.wv.collect(&nn::join(prefix, "wv"), out);
        self.wo.collect(&nn::join(prefix, "wo"), out);
        self.ln2.collect(&nn::join(prefix, "ln2"), out);
        self.ff1.collect(&nn::join(prefix, "ff1"), out);
        self.ff2.collect(&nn::join(prefix, "ff2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<&'a mut [f64]>) {
        self.ln1.collect_mut(prefix, out);
        self.wq.collect_mut(prefix, out);
        self.wk.collect_mut(prefix, out);
        self.wv.collect_mut(prefix, out);
        self.wo.collect_mut(prefix, out);
        self.ln2.collect_mut(prefix, out);
        self.ff1.collect_mut(prefix, out);
        self.ff2.collect_mut(prefix, out);
    }
}

impl Encoder {
    pub fn init(d_in: usize, cfg: &ModelConfig, rng: &mut RandomSource) -> Self {
        let std = cfg.init_std;
        Self {
            adapter: Dense::init(d_in, cfg.d_model, std, rng),
            cls: Array1::from_shape_simple_fn(cfg.d_model, || std * rng.normal()),
            blocks: (0..cfg.n_layers)
                .map(|_| Block::init(cfg.d_model, cfg.ffn_mult * cfg.d_model, std, rng))
                .collect(),
            final_ln: LayerNorm::new(cfg.d_model),
            n_heads: cfg.n_heads,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.adapter.input_dim()
    }

    pub fn d_model(&self) -> usize {
        self.cls.len()
    }

    /// Encodes a token sequence. Rows at or beyond `n_valid` are padding:
    /// they are never attended to and receive no gradient.
    pub fn forward(
        &self,
        pos: &PosEmbed,
        tokens: ArrayView2<f64>,
        coords: ArrayView2<f64>,
        n_valid: usize,
    ) -> Result<EncodeTrace> {
        if tokens.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "tokens have width {} but the encoder expects {}",
                tokens.ncols(),
                self.input_dim()
            )));
        }
        if tokens.nrows() == 0 || n_valid == 0 || n_valid > tokens.nrows() || coords.nrows() != tokens.nrows() {
            return Err(Error::Shape(format!(
                "{} tokens, {} coords, {} valid",
                tokens.nrows(),
                coords.nrows(),
                n_valid
            )));
        }
        let (pos_out, pos_cache) = pos.forward(coords);
        let k = tokens.nrows();
        let dm = self.d_model();
        let mut x = Array2::zeros((k + 1, dm));
        x.row_mut(0).assign(&self.cls);
        {
            let mut body = x.slice_mut(s![1.., ..]);
            body.assign(&self.adapter.forward(tokens));
            body += &pos_out;
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut rows = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&x, self.n_heads, n_valid + 1);
            rows.push(cache.probs.iter().map(|a| a.row(0).to_owned()).collect());
            caches.push(cache);
            x = next;
        }
        let (hn, final_ln) = self.final_ln.forward(x.slice(s![0..1, ..]));
        Ok(EncodeTrace {
            h: hn.row(0).to_owned(),
            attention: AttentionRecord { rows },
            tokens: tokens.to_owned(),
            pos: pos_cache,
            blocks: caches,
            final_ln,
        })
    }

    /// Accumulates gradients of a loss with `∂L/∂h = dh` into `grad` and `grad_pos`.
    pub fn backward(
        &self,
        pos: &PosEmbed,
        trace: &EncodeTrace,
        dh: ArrayView1<f64>,
        grad: &mut Encoder,
        grad_pos: &mut PosEmbed,
    ) {
        let dm = self.d_model();
        let t = trace.tokens.nrows() + 1;
        let dhn = dh.to_owned().insert_axis(Axis(0));
        let d_cls_final = self.final_ln.backward(&trace.final_ln, dhn.view(), &mut grad.final_ln);
        let mut dx = Array2::zeros((t, dm));
        dx.row_mut(0).assign(&d_cls_final.row(0));
        for ((block, cache), g) in self
            .blocks
            .iter()
            .zip(&trace.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            dx = block.backward(cache, dx, self.n_heads, g);
        }
        grad.cls += &dx.row(0);
        let dbody = dx.slice(s![1.., ..]);
        self.adapter
            .backward_params(trace.tokens.view(), dbody, &mut grad.adapter);
        pos.backward(&trace.pos, dbody, grad_pos);
    }
}

impl Params for Encoder {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        self.adapter.collect(&nn::join(prefix, "adapter"), out);
        nn::push_vector(out, prefix, "cls", &self.cls);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&nn::join(prefix, &format!("blocks.{i}")), out);
        }
        self.final_ln.collect(&nn::join(prefix, "final_ln"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<&'a mut [f64]>) {
        self.adapter.collect_mut(prefix, out);
        out.push(nn::vector_mut(&mut self.cls));
        for b in &mut self.blocks {
            b.collect_mut(prefix, out);
        }
        self.final_ln.collect_mut(prefix, out);
    }
}

/// Encodes the tokens of `view` and returns the slide representation and
/// CLS attention rows.
pub fn encode(view: &TokenView, bag: &SlideBag, encoder: &Encoder, pos: &PosEmbed) -> Result<(Array1<f64>, AttentionRecord)> {
    let trace = encode_view(view, bag, encoder, pos)?;
    Ok((trace.h, trace.attention))
}

/// [`encode`] keeping the forward state for a backward pass.
pub fn encode_view(view: &TokenView, bag: &SlideBag, encoder: &Encoder, pos: &PosEmbed) -> Result<EncodeTrace> {
    view.validate(bag)?;
    if bag.dim() != encoder.input_dim() {
        return Err(Error::Shape(format!(
            "bag `{}` has d={} but the encoder expects {}",
            bag.slide_id,
            bag.dim(),
            encoder.input_dim()
        )));
    }
    let tokens = bag.select_embeddings(&view.indices);
    let coords = bag.coords_matrix(&view.indices);
    encoder.forward(pos, tokens.view(), coords.view(), view.len())
}

/// Projection head, plus a predictor for BYOL.
///
/// Contrastive and VICReg objectives use a two-layer projection
/// (`dense → GELU → dense`); BYOL uses a one-layer projection followed by a
/// one-layer predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub proj1: Dense,
    pub proj2: Option<Dense>,
    pub pred: Option<Dense>,
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub z: Array2<f64>,
    pub p: Option<Array2<f64>>,
}

pub struct HeadCache {
    h: Array2<f64>,
    pre_act: Option<Array2<f64>>,
    act: Option<Array2<f64>>,
    z: Array2<f64>,
}

impl Heads {
    pub fn init(objective: ObjectiveKind, cfg: &ModelConfig, rng: &mut RandomSource) -> Self {
        let std = cfg.init_std.max(1.0 / (cfg.d_model as f64).sqrt());
        if objective == ObjectiveKind::Byol {
            let proj1 = Dense::init(cfg.d_model, cfg.d_proj, std, rng);
            let pred = Dense::init(cfg.d_proj, cfg.d_proj, 1.0 / (cfg.d_proj as f64).sqrt(), rng);
            Self {
                proj1,
                proj2: None,
                pred: Some(pred),
            }
        } else {
            let proj1 = Dense::init(cfg.d_model, cfg.proj_hidden, std, rng);
            let proj2 = Dense::init(cfg.proj_hidden, cfg.d_proj, 1.0 / (cfg.proj_hidden as f64).sqrt(), rng);
            Self {
                proj1,
                proj2: Some(proj2),
                pred: None,
            }
        }
    }

    pub fn check_objective(&self, objective: ObjectiveKind) -> Result<()> {
        let ok = match objective {
            ObjectiveKind::Byol => self.proj2.is_none() && self.pred.is_some(),
            _ => self.proj2.is_some() && self.pred.is_none(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!("head layout does not match objective {objective:?}")))
        }
    }

    /// Applies the heads row-wise to a batch of representations.
    pub fn forward(&self, h: ArrayView2<f64>, objective: ObjectiveKind) -> Result<(HeadOutput, HeadCache)> {
        self.check_objective(objective)?;
        if h.ncols() != self.proj1.input_dim() {
            return Err(Error::Shape(format!(
                "representation width {} but head expects {}",
                h.ncols(),
                self.proj1.input_dim()
            )));
        }
        let first = self.proj1.forward(h);
        let (z, pre_act, act) = match &self.proj2 {
            Some(p2) => {
                let act = nn::gelu_forward(&first);
                (p2.forward(act.view()), Some(first), Some(act))
            }
            None => (first, None, None),
        };
        let p = self.pred.as_ref().map(|pr| pr.forward(z.view()));
        let cache = HeadCache {
            h: h.to_owned(),
            pre_act,
            act,
            z: z.clone(),
        };
        Ok((HeadOutput { z, p }, cache))
    }

    /// Gradient w.r.t. the input representations. `dz` and `dp` are the
    /// loss gradients w.r.t. the projection and prediction outputs.
    pub fn backward(
        &self,
        cache: &HeadCache,
        dz: Option<ArrayView2<f64>>,
        dp: Option<ArrayView2<f64>>,
        grad: &mut Heads,
    ) -> Array2<f64> {
        let mut dz_total = match dz {
            Some(d) => d.to_owned(),
            None => Array2::zeros(cache.z.raw_dim()),
        };
        if let (Some(pred), Some(dp), Some(gp)) = (&self.pred, dp, grad.pred.as_mut()) {
            dz_total += &pred.backward(cache.z.view(), dp, gp);
        }
        let dfirst = match (&self.proj2, grad.proj2.as_mut()) {
            (Some(p2), Some(g2)) => {
                let act = cache.act.as_ref().expect("two-layer cache");
                let dact = p2.backward(act.view(), dz_total.view(), g2);
                nn::gelu_backward(cache.pre_act.as_ref().expect("two-layer cache"), dact.view())
            }
            _ => dz_total,
        };
        self.proj1.backward(cache.h.view(), dfirst.view(), &mut grad.proj1)
    }
}

/// Row-wise head application on a single representation.
pub fn apply_heads(h: ArrayView1<f64>, heads: &Heads, objective: ObjectiveKind) -> Result<HeadOutput> {
    let (out, _) = heads.forward(h.insert_axis(Axis(0)), objective)?;
    Ok(out)
}

impl Params for Heads {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        self.proj1.collect(&nn::join(prefix, "proj1"), out);
        if let Some(p) = &self.proj2 {
            p.collect(&nn::join(prefix, "proj2"), out);
        }
        if let Some(p) = &self.pred {
            p.collect(&nn::join(prefix, "pred"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<&'a mut [f64]>) {
        self.proj1.collect_mut(prefix, out);
        if let Some(p) = &mut self.proj2 {
            p.collect_mut(prefix, out);
        }
        if let Some(p) = &mut self.pred {
            p.collect_mut(prefix, out);
        }
    }
}
