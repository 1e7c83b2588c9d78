//! View generation by row selection: splitting, cropping and masking.
//!
//! All three act on index lists into a [`SlideBag`]; embeddings are never
//! copied until a view is encoded. [`make_view_pair`] chains them as
//! split → crop → mask, drawing crop and mask parameters independently for
//! each view.

use serde::{Deserialize, Serialize};

use crate::bagstore::SlideBag;
use crate::error::{Error, Result};
use crate::rng::RandomSource;

/// An ordered selection of rows from one bag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenView {
    pub source_id: String,
    pub indices: Vec<usize>,
}

impl TokenView {
    /// Every row of `bag`, in storage order.
    pub fn full(bag: &SlideBag) -> Self {
        Self {
            source_id: bag.slide_id.clone(),
            indices: (0..bag.len()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Checks that the view is nonempty with distinct, in-range indices.
    pub fn validate(&self, bag: &SlideBag) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Transform("view is empty".into()));
        }
        let mut seen = vec![false; bag.len()];
        for &i in &self.indices {
            if i >= bag.len() {
                return Err(Error::Transform(format!(
                    "index {i} out of range for bag of {} tokens",
                    bag.len()
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Transform(format!("index {i} repeated")));
            }
        }
        Ok(())
    }

    fn with_indices(&self, indices: Vec<usize>) -> Self {
        Self {
            source_id: self.source_id.clone(),
            indices,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformConfig {
    pub use_split: bool,
    pub split_ratio: f64,
    pub use_crop: bool,
    /// Crop area in grid cells², drawn uniformly.
    pub crop_area_range: [f64; 2],
    pub crop_aspect_range: [f64; 2],
    pub use_mask: bool,
    pub mask_ratio_range: [f64; 2],
    /// Cap on tokens kept by masking; `"none"` in config files means unbounded.
    #[serde(with = "token_limit")]
    pub max_token_limit: Option<usize>,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            use_split: true,
            split_ratio: 0.5,
            use_crop: true,
            crop_area_range: [100.0, 400.0],
            crop_aspect_range: [0.75, 4.0 / 3.0],
            use_mask: true,
            mask_ratio_range: [0.5, 1.0],
            max_token_limit: Some(64),
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("transforms.{k}");
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::config(key("split_ratio"), "must lie in (0, 1)"));
        }
        let [a0, a1] = self.crop_area_range;
        if !(a0 >= 0.0 && a0 <= a1 && a1.is_finite()) {
            return Err(Error::config(key("crop_area_range"), "need 0 <= min <= max"));
        }
        let [s0, s1] = self.crop_aspect_range;
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return Err(Error::config(key("crop_aspect_range"), "need 0 < min <= max"));
        }
        let [m0, m1] = self.mask_ratio_range;
        if !(m0 > 0.0 && m0 <= m1 && m1 <= 1.0) {
            return Err(Error::config(key("mask_ratio_range"), "need 0 < min <= max <= 1"));
        }
        if self.max_token_limit == Some(0) {
            return Err(Error::config(key("max_token_limit"), "must be at least 1"));
        }
        Ok(())
    }
}

mod token_limit {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Count(usize),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(n) => Repr::Count(*n),
            None => Repr::Word("none".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Count(n) => Ok(Some(n)),
            Repr::Word(w) if w == "none" => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!(
                "expected a token count or \"none\", got \"{w}\""
            ))),
        }
    }
}

/// Size of the first view when splitting `n` tokens at `ratio`.
pub fn split_size(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio).floor() as usize).clamp(1, n - 1)
}

/// Partitions `view` uniformly at random into two disjoint nonempty views
/// of sizes `(k, n - k)`, `k = clamp(floor(n·ratio), 1, n-1)`. Relative
/// order of indices is preserved within each part.
pub fn split(view: &TokenView, ratio: f64, rng: &mut RandomSource) -> Result<(TokenView, TokenView)> {
    let n = view.len();
    if n < 2 {
        return Err(Error::Transform(format!("cannot split a view of {n} token(s)")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Transform(format!("split ratio {ratio} outside (0, 1)")));
    }
    let k = split_size(n, ratio);
    let first = rng.subset(n, k);
    let mut in_first = vec![false; n];
    for &p in &first {
        in_first[p] = true;
    }
    let (a, b): (Vec<_>, Vec<_>) = view
        .indices
        .iter()
        .zip(&in_first)
        .partition(|(_, &f)| f);
    Ok((
        view.with_indices(a.into_iter().map(|(&i, _)| i).collect()),
        view.with_indices(b.into_iter().map(|(&i, _)| i).collect()),
    ))
}

/// Closed crop rectangle `[r0, r1] × [c0, c1]` centered on an anchor cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub r0: f64,
    pub r1: f64,
    pub c0: f64,
    pub c1: f64,
}

impl CropWindow {
    /// `H = sqrt(area/aspect)`, `W = H·aspect`, centered on `anchor`.
    pub fn around(anchor: [i32; 2], area: f64, aspect: f64) -> Self {
        let h = (area / aspect).sqrt();
        let w = h * aspect;
        let (r, c) = (anchor[0] as f64, anchor[1] as f64);
        Self {
            r0: r - h / 2.0,
            r1: r + h / 2.0,
            c0: c - w / 2.0,
            c1: c + w / 2.0,
        }
    }

    pub fn contains(&self, p: [i32; 2]) -> bool {
        let (r, c) = (p[0] as f64, p[1] as f64);
        self.r0 <= r && r <= self.r1 && self.c0 <= c && c <= self.c1
    }
}

/// Keeps the tokens of `view` inside `window`, preserving order.
pub fn crop_to_window(view: &TokenView, bag: &SlideBag, window: &CropWindow) -> TokenView {
    view.with_indices(
        view.indices
            .iter()
            .copied()
            .filter(|&i| window.contains(bag.coords[i]))
            .collect(),
    )
}

/// Random crop: area and aspect drawn uniformly from their ranges, centered
/// on a uniformly chosen token of the view. The anchor always survives.
pub fn crop(
    view: &TokenView,
    bag: &SlideBag,
    area_range: [f64; 2],
    aspect_range: [f64; 2],
    rng: &mut RandomSource,
) -> Result<(TokenView, CropWindow)> {
    if view.is_empty() {
        return Err(Error::Transform("cannot crop an empty view".into()));
    }
    let area = rng.uniform_in(area_range[0], area_range[1]);
    let aspect = rng.uniform_in(aspect_range[0], aspect_range[1]);
    let anchor = bag.coords[view.indices[rng.below(view.len())]];
    let window = CropWindow::around(anchor, area, aspect);
    Ok((crop_to_window(view, bag, &window), window))
}

/// Number of tokens masking keeps: `min(max(1, round(n·ratio)), limit)`.
pub fn mask_size(n: usize, ratio: f64, limit: Option<usize>) -> usize {
    let m = ((n as f64 * ratio).round() as usize).clamp(1, n);
    limit.map_or(m, |l| m.min(l))
}

/// Keeps a uniformly random subset of `mask_size(n, ratio, limit)` tokens,
/// ratio drawn from `ratio_range`; relative order is preserved.
pub fn mask(
    view: &TokenView,
    ratio_range: [f64; 2],
    limit: Option<usize>,
    rng: &mut RandomSource,
) -> Result<TokenView> {
    if view.is_empty() {
        return Err(Error::Transform("cannot mask an empty view".into()));
    }
    let ratio = rng.uniform_in(ratio_range[0], ratio_range[1]);
    let m = mask_size(view.len(), ratio, limit);
    let keep = rng.subset(view.len(), m);
    Ok(view.with_indices(keep.into_iter().map(|p| view.indices[p]).collect()))
}

/// Two views of `bag`: split (optional) first, then crop and mask applied to
/// each side with independent draws.
pub fn make_view_pair(
    bag: &SlideBag,
    cfg: &TransformConfig,
    rng: &mut RandomSource,
) -> Result<(TokenView, TokenView)> {
    let full = TokenView::full(bag);
    let (a, b) = if cfg.use_split {
        split(&full, cfg.split_ratio, rng)?
    } else {
        (full.clone(), full)
    };
    let mut shrink = |v: TokenView| -> Result<TokenView> {
        let v = if cfg.use_crop {
            crop(&v, bag, cfg.crop_area_range, cfg.crop_aspect_range, rng)?.0
        } else {
            v
        };
        if cfg.use_mask {
            mask(&v, cfg.mask_ratio_range, cfg.max_token_limit, rng)
        } else {
            Ok(v)
        }
    };
    let a = shrink(a)?;
    let b = shrink(b)?;
    Ok((a, b))
}
