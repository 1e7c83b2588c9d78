#![allow(dead_code)]

use std::collections::HashSet;

use ndarray::Array2;
use slidessl::transforms::{self, crop, mask, mask_size, split, split_size};
use slidessl::{RandomSource, SlideBag, TokenView, TransformConfig};

/// Bag of `n` tokens on distinct cells of a `side × side` grid.
pub fn random_bag(id: &str, n: usize, side: usize, d: usize, label: Option<u32>, rng: &mut RandomSource) -> SlideBag {
    assert!(n <= side * side);
    let cells = rng.subset(side * side, n);
    let mut coords: Vec<[i32; 2]> = cells
        .iter()
        .map(|&c| [(c / side) as i32, (c % side) as i32])
        .collect();
    rng.shuffle(&mut coords);
    let emb = Array2::from_shape_fn((n, d), |_| rng.normal());
    SlideBag::new(id, emb, coords, label).unwrap()
}

pub fn random_transform_config(n: usize, rng: &mut RandomSource) -> TransformConfig {
    let area_lo = rng.uniform_in(0.0, 60.0);
    let aspect_lo = rng.uniform_in(0.25, 2.0);
    let mask_lo = rng.uniform_in(0.01, 1.0);
    TransformConfig {
        use_split: n >= 2 && rng.uniform() < 0.7,
        split_ratio: rng.uniform_in(0.05, 0.95),
        use_crop: rng.uniform() < 0.6,
        crop_area_range: [area_lo, area_lo + rng.uniform_in(0.0, 200.0)],
        crop_aspect_range: [aspect_lo, aspect_lo + rng.uniform_in(0.0, 2.0)],
        use_mask: rng.uniform() < 0.6,
        mask_ratio_range: [mask_lo, mask_lo + rng.uniform_in(0.0, 1.0 - mask_lo)],
        max_token_limit: (rng.uniform() < 0.5).then(|| 1 + rng.below(80)),
    }
}

fn is_subsequence(sub: &[usize], of: &[usize]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|x| it.any(|y| y == x))
}

/// Runs one randomized trial of every transformation and returns the
/// first invariant violation, if any.
pub fn transform_trial(trial: u64) -> Result<(), String> {
    let mut rng = RandomSource::derive(0xACCE, &[trial]);
    let side = 2 + rng.below(23);
    let n = 1 + rng.below((side * side).min(96));
    let bag = random_bag("trial", n, side, 2, None, &mut rng);
    let cfg = random_transform_config(n, &mut rng);
    let full = TokenView::full(&bag);

    // split alone: exact partition with the floor/clamp sizes
    if n >= 2 {
        let ratio = cfg.split_ratio;
        let (a, b) = split(&full, ratio, &mut rng).map_err(|e| e.to_string())?;
        let k = split_size(n, ratio);
        if a.len() != k || b.len() != n - k {
            return Err(format!("split sizes {}+{} for n={n} ratio={ratio}", a.len(), b.len()));
        }
        let sa: HashSet<_> = a.indices.iter().collect();
        if b.indices.iter().any(|i| sa.contains(i)) {
            return Err("split views intersect".into());
        }
        let mut all: Vec<usize> = a.indices.iter().chain(&b.indices).copied().collect();
        all.sort_unstable();
        if all != full.indices {
            return Err("split union differs from input".into());
        }
    }

    // crop: exactly the input tokens inside a window of the drawn shape
    let sub = if n >= 2 { split(&full, 0.5, &mut rng).unwrap().0 } else { full.clone() };
    let (cropped, w) = crop(&sub, &bag, cfg.crop_area_range, cfg.crop_aspect_range, &mut rng).map_err(|e| e.to_string())?;
    let (h, wd) = (w.r1 - w.r0, w.c1 - w.c0);
    let area = h * wd;
    let aspect = if h > 0.0 { wd / h } else { cfg.crop_aspect_range[0] };
    let tol = 1e-9 * (1.0 + cfg.crop_area_range[1]);
    if area < cfg.crop_area_range[0] - tol || area > cfg.crop_area_range[1] + tol {
        return Err(format!("crop area {area} outside {:?}", cfg.crop_area_range));
    }
    if h > 0.0 && (aspect < cfg.crop_aspect_range[0] - 1e-9 || aspect > cfg.crop_aspect_range[1] + 1e-9) {
        return Err(format!("crop aspect {aspect} outside {:?}", cfg.crop_aspect_range));
    }
    let expected: Vec<usize> = sub.indices.iter().copied().filter(|&i| w.contains(bag.coords[i])).collect();
    if cropped.indices != expected {
        return Err("crop kept a token outside the window or dropped one inside".into());
    }
    let center = [((w.r0 + w.r1) / 2.0).round() as i32, ((w.c0 + w.c1) / 2.0).round() as i32];
    if !cropped.indices.iter().any(|&i| bag.coords[i] == center) {
        return Err("crop anchor did not survive".into());
    }
    if cropped.len() > sub.len() {
        return Err("crop grew the view".into());
    }

    // mask: size rule, limit, order-preserving subset
    let masked = mask(&sub, cfg.mask_ratio_range, cfg.max_token_limit, &mut rng).map_err(|e| e.to_string())?;
    let lo = mask_size(sub.len(), cfg.mask_ratio_range[0], cfg.max_token_limit);
    let hi = mask_size(sub.len(), cfg.mask_ratio_range[1], cfg.max_token_limit);
    if masked.len() < lo || masked.len() > hi || masked.is_empty() {
        return Err(format!("mask kept {} outside [{lo}, {hi}]", masked.len()));
    }
    if cfg.max_token_limit.is_some_and(|l| masked.len() > l) || masked.len() > sub.len() {
        return Err("mask exceeded its limit".into());
    }
    if !is_subsequence(&masked.indices, &sub.indices) {
        return Err("mask output is not an ordered subset".into());
    }

    // full pipeline: valid, disjoint under split, deterministic
    let seed = rng.below(1 << 30) as u64;
    let (a, b) = transforms::make_view_pair(&bag, &cfg, &mut RandomSource::new(seed)).map_err(|e| e.to_string())?;
    let again = transforms::make_view_pair(&bag, &cfg, &mut RandomSource::new(seed)).unwrap();
    if (a.clone(), b.clone()) != again {
        return Err("view pair is not deterministic".into());
    }
    for v in [&a, &b] {
        v.validate(&bag).map_err(|e| e.to_string())?;
        if cfg.use_mask && cfg.max_token_limit.is_some_and(|l| v.len() > l) {
            return Err("pipeline view exceeds the token limit".into());
        }
    }
    if cfg.use_split {
        let sa: HashSet<_> = a.indices.iter().collect();
        if b.indices.iter().any(|i| sa.contains(i)) {
            return Err("split pipeline views intersect".into());
        }
        if !cfg.use_crop && !cfg.use_mask && a.len() + b.len() != n {
            return Err("split-only pipeline lost tokens".into());
        }
    } else if !cfg.use_crop && !cfg.use_mask && (a != full || b != full) {
        return Err("identity pipeline changed the view".into());
    }
    Ok(())
}

/// Number of views of `n` tokens with `k` in the first part.
pub fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// χ² test of uniformity of `split(n, 0.5)` partitions over `draws` draws;
/// returns the p-value.
pub fn split_uniformity_p(n: usize, draws: usize, seed: u64) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let view = TokenView {
        source_id: "u".into(),
        indices: (0..n).collect(),
    };
    let k = split_size(n, 0.5);
    let cells = binomial(n, k);
    let mut counts = std::collections::HashMap::<u32, usize>::new();
    let mut rng = RandomSource::new(seed);
    for _ in 0..draws {
        let (a, _) = split(&view, 0.5, &mut rng).unwrap();
        let mask = a.indices.iter().fold(0u32, |m, &i| m | (1 << i));
        *counts.entry(mask).or_default() += 1;
    }
    assert!(counts.len() <= cells);
    let expected = draws as f64 / cells as f64;
    let observed: Vec<usize> = counts.values().copied().chain(std::iter::repeat_n(0, cells - counts.len())).collect();
    let stat: f64 = observed.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    if cells == 1 {
        return 1.0;
    }
    1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat)
}

fn unit_rows(x: &Array2<f64>) -> Vec<Vec<f64>> {
    x.rows()
        .into_iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

fn stacked(a: &Array2<f64>, b: &Array2<f64>) -> Vec<Vec<f64>> {
    let mut rows = unit_rows(a);
    rows.extend(unit_rows(b));
    rows
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Supervised contrastive loss by explicit loops over anchors, positives
/// and the denominator. `groups[i]` is the positive-set id of stacked row `i`.
pub fn naive_contrastive(a: &Array2<f64>, b: &Array2<f64>, groups: &[usize], tau: f64) -> f64 {
    let u = stacked(a, b);
    let m = u.len();
    let (mut total, mut anchors) = (0.0, 0);
    for i in 0..m {
        let mut denom = 0.0;
        for k in 0..m {
            if k != i {
                denom += (dot(&u[i], &u[k]) / tau).exp();
            }
        }
        let (mut sum, mut count) = (0.0, 0);
        for p in 0..m {
            if p != i && groups[p] == groups[i] {
                sum += -((dot(&u[i], &u[p]) / tau).exp() / denom).ln();
                count += 1;
            }
        }
        if count > 0 {
            total += sum / count as f64;
            anchors += 1;
        }
    }
    total / anchors as f64
}

pub fn naive_nt_xent(a: &Array2<f64>, b: &Array2<f64>, tau: f64) -> f64 {
    let n = a.nrows();
    let groups: Vec<usize> = (0..n).chain(0..n).collect();
    naive_contrastive(a, b, &groups, tau)
}

pub fn naive_supcon(a: &Array2<f64>, b: &Array2<f64>, labels: &[u32], tau: f64) -> f64 {
    let groups: Vec<usize> = labels.iter().chain(labels).map(|&l| l as usize).collect();
    naive_contrastive(a, b, &groups, tau)
}

/// Variance hinge and off-diagonal covariance of one branch, both over `d`.
fn naive_vicreg_terms(z: &Array2<f64>, gamma: f64, eps: f64) -> (f64, f64) {
    let (n, d) = z.dim();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += z[[i, j]] / n as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for p in 0..d {
        for q in 0..d {
            let mut s = 0.0;
            for i in 0..n {
                s += (z[[i, p]] - mean[p]) * (z[[i, q]] - mean[q]);
            }
            cov[p][q] = s / (n as f64 - 1.0);
        }
    }
    let mut var = 0.0;
    let mut off = 0.0;
    for p in 0..d {
        var += (gamma - (cov[p][p] + eps).sqrt()).max(0.0);
        for q in 0..d {
            if p != q {
                off += cov[p][q] * cov[p][q];
            }
        }
    }
    (var / d as f64, off / d as f64)
}

pub fn naive_vicreg(a: &Array2<f64>, b: &Array2<f64>, w: &slidessl::objectives::VicregWeights) -> f64 {
    let (n, d) = a.dim();
    let mut inv = 0.0;
    for i in 0..n {
        for j in 0..d {
            inv += (a[[i, j]] - b[[i, j]]).powi(2);
        }
    }
    inv /= (n * d) as f64;
    let (va, ca) = naive_vicreg_terms(a, w.gamma, w.eps);
    let (vb, cb) = naive_vicreg_terms(b, w.gamma, w.eps);
    w.lambda * inv + w.mu * (va + vb) / 2.0 + w.nu * (ca + cb) / 2.0
}

pub struct LossBatch {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub labels: Vec<u32>,
    pub tau: f64,
}

/// Random batch with `2 ≤ N ≤ 16` rows; labels drawn from at most 4 classes.
pub fn random_loss_batch(seed: u64) -> LossBatch {
    let mut rng = RandomSource::derive(0x1055, &[seed]);
    let n = 2 + rng.below(15);
    let d = 2 + rng.below(12);
    let scale = rng.uniform_in(0.1, 3.0);
    let a = Array2::from_shape_fn((n, d), |_| scale * rng.normal());
    let b = Array2::from_shape_fn((n, d), |_| scale * rng.normal());
    let classes = 1 + rng.below(4);
    let labels = (0..n).map(|_| rng.below(classes) as u32).collect();
    LossBatch {
        a,
        b,
        labels,
        tau: rng.uniform_in(0.1, 1.0),
    }
}

pub fn vicreg_weights_for(seed: u64) -> slidessl::objectives::VicregWeights {
    let mut rng = RandomSource::derive(0x71C, &[seed]);
    slidessl::objectives::VicregWeights {
        lambda: rng.uniform_in(0.0, 30.0),
        mu: rng.uniform_in(0.0, 30.0),
        nu: rng.uniform_in(0.0, 3.0),
        gamma: rng.uniform_in(0.5, 2.0),
        eps: 1e-4,
    }
}

/// Largest deviation of the library losses from the loop references over
/// `batches` random batches: (nt_xent, supcon, vicreg, supcon-vs-nt_xent
/// with distinct labels).
pub fn loss_oracle_deviation(batches: u64) -> [f64; 4] {
    use slidessl::objectives::{nt_xent, supcon, vicreg};
    let mut worst = [0.0f64; 4];
    for s in 0..batches {
        let bt = random_loss_batch(s);
        let w = vicreg_weights_for(s);
        let nt = nt_xent(bt.a.view(), bt.b.view(), bt.tau).unwrap().loss;
        let sc = supcon(bt.a.view(), bt.b.view(), &bt.labels, bt.tau).unwrap().loss;
        let vr = vicreg(bt.a.view(), bt.b.view(), &w).unwrap().loss;
        let distinct: Vec<u32> = (0..bt.a.nrows() as u32).collect();
        let sd = supcon(bt.a.view(), bt.b.view(), &distinct, bt.tau).unwrap().loss;
        let dev = [
            (nt - naive_nt_xent(&bt.a, &bt.b, bt.tau)).abs(),
            (sc - naive_supcon(&bt.a, &bt.b, &bt.labels, bt.tau)).abs(),
            (vr - naive_vicreg(&bt.a, &bt.b, &w)).abs(),
            (sd - nt).abs(),
        ];
        for (w, d) in worst.iter_mut().zip(dev) {
            *w = w.max(d);
        }
    }
    worst
}
