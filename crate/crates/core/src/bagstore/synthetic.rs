//! Synthetic slide datasets with planted, spatially clustered phenotypes.
//!
//! Every phenotype is a Gaussian cloud around a center shared by all
//! classes; classes differ only in how often each phenotype occurs. Centers
//! come in antipodal pairs (`+s·u`, `-s·u`) along orthonormal directions, so
//! a class that uses both members of a pair equally contributes nothing to
//! the mean embedding: part of the class signal is invisible to mean pooling
//! and only recoverable from the token distribution. With an odd number of
//! phenotypes the unpaired last one sits at the origin. Within a bag, each
//! phenotype occupies one contiguous angular wedge of the occupied grid
//! cells, so crops see region-specific content.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dataset, SlideBag, SplitTag};
use crate::error::{Error, Result};
use crate::rng::{stream, RandomSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub bags_per_class: usize,
    pub grid_side: usize,
    pub tokens_per_bag: usize,
    pub d: usize,
    pub num_phenotypes: usize,
    pub phenotype_separation: f64,
    /// `num_classes` rows of `num_phenotypes` proportions, each summing to 1.
    pub class_mixture: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    /// Fraction of each class's bags assigned to the validation split.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            bags_per_class: 150,
            grid_side: 20,
            tokens_per_bag: 256,
            d: 16,
            num_phenotypes: 5,
            phenotype_separation: 2.0,
            class_mixture: vec![
                vec![0.35, 0.25, 0.05, 0.05, 0.30],
                vec![0.05, 0.05, 0.35, 0.25, 0.30],
                vec![0.175, 0.175, 0.175, 0.175, 0.30],
            ],
            noise_sigma: 1.0,
            val_fraction: 1.0 / 3.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("data.{k}");
        let positive = [
            ("num_classes", self.num_classes),
            ("bags_per_class", self.bags_per_class),
            ("grid_side", self.grid_side),
            ("tokens_per_bag", self.tokens_per_bag),
            ("d", self.d),
            ("num_phenotypes", self.num_phenotypes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(key(name), "must be at least 1"));
            }
        }
        let cells = self.grid_side.saturating_mul(self.grid_side);
        if self.tokens_per_bag > cells {
            return Err(Error::config(
                key("tokens_per_bag"),
                format!(
                    "{} tokens do not fit on a {}x{} grid",
                    self.tokens_per_bag, self.grid_side, self.grid_side
                ),
            ));
        }
        if !(self.phenotype_separation >= 0.0 && self.phenotype_separation.is_finite()) {
            return Err(Error::config(key("phenotype_separation"), "must be finite and >= 0"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(key("noise_sigma"), "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config(key("val_fraction"), "must lie in [0, 1)"));
        }
        if self.class_mixture.len() != self.num_classes {
            return Err(Error::config(
                key("class_mixture"),
                format!("expected {} rows, found {}", self.num_classes, self.class_mixture.len()),
            ));
        }
        for (c, row) in self.class_mixture.iter().enumerate() {
            if row.len() != self.num_phenotypes {
                return Err(Error::config(
                    key("class_mixture"),
                    format!("row {c} has {} entries, expected {}", row.len(), self.num_phenotypes),
                ));
            }
            if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                return Err(Error::config(key("class_mixture"), format!("row {c} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::config(key("class_mixture"), format!("row {c} sums to {sum}, not 1")));
            }
        }
        Ok(())
    }

    /// Phenotypes whose proportion is the same in every class. They carry no
    /// class information.
    pub fn noise_phenotypes(&self) -> Vec<usize> {
        (0..self.num_phenotypes)
            .filter(|&k| {
                let first = self.class_mixture[0][k];
                self.class_mixture.iter().all(|row| (row[k] - first).abs() < 1e-12)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticOutput {
    pub train: Dataset,
    pub val: Dataset,
    /// Ground-truth phenotype of every token, keyed by slide id, in bag row order.
    pub phenotypes: BTreeMap<String, Vec<usize>>,
    /// `num_phenotypes × d` phenotype centers.
    pub centers: Array2<f64>,
    pub noise_phenotypes: Vec<usize>,
}

fn phenotype_centers(spec: &SyntheticSpec, rng: &mut RandomSource) -> Array2<f64> {
    let d = spec.d;
    let pairs = spec.num_phenotypes / 2;
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        // Orthogonalize while there is room; beyond d directions they stay random.
        if dirs.len() < d {
            for u in &dirs {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        dirs.push(v);
    }
    Array2::from_shape_fn((spec.num_phenotypes, d), |(k, j)| {
        if k / 2 == pairs {
            return 0.0;
        }
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sign * spec.phenotype_separation * dirs[k / 2][j]
    })
}

fn generate_bag(
    spec: &SyntheticSpec,
    centers: &Array2<f64>,
    class: usize,
    index: usize,
    slide_id: String,
) -> (SlideBag, Vec<usize>) {
    let mut rng = RandomSource::derive(spec.seed, &[stream::GENERATOR, class as u64, index as u64]);
    let side = spec.grid_side;
    let n = spec.tokens_per_bag;

    let cells = rng.subset(side * side, n);
    let mut coords: Vec<[i32; 2]> = cells
        .iter()
        .map(|&c| [(c / side) as i32, (c % side) as i32])
        .collect();

    let mut counts = vec![0usize; spec.num_phenotypes];
    for _ in 0..n {
        counts[rng.categorical(&spec.class_mixture[class])] += 1;
    }
    let mut order: Vec<usize> = (0..spec.num_phenotypes).collect();
    rng.shuffle(&mut order);

    // Sweep the occupied cells by angle around a random focus; consecutive
    // runs of the sweep become single-phenotype wedges.
    let focus = [rng.uniform() * side as f64, rng.uniform() * side as f64];
    let rotation = rng.uniform() * std::f64::consts::TAU;
    let angle = |c: &[i32; 2]| {
        let a = (c[0] as f64 + 0.5 - focus[0]).atan2(c[1] as f64 + 0.5 - focus[1]);
        (a + rotation).rem_euclid(std::f64::consts::TAU)
    };
    coords.sort_by(|a, b| angle(a).total_cmp(&angle(b)).then(a.cmp(b)));

    let mut phenotypes = Vec::with_capacity(n);
    for &k in &order {
        phenotypes.extend(std::iter::repeat_n(k, counts[k]));
    }

    let embeddings = Array2::from_shape_fn((n, spec.d), |(i, j)| {
        centers[[phenotypes[i], j]] + spec.noise_sigma * rng.normal()
    });

    // Store rows in a shuffled order so row order carries no spatial signal.
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let embeddings = embeddings.select(ndarray::Axis(0), &perm);
    let coords = perm.iter().map(|&i| coords[i]).collect();
    let phenotypes = perm.iter().map(|&i| phenotypes[i]).collect();

    let bag = SlideBag {
        slide_id,
        embeddings,
        coords,
        label: Some(class as u32),
    };
    (bag, phenotypes)
}

/// Generates train and validation datasets. Deterministic in `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticOutput> {
    spec.validate()?;
    let mut rng = RandomSource::derive(spec.seed, &[stream::GENERATOR]);
    let centers = phenotype_centers(spec, &mut rng);

    let n_val = (spec.bags_per_class as f64 * spec.val_fraction).round() as usize;
    let n_train = spec.bags_per_class - n_val;
    let class_names: Vec<String> = (0..spec.num_classes).map(|c| format!("class{c}")).collect();

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut phenotypes = BTreeMap::new();
    for class in 0..spec.num_classes {
        for index in 0..spec.bags_per_class {
            let id = format!("syn-c{class}-{index:04}");
            let (bag, ph) = generate_bag(spec, &centers, class, index, id.clone());
            phenotypes.insert(id, ph);
            if index < n_train {
                train.push(bag);
            } else {
                val.push(bag);
            }
        }
    }
    Ok(SyntheticOutput {
        train: Dataset::new(train, Some(class_names.clone()), SplitTag::Train)?,
        val: Dataset::new(val, Some(class_names), SplitTag::Val)?,
        phenotypes,
        centers,
        noise_phenotypes: spec.noise_phenotypes(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            bags_per_class: 6,
            grid_side: 8,
            tokens_per_bag: 40,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
    }

    #[test]
    fn disjoint_splits_and_sizes() {
        let out = generate_synthetic(&small()).unwrap();
        assert_eq!(out.train.len(), 12);
        assert_eq!(out.val.len(), 6);
        for v in &out.val.bags {
            assert!(out.train.bags.iter().all(|t| t.slide_id != v.slide_id));
        }
    }

    #[test]
    fn infeasible_token_count() {
        let spec = SyntheticSpec {
            grid_side: 4,
            tokens_per_bag: 17,
            ..small()
        };
        let err = generate_synthetic(&spec).unwrap_err();
        assert!(err.to_string().contains("tokens_per_bag"));
    }

    #[test]
    fn mixture_must_sum_to_one() {
        let mut spec = small();
        spec.class_mixture[1][0] += 0.1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn antipodal_centers() {
        let out = generate_synthetic(&small()).unwrap();
        let c = &out.centers;
        for j in 0..c.ncols() {
            assert!((c[[0, j]] + c[[1, j]]).abs() < 1e-12);
        }
        let norm: f64 = c.row(0).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 2.0).abs() < 1e-9);
        let dot: f64 = c.row(0).iter().zip(c.row(2).iter()).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-9);
        assert!(c.row(4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_phenotype_is_the_shared_one() {
        assert_eq!(SyntheticSpec::default().noise_phenotypes(), vec![4]);
    }

    #[test]
    fn phenotypes_form_angular_wedges() {
        // Each phenotype's cells must be contiguous in the angular sweep, so
        // on average a token's nearest occupied neighbours mostly share its phenotype.
        let out = generate_synthetic(&small()).unwrap();
        let bag = &out.train.bags[0];
        let ph = &out.phenotypes[&bag.slide_id];
        let mut same = 0usize;
        let mut total = 0usize;
        for i in 0..bag.len() {
            for j in 0..bag.len() {
                let (a, b) = (bag.coords[i], bag.coords[j]);
                if i != j && (a[0] - b[0]).abs() <= 1 && (a[1] - b[1]).abs() <= 1 {
                    total += 1;
                    same += usize::from(ph[i] == ph[j]);
                }
            }
        }
        assert!(same as f64 / total as f64 > 0.6, "{same}/{total}");
    }
}
