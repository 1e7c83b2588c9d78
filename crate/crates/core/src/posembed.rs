//! Learnable Fourier-feature positional encoding.
//!
//! Grid coordinates `p` are mapped to `γ(p) = [cos(p·W), sin(p·W)] / sqrt(D)`
//! with a learnable `2 × D/2` frequency matrix `W`, then through a
//! two-layer GELU MLP to the model width. Before the MLP the similarity
//! `⟨γ(p), γ(q)⟩ = (1/D)·Σ_j cos((p−q)·w_j)` depends only on the offset
//! `p − q`, which is what lets one encoder handle slides of any size.

use ndarray::{concatenate, Array2, ArrayView2, Axis};

use crate::nn::{self, Dense, Params, TensorRef};
use crate::rng::RandomSource;

#[derive(Debug, Clone, PartialEq)]
pub struct PosEmbed {
    /// `2 × D/2` frequencies in 1/grid-cell.
    pub freq: Array2<f64>,
    pub fc1: Dense,
    pub fc2: Dense,
}

#[derive(Debug, Clone)]
pub struct PosEmbedCache {
    coords: Array2<f64>,
    phase: Array2<f64>,
    features: Array2<f64>,
    pre_act: Array2<f64>,
    hidden: Array2<f64>,
}

/// `[cos(P·W), sin(P·W)] / sqrt(D)` for `k × 2` coordinates `P`.
pub fn fourier_features(coords: ArrayView2<f64>, freq: ArrayView2<f64>) -> Array2<f64> {
    let phase = coords.dot(&freq);
    features_from_phase(&phase)
}

fn features_from_phase(phase: &Array2<f64>) -> Array2<f64> {
    let scale = 1.0 / ((2 * phase.ncols()) as f64).sqrt();
    concatenate![
        Axis(1),
        phase.mapv(|v| v.cos() * scale),
        phase.mapv(|v| v.sin() * scale)
    ]
}

/// Frequency init std; covers both slow and fast variation over grids of
/// up to ~10³ cells.
pub const FREQ_INIT_STD: f64 = std::f64::consts::FRAC_1_SQRT_2;

impl PosEmbed {
    /// `fourier_dim` must be even.
    pub fn init(fourier_dim: usize, hidden: usize, d_model: usize, rng: &mut RandomSource) -> Self {
        assert!(fourier_dim >= 2 && fourier_dim.is_multiple_of(2), "fourier_dim must be even");
        Self {
            freq: nn::gaussian_matrix(2, fourier_dim / 2, FREQ_INIT_STD, rng),
            fc1: Dense::init(fourier_dim, hidden, 0.02, rng),
            fc2: Dense::init(hidden, d_model, 0.02, rng),
        }
    }

    pub fn fourier_dim(&self) -> usize {
        2 * self.freq.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.output_dim()
    }

    pub fn encode(&self, coords: ArrayView2<f64>) -> Array2<f64> {
        self.forward(coords).0
    }

    pub fn forward(&self, coords: ArrayView2<f64>) -> (Array2<f64>, PosEmbedCache) {
        let phase = coords.dot(&self.freq);
        let features = features_from_phase(&phase);
        let pre_act = self.fc1.forward(features.view());
        let hidden = nn::gelu_forward(&pre_act);
        let out = self.fc2.forward(hidden.view());
        let cache = PosEmbedCache {
            coords: coords.to_owned(),
            phase,
            features,
            pre_act,
            hidden,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients for upstream gradient `dout`.
    pub fn backward(&self, cache: &PosEmbedCache, dout: ArrayView2<f64>, grad: &mut PosEmbed) {
        let dhidden = self.fc2.backward(cache.hidden.view(), dout, &mut grad.fc2);
        let dpre = nn::gelu_backward(&cache.pre_act, dhidden.view());
        let dfeat = self.fc1.backward(cache.features.view(), dpre.view(), &mut grad.fc1);
        let half = self.freq.ncols();
        let scale = 1.0 / ((2 * half) as f64).sqrt();
        let dcos = dfeat.slice(ndarray::s![.., ..half]);
        let dsin = dfeat.slice(ndarray::s![.., half..]);
        let mut dphase = Array2::zeros(cache.phase.raw_dim());
        ndarray::Zip::from(&mut dphase)
            .and(&cache.phase)
            .and(dcos)
            .and(dsin)
            .for_each(|g, &ph, &dc, &ds| *g = scale * (ds * ph.cos() - dc * ph.sin()));
        ndarray::linalg::general_mat_mul(1.0, &cache.coords.t(), &dphase, 1.0, &mut grad.freq);
    }
}

impl Params for PosEmbed {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        nn::push_matrix(out, prefix, "freq", &self.freq);
        self.fc1.collect(&nn::join(prefix, "fc1"), out);
        self.fc2.collect(&nn::join(prefix, "fc2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<&'a mut [f64]>) {
        out.push(nn::matrix_mut(&mut self.freq));
        self.fc1.collect_mut(prefix, out);
        self.fc2.collect_mut(prefix, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn origin_maps_to_cos_ones() {
        let mut rng = RandomSource::new(1);
        let freq = nn::gaussian_matrix(2, 4, 1.0, &mut rng);
        let f = fourier_features(array![[0.0, 0.0]].view(), freq.view());
        let s = 1.0 / 8f64.sqrt();
        for j in 0..4 {
            assert_eq!(f[[0, j]], s);
            assert_eq!(f[[0, j + 4]], 0.0);
        }
    }

    #[test]
    fn single_frequency_inner_product() {
        let freq = array![[1.0], [0.0]];
        let f = fourier_features(array![[3.0, 5.0], [1.0, 5.0]].view(), freq.view());
        let dot = f.row(0).dot(&f.row(1));
        // (1/D)·Σ_j cos((p−q)·w_j) with D = 2 and a single frequency.
        assert!((dot - 2f64.cos() / 2.0).abs() < 1e-12);
        assert!((dot + 0.2081).abs() < 1e-4);
    }

    #[test]
    fn zero_mlp_gives_zero_output() {
        let mut rng = RandomSource::new(2);
        let mut pe = PosEmbed::init(8, 16, 4, &mut rng);
        pe.fc1 = Dense::zeros(8, 16);
        pe.fc2 = Dense::zeros(16, 4);
        let out = pe.encode(array![[1.0, 2.0], [7.0, -3.0]].view());
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_permute_with_inputs() {
        let mut rng = RandomSource::new(3);
        let pe = PosEmbed::init(8, 16, 4, &mut rng);
        let c = array![[1.0, 2.0], [7.0, -3.0], [0.0, 4.0]];
        let out = pe.encode(c.view());
        let perm = [2, 0, 1];
        let out_p = pe.encode(c.select(Axis(0), &perm).view());
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(out_p.row(i), out.row(p));
        }
    }
}
