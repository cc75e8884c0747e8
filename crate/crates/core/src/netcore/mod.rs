//! Dense per-correspondence network with hand-written backward passes.
//!
//! The model maps each pair's `N × 4` correspondences to `N` logits through an
//! input perceptron, a stack of residual blocks
//! (`[perceptron → context norm → batch norm → ReLU] × 2` plus skip) and an
//! output perceptron. Weights are the truncated tanh of the logits. The
//! weighted eigen-solve and its analytic gradient live in [`eigen`].

pub mod checkpoint;
pub mod eigen;
pub mod layers;
pub mod network;

#[cfg(test)]
pub(crate) mod gradcheck;

use ndarray::{s, Array2, ArrayView2};

pub use checkpoint::{Checkpoint, NamedArray};
pub use eigen::{eigen_backward, weighted_eigen_solve, EigenCache, EigenGrad, EIGEN_GAP_CLAMP};
pub use layers::{
    batch_norm_backward, batch_norm_forward, context_norm_backward, context_norm_forward,
    perceptron_backward, perceptron_forward, relu_backward, relu_forward, trunc_tanh_backward,
    trunc_tanh_forward, BatchNormParams, PerceptronParams,
};
pub use network::{
    network_backward, network_forward, Architecture, ForwardOutput, GradientSet, Mode,
    NetworkParams, Tape,
};

use crate::epipolar::CorrespondenceSet;

/// `B × N × C` features, stored as `B·N` rows with pair `b` occupying rows
/// `b·N .. (b+1)·N`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array2<f64>,
    pairs: usize,
}

impl FeatureMap {
    /// Wraps row-stacked features; the row count must divide evenly by `pairs`.
    pub fn from_rows(data: Array2<f64>, pairs: usize) -> Self {
        assert!(pairs > 0 && data.nrows() % pairs == 0, "rows must split evenly into pairs");
        Self { data, pairs }
    }

    /// Stacks equally sized correspondence sets into a 4-channel map.
    pub fn from_correspondences(sets: &[&CorrespondenceSet]) -> Self {
        assert!(!sets.is_empty(), "empty batch");
        let n = sets[0].len();
        assert!(sets.iter().all(|s| s.len() == n), "pairs in a batch must have equal N");
        let mut data = Array2::zeros((n * sets.len(), 4));
        for (b, set) in sets.iter().enumerate() {
            for (i, c) in set.iter().enumerate() {
                for k in 0..4 {
                    data[(b * n + i, k)] = c[k];
                }
            }
        }
        Self::from_rows(data, sets.len())
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    /// Correspondences per pair.
    pub fn n(&self) -> usize {
        self.data.nrows() / self.pairs
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    /// Rows of pair `b`.
    pub fn pair(&self, b: usize) -> ArrayView2<'_, f64> {
        let n = self.n();
        self.data.slice(s![b * n..(b + 1) * n, ..])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.mapv(f),
            pairs: self.pairs,
        }
    }

    /// Single-channel map as one `Vec` per pair.
    pub fn to_pair_vecs(&self) -> Vec<Vec<f64>> {
        assert_eq!(self.channels(), 1);
        (0..self.pairs)
            .map(|b| self.pair(b).iter().copied().collect())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
