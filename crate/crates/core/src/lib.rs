//! Learned correspondence weighting for two-view relative pose.
//!
//! A permutation-equivariant residual perceptron network with context
//! normalization scores putative correspondences; the scores drive a
//! differentiable weighted 8-point solve for the essential matrix. Classical
//! robust estimators (RANSAC, MLESAC, LMedS) serve both as baselines and as a
//! post-processing stage on the network's survivors.

pub mod data;
pub mod epipolar;
pub mod eval;
pub mod exec;
pub mod format;
pub mod netcore;
pub mod robust;
pub mod rng;
pub mod training;

pub use epipolar::{
    CameraIntrinsics, CorrespondenceSet, EssentialMatrix, GeometryError, RelativePose,
};
pub use exec::Execution;
