//! Hypothesize-and-verify estimators for the essential matrix.
//!
//! All three estimators share one loop: draw an 8-point minimal sample,
//! solve it, project to rank 2, score it against every correspondence and
//! keep the best. They differ only in the score:
//!
//! * RANSAC counts correspondences with symmetric distance below the threshold,
//! * LMedS takes the median squared distance,
//! * MLESAC sums `min(d², T²)`.
//!
//! Samples are drawn sequentially from a seeded PRNG in chunks; a chunk is
//! scored (possibly in parallel) and then replayed in draw order, so the
//! result never depends on [`Execution`].

use std::time::{Duration, Instant};

use rand::seq::index;
use thiserror::Error;

use crate::epipolar::{
    correspondence_distance, design_row, rank2_project, weighted_eight_point, CorrespondenceSet,
    EssentialMatrix, GeometryError, Mat9, NormalEigen, DEFAULT_INLIER_THRESHOLD,
    MIN_CORRESPONDENCES,
};
use crate::exec::Execution;
use crate::rng;

/// Upper bound on hypotheses scored between two stopping checks.
const CHUNK: usize = 64;

/// Floor on the LMedS inlier cut, so that exact data is not rejected
/// wholesale when the median residual is at round-off level.
pub const LMEDS_MIN_CUT: f64 = 1e-8;

/// Degenerate samples allowed per permitted iteration before giving up.
const DEGENERATE_FACTOR: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RobustError {
    #[error("invalid robust configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least {needed} correspondences, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("estimation failed: {0}")]
    EstimationFailure(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustConfig {
    pub max_iterations: usize,
    /// Symmetric epipolar distance threshold in normalized coordinates.
    pub inlier_threshold: f64,
    /// Probability of having drawn one all-inlier sample at early exit.
    pub confidence: f64,
    pub sample_size: usize,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            inlier_threshold: DEFAULT_INLIER_THRESHOLD,
            confidence: 0.999,
            sample_size: MIN_CORRESPONDENCES,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl RobustConfig {
    pub fn validate(&self) -> Result<(), RobustError> {
        if self.max_iterations == 0 {
            return Err(RobustError::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(RobustError::InvalidConfig("confidence must lie in (0, 1)".into()));
        }
        if !(self.inlier_threshold > 0.0 && self.inlier_threshold.is_finite()) {
            return Err(RobustError::InvalidConfig("inlier_threshold must be positive".into()));
        }
        if self.sample_size != MIN_CORRESPONDENCES {
            return Err(RobustError::InvalidConfig(format!(
                "sample_size must be {MIN_CORRESPONDENCES} for the 8-point solver"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RobustResult {
    /// Rank-2 refit on the consensus set.
    pub essential: EssentialMatrix,
    /// Consensus set of the winning hypothesis.
    pub inlier_mask: Vec<bool>,
    /// Non-degenerate hypotheses scored before stopping.
    pub iterations_used: usize,
    pub elapsed: Duration,
}

impl RobustResult {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }

    /// Equality of everything except wall-clock time.
    pub fn same_estimate(&self, other: &RobustResult) -> bool {
        self.essential == other.essential
            && self.inlier_mask == other.inlier_mask
            && self.iterations_used == other.iterations_used
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoring {
    Ransac,
    Lmeds,
    Mlesac,
}

/// Adaptive iteration bound `log(1 − p) / log(1 − εˢ)`.
pub fn adaptive_bound(inlier_ratio: f64, sample_size: usize, confidence: f64) -> usize {
    let good = inlier_ratio.clamp(0.0, 1.0).powi(sample_size as i32);
    if good <= 0.0 {
        return usize::MAX;
    }
    if good >= 1.0 {
        return 1;
    }
    let k = (1.0 - confidence).ln() / (1.0 - good).ln();
    if k.is_finite() {
        k.ceil().max(1.0) as usize
    } else {
        usize::MAX
    }
}

/// Robust scale `1.4826 (1 + 5/(n − s)) √median(d²)` used by LMedS.
pub fn lmeds_sigma(median_sq: f64, n: usize, sample_size: usize) -> f64 {
    let dof = n.saturating_sub(sample_size).max(1) as f64;
    1.4826 * (1.0 + 5.0 / dof) * median_sq.sqrt()
}

/// Cost of a hypothesis; lower is better.
pub fn score(scoring: Scoring, d: &[f64], threshold: f64) -> f64 {
    match scoring {
        Scoring::Ransac => -(d.iter().filter(|&&v| v < threshold).count() as f64),
        Scoring::Mlesac => {
            let t2 = threshold * threshold;
            d.iter().map(|&v| (v * v).min(t2)).sum()
        }
        Scoring::Lmeds => median_sq(d),
    }
}

fn median_sq(d: &[f64]) -> f64 {
    let mut sq: Vec<f64> = d.iter().map(|v| v * v).collect();
    let mid = sq.len() / 2;
    let (_, m, _) = sq.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Distance cut separating inliers for a given hypothesis.
fn mask_cut(scoring: Scoring, d: &[f64], threshold: f64, sample_size: usize) -> f64 {
    match scoring {
        Scoring::Ransac | Scoring::Mlesac => threshold,
        Scoring::Lmeds => (2.5 * lmeds_sigma(median_sq(d), d.len(), sample_size)).max(LMEDS_MIN_CUT),
    }
}

/// Exact 8-point solve on a sample, rank-2 projected. `None` for degenerate
/// samples.
fn solve_sample(x: &CorrespondenceSet, idx: &[usize]) -> Option<EssentialMatrix> {
    let mut acc = [0.0f64; 81];
    for &i in idx {
        let r = design_row(&x[i]);
        for a in 0..9 {
            for b in a..9 {
                acc[a * 9 + b] += r[a] * r[b];
            }
        }
    }
    for a in 0..9 {
        for b in 0..a {
            acc[a * 9 + b] = acc[b * 9 + a];
        }
    }
    let eig = NormalEigen::new(Mat9::from_row_slice(&acc));
    if eig.is_degenerate() {
        return None;
    }
    let (v, _) = eig.smallest();
    let mut e = [0.0; 9];
    e.copy_from_slice(v.as_slice());
    EssentialMatrix::from_vec(&e).ok().map(|e| rank2_project(&e))
}

fn distances(x: &CorrespondenceSet, e: &EssentialMatrix) -> Vec<f64> {
    x.iter().map(|c| correspondence_distance(e.matrix(), c)).collect()
}

struct Hypothesis {
    essential: EssentialMatrix,
    cost: f64,
    inliers: usize,
}

/// Shared hypothesize-and-verify loop.
pub fn estimate(
    scoring: Scoring,
    x: &CorrespondenceSet,
    cfg: &RobustConfig,
) -> Result<RobustResult, RobustError> {
    let start = Instant::now();
    cfg.validate()?;
    let n = x.len();
    let s = cfg.sample_size;
    if n < s {
        return Err(RobustError::TooFew { needed: s, got: n });
    }
    let mut r = rng::from_seed(cfg.seed);
    let mut best: Option<Hypothesis> = None;
    let mut iterations = 0usize;
    let mut draws = 0usize;
    let mut bound = cfg.max_iterations;
    let max_draws = cfg.max_iterations.saturating_mul(DEGENERATE_FACTOR);

    'outer: while iterations < bound && draws < max_draws {
        let want = (bound - iterations).min(CHUNK).min(max_draws - draws);
        let samples: Vec<Vec<usize>> = (0..want)
            .map(|_| index::sample(&mut r, n, s).into_vec())
            .collect();
        draws += want;
        let scored = cfg.execution.map(samples.len(), |k| {
            solve_sample(x, &samples[k]).map(|e| {
                let d = distances(x, &e);
                let cost = score(scoring, &d, cfg.inlier_threshold);
                // The stopping rule estimates the inlier ratio with the fixed
                // threshold for every scorer; the LMedS scale is unreliable
                // for poor hypotheses.
                let inliers = d.iter().filter(|&&v| v < cfg.inlier_threshold).count();
                Hypothesis {
                    essential: e,
                    cost,
                    inliers,
                }
            })
        });
        for h in scored {
            let Some(h) = h else { continue };
            iterations += 1;
            if best.as_ref().map_or(true, |b| h.cost < b.cost) {
                bound = bound.min(adaptive_bound(h.inliers as f64 / n as f64, s, cfg.confidence));
                best = Some(h);
            }
            if iterations >= bound {
                break 'outer;
            }
        }
    }

    let best = best.ok_or_else(|| {
        RobustError::EstimationFailure("every sampled configuration was degenerate".into())
    })?;
    let d = distances(x, &best.essential);
    let cut = mask_cut(scoring, &d, cfg.inlier_threshold, s);
    let mask: Vec<bool> = d.iter().map(|&v| v < cut).collect();
    let count = mask.iter().filter(|&&b| b).count();
    if count < s {
        return Err(RobustError::EstimationFailure(format!(
            "best hypothesis has {count} inliers, need {s}"
        )));
    }
    let w: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    // A degenerate consensus set falls back to the minimal-sample model.
    let essential = weighted_eight_point(x, &w)
        .map(|e| rank2_project(&e))
        .unwrap_or(best.essential);
    Ok(RobustResult {
        essential,
        inlier_mask: mask,
        iterations_used: iterations,
        elapsed: start.elapsed(),
    })
}

pub fn ransac_essential(x: &CorrespondenceSet, cfg: &RobustConfig) -> Result<RobustResult, RobustError> {
    estimate(Scoring::Ransac, x, cfg)
}

pub fn lmeds_essential(x: &CorrespondenceSet, cfg: &RobustConfig) -> Result<RobustResult, RobustError> {
    estimate(Scoring::Lmeds, x, cfg)
}

pub fn mlesac_essential(x: &CorrespondenceSet, cfg: &RobustConfig) -> Result<RobustResult, RobustError> {
    estimate(Scoring::Mlesac, x, cfg)
}

/// RANSAC restricted to correspondences with `w_i > keep_threshold`. The
/// returned mask uses the original indexing.
pub fn postprocess_with_ransac(
    x: &CorrespondenceSet,
    w: &[f64],
    keep_threshold: f64,
    cfg: &RobustConfig,
) -> Result<RobustResult, RobustError> {
    let start = Instant::now();
    if w.len() != x.len() {
        return Err(GeometryError::LengthMismatch {
            what: "weights",
            expected: x.len(),
            got: w.len(),
        }
        .into());
    }
    let survivors: Vec<usize> = (0..x.len()).filter(|&i| w[i] > keep_threshold).collect();
    if survivors.len() < cfg.sample_size {
        return Err(RobustError::EstimationFailure(format!(
            "{} correspondences survive the weight threshold, need {}",
            survivors.len(),
            cfg.sample_size
        )));
    }
    let sub = x.select(&survivors);
    let res = ransac_essential(&sub, cfg)?;
    let mut mask = vec![false; x.len()];
    for (k, &i) in survivors.iter().enumerate() {
        mask[i] = res.inlier_mask[k];
    }
    Ok(RobustResult {
        inlier_mask: mask,
        elapsed: start.elapsed(),
        ..res
    })
}
