//! Pose-error metrics, method comparison and timing.
//!
//! A pair's error is the larger of its rotation and translation angular
//! errors, so one threshold applies to both. Precision at `τ` is the
//! fraction of pairs with error `≤ τ`; mAP at `T` is the area under the
//! precision curve on `[0, T]` divided by `T`. Curves are reported on a
//! 0.1° grid.
//!
//! # CSV outputs
//!
//! Per-pair rows (one per pair and method):
//!
//! ```text
//! pair_id,method,rot_err_deg,trans_err_deg,time_ms,n_survivors,failed
//! ```
//!
//! Summary rows (one per method):
//!
//! ```text
//! method,n_pairs,failures,map5,map10,map20
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::data::PairRecord;
use crate::epipolar::{
    decompose_essential, rank2_project, rotation_angle_error, translation_angle_error,
    weighted_eight_point, CorrespondenceSet, EssentialMatrix, GeometryError, RelativePose,
};
use crate::exec::Execution;
use crate::robust::{self, RobustConfig, RobustError};
use crate::training::Model;

/// Thresholds reported everywhere, in degrees.
pub const MAP_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];
pub const CURVE_STEP_DEG: f64 = 0.1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("pair {0} has no ground truth; evaluation refused")]
    MissingGroundTruth(u64),
    #[error("method {0} needs a trained model")]
    NoModel(Method),
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError {
    pub rotation_deg: f64,
    pub translation_deg: f64,
    pub failed: bool,
}

impl PoseError {
    pub fn failure() -> Self {
        Self { rotation_deg: 180.0, translation_deg: 180.0, failed: true }
    }

    pub fn between(est: &RelativePose, truth: &RelativePose) -> Self {
        Self {
            rotation_deg: rotation_angle_error(&est.r, &truth.r),
            translation_deg: translation_angle_error(&est.t, &truth.t),
            failed: false,
        }
    }

    pub fn from_result<E>(est: Result<RelativePose, E>, truth: &RelativePose) -> Self {
        est.map_or_else(|_| Self::failure(), |p| Self::between(&p, truth))
    }

    /// The scalar compared against thresholds.
    pub fn max_error(&self) -> f64 {
        self.rotation_deg.max(self.translation_deg)
    }
}

/// `(τ, precision(τ))` on `0, step, 2·step, … ≤ max_threshold`.
pub fn precision_curve(errors: &[PoseError], max_threshold_deg: f64, step_deg: f64) -> Vec<(f64, f64)> {
    assert!(step_deg > 0.0 && max_threshold_deg >= 0.0, "invalid curve grid");
    let mut sorted: Vec<f64> = errors.iter().map(PoseError::max_error).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len().max(1) as f64;
    let steps = (max_threshold_deg / step_deg + 1e-9).floor() as usize;
    (0..=steps)
        .map(|k| {
            let tau = k as f64 * step_deg;
            let hits = sorted.partition_point(|&e| e <= tau);
            (tau, hits as f64 / n)
        })
        .collect()
}

/// Normalized area under the precision curve on `[0, threshold]`.
///
/// The curve is a step function, so its area is computed exactly:
/// each pair contributes `max(0, T − e) / T`. This is the limit of the
/// trapezoid rule on an ever finer grid; a fixed 0.1° grid would be off by
/// up to `0.05 / T` per jump.
pub fn map_at(errors: &[PoseError], threshold_deg: f64) -> f64 {
    assert!(threshold_deg > 0.0, "threshold must be positive");
    if errors.is_empty() {
        return 0.0;
    }
    let area: f64 = errors
        .iter()
        .map(|e| (threshold_deg - e.max_error()).max(0.0))
        .sum();
    (area / (threshold_deg * errors.len() as f64)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    pub map_values: Vec<f64>,
    pub n_pairs: usize,
}

impl MapReport {
    pub fn from_errors(errors: &[PoseError]) -> Self {
        Self::with_thresholds(errors, &MAP_THRESHOLDS)
    }

    pub fn with_thresholds(errors: &[PoseError], thresholds: &[f64]) -> Self {
        Self {
            thresholds: thresholds.to_vec(),
            map_values: thresholds.iter().map(|&t| map_at(errors, t)).collect(),
            n_pairs: errors.len(),
        }
    }

    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| t == threshold)
            .map(|i| self.map_values[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ransac,
    Mlesac,
    Lmeds,
    Net8pt,
    NetRansac,
    /// Ground-truth labels as weights; an upper reference.
    Oracle,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ransac,
        Method::Mlesac,
        Method::Lmeds,
        Method::Net8pt,
        Method::NetRansac,
        Method::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ransac => "ransac",
            Method::Mlesac => "mlesac",
            Method::Lmeds => "lmeds",
            Method::Net8pt => "net_8pt",
            Method::NetRansac => "net_ransac",
            Method::Oracle => "oracle",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Method::Net8pt | Method::NetRansac)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub robust: RobustConfig,
    /// Correspondences with weight above this survive into RANSAC.
    pub keep_threshold: f64,
    pub execution: Execution,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            robust: RobustConfig::default(),
            keep_threshold: 0.0,
            execution: Execution::default(),
        }
    }
}

/// Outcome of one method on one pair.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub pose: Result<RelativePose, String>,
    /// Correspondences that took part in the final estimate.
    pub n_survivors: usize,
}

fn pose_from(e: &EssentialMatrix, x: &CorrespondenceSet, w: &[f64]) -> Result<RelativePose, GeometryError> {
    decompose_essential(e, x, w)
}

/// Weighted 8-point, rank-2 projection and cheirality with the same weights.
pub fn pose_from_weights(x: &CorrespondenceSet, w: &[f64]) -> Result<RelativePose, GeometryError> {
    let e = rank2_project(&weighted_eight_point(x, w)?);
    pose_from(&e, x, w)
}

fn mask_weights(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

fn robust_pose(
    est: Result<robust::RobustResult, RobustError>,
    x: &CorrespondenceSet,
) -> Estimate {
    match est {
        Ok(r) => {
            let w = mask_weights(&r.inlier_mask);
            Estimate {
                n_survivors: r.inlier_count(),
                pose: pose_from(&r.essential, x, &w).map_err(|e| e.to_string()),
            }
        }
        Err(e) => Estimate { pose: Err(e.to_string()), n_survivors: 0 },
    }
}

/// Runs `method` on one pair. Everything inside runs sequentially.
pub fn run_method(
    method: Method,
    record: &PairRecord,
    model: Option<&Model>,
    cfg: &EvalConfig,
) -> Result<Estimate, EvalError> {
    let x = &record.correspondences;
    let mut rc = cfg.robust;
    rc.execution = Execution::Sequential;
    rc.seed = crate::rng::derive(cfg.robust.seed, record.id);
    let seq = Execution::Sequential;
    let est = match method {
        Method::Ransac => robust_pose(robust::ransac_essential(x, &rc), x),
        Method::Mlesac => robust_pose(robust::mlesac_essential(x, &rc), x),
        Method::Lmeds => robust_pose(robust::lmeds_essential(x, &rc), x),
        Method::Oracle => {
            let gt = record.truth.as_ref().ok_or(EvalError::MissingGroundTruth(record.id))?;
            let w = mask_weights(&gt.labels);
            Estimate {
                n_survivors: gt.labels.iter().filter(|&&l| l).count(),
                pose: pose_from_weights(x, &w).map_err(|e| e.to_string()),
            }
        }
        Method::Net8pt => {
            let model = model.ok_or(EvalError::NoModel(method))?;
            let pred = model.predict(seq, x);
            let n_survivors = pred.weights.iter().filter(|&&w| w > 0.0).count();
            let pose = match pred.direct {
                // Direct regression: decompose the head output, letting
                // every correspondence vote in the cheirality test.
                Some(v) => EssentialMatrix::from_vec(&v)
                    .map(|e| rank2_project(&e))
                    .and_then(|e| pose_from(&e, x, &vec![1.0; x.len()])),
                None => pose_from_weights(x, &pred.weights),
            };
            Estimate { pose: pose.map_err(|e| e.to_string()), n_survivors }
        }
        Method::NetRansac => {
            let model = model.ok_or(EvalError::NoModel(method))?;
            let pred = model.predict(seq, x);
            match robust::postprocess_with_ransac(x, &pred.weights, cfg.keep_threshold, &rc) {
                Ok(r) => {
                    let w = mask_weights(&r.inlier_mask);
                    Estimate {
                        n_survivors: pred.weights.iter().filter(|&&w| w > cfg.keep_threshold).count(),
                        pose: pose_from(&r.essential, x, &w).map_err(|e| e.to_string()),
                    }
                }
                Err(e) => Estimate {
                    pose: Err(e.to_string()),
                    n_survivors: pred.weights.iter().filter(|&&w| w > cfg.keep_threshold).count(),
                },
            }
        }
    };
    Ok(est)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairEvaluation {
    pub pair_id: u64,
    pub method: Method,
    pub error: PoseError,
    pub time: Duration,
    pub n_survivors: usize,
}

#[derive(Debug, Clone)]
pub struct MethodEvaluation {
    pub method: Method,
    pub report: MapReport,
    pub pairs: Vec<PairEvaluation>,
}

impl MethodEvaluation {
    pub fn errors(&self) -> Vec<PoseError> {
        self.pairs.iter().map(|p| p.error).collect()
    }

    pub fn failures(&self) -> usize {
        self.pairs.iter().filter(|p| p.error.failed).count()
    }
}

fn require_truth(records: &[PairRecord]) -> Result<(), EvalError> {
    match records.iter().find(|r| r.truth.is_none()) {
        Some(r) => Err(EvalError::MissingGroundTruth(r.id)),
        None => Ok(()),
    }
}

/// Runs `method` on every pair (in parallel across pairs when configured)
/// and aggregates mAP. Failures count as 180° errors.
pub fn evaluate_method(
    method: Method,
    records: &[PairRecord],
    model: Option<&Model>,
    cfg: &EvalConfig,
) -> Result<MethodEvaluation, EvalError> {
    require_truth(records)?;
    if method.needs_model() && model.is_none() {
        return Err(EvalError::NoModel(method));
    }
    cfg.robust.validate().map_err(|e| EvalError::Invalid(e.to_string()))?;
    let results = cfg.execution.map(records.len(), |i| {
        let rec = &records[i];
        let start = Instant::now();
        let est = run_method(method, rec, model, cfg)?;
        let time = start.elapsed();
        let truth = &rec.truth.as_ref().expect("checked").pose;
        Ok(PairEvaluation {
            pair_id: rec.id,
            method,
            error: PoseError::from_result(est.pose, truth),
            time,
            n_survivors: est.n_survivors,
        })
    });
    let pairs = results.into_iter().collect::<Result<Vec<_>, EvalError>>()?;
    let errors: Vec<PoseError> = pairs.iter().map(|p| p.error).collect();
    Ok(MethodEvaluation { method, report: MapReport::from_errors(&errors), pairs })
}

pub const PER_PAIR_HEADER: [&str; 7] =
    ["pair_id", "method", "rot_err_deg", "trans_err_deg", "time_ms", "n_survivors", "failed"];
pub const SUMMARY_HEADER: [&str; 6] = ["method", "n_pairs", "failures", "map5", "map10", "map20"];

pub fn write_per_pair_csv(path: &Path, evals: &[MethodEvaluation]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PER_PAIR_HEADER)?;
    for p in evals.iter().flat_map(|e| &e.pairs) {
        w.write_record([
            p.pair_id.to_string(),
            p.method.to_string(),
            format!("{:.6}", p.error.rotation_deg),
            format!("{:.6}", p.error.translation_deg),
            format!("{:.3}", p.time.as_secs_f64() * 1e3),
            p.n_survivors.to_string(),
            (p.error.failed as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, evals: &[MethodEvaluation]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for e in evals {
        let r = MapReport::from_errors(&e.errors());
        let mut row = vec![e.method.to_string(), r.n_pairs.to_string(), e.failures().to_string()];
        row.extend(r.map_values.iter().map(|v| format!("{v:.6}")));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub method: Method,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub median_survivors: f64,
    pub samples: usize,
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Median of an unsorted sample (mean of the middle two for even sizes).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Sequential per-pair wall-clock timing.
///
/// The first `warmup` pairs are run once and discarded; each pair is then
/// timed `repetitions` times. Everything runs on the calling thread.
pub fn benchmark_timing(
    records: &[PairRecord],
    methods: &[Method],
    model: Option<&Model>,
    repetitions: usize,
    warmup: usize,
    seed: u64,
    robust: &RobustConfig,
) -> Result<Vec<TimingRow>, EvalError> {
    if records.is_empty() || repetitions == 0 {
        return Err(EvalError::Invalid("timing needs pairs and at least one repetition".into()));
    }
    let cfg = EvalConfig {
        robust: RobustConfig { seed, execution: Execution::Sequential, ..*robust },
        keep_threshold: 0.0,
        execution: Execution::Sequential,
    };
    let mut rows = Vec::new();
    for &method in methods {
        if method.needs_model() && model.is_none() {
            return Err(EvalError::NoModel(method));
        }
        for rec in records.iter().take(warmup) {
            run_method(method, rec, model, &cfg)?;
        }
        let mut times = Vec::new();
        let mut survivors = Vec::new();
        for rec in records {
            for _ in 0..repetitions {
                let start = Instant::now();
                let est = run_method(method, rec, model, &cfg)?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
                survivors.push(est.n_survivors as f64);
            }
        }
        rows.push(TimingRow {
            method,
            median_ms: median(&times),
            p95_ms: percentile(&times, 95.0),
            median_survivors: median(&survivors),
            samples: times.len(),
        });
    }
    Ok(rows)
}

/// Binary-classification F1 for "inlier" as the positive class.
pub fn f1_score(predicted: &[bool], labels: &[bool]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &l) in predicted.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationMetrics {
    pub f1: f64,
    pub map5: f64,
    pub map10: f64,
    pub map20: f64,
}

impl ValidationMetrics {
    /// Model-selection score: mean of the three mAP values.
    pub fn score(&self) -> f64 {
        (self.map5 + self.map10 + self.map20) / 3.0
    }
}

/// F1 (pooled over all correspondences, `w > 0` as inlier) and net_8pt mAP.
pub fn validate(exec: Execution, model: &Model, records: &[PairRecord]) -> ValidationMetrics {
    let per_pair = exec.map(records.len(), |i| {
        let rec = &records[i];
        let gt = rec.truth.as_ref().expect("validation pairs carry ground truth");
        let x = &rec.correspondences;
        let pred = model.predict(Execution::Sequential, x);
        let predicted: Vec<bool> = pred.weights.iter().map(|&w| w > 0.0).collect();
        let pose = match pred.direct {
            Some(v) => EssentialMatrix::from_vec(&v)
                .map(|e| rank2_project(&e))
                .and_then(|e| pose_from(&e, x, &vec![1.0; x.len()])),
            None => pose_from_weights(x, &pred.weights),
        };
        (predicted, gt.labels.clone(), PoseError::from_result(pose, &gt.pose))
    });
    let mut all_pred = Vec::new();
    let mut all_labels = Vec::new();
    let mut errors = Vec::new();
    for (p, l, e) in per_pair {
        all_pred.extend(p);
        all_labels.extend(l);
        errors.push(e);
    }
    let r = MapReport::from_errors(&errors);
    ValidationMetrics {
        f1: f1_score(&all_pred, &all_labels),
        map5: r.map_values[0],
        map10: r.map_values[1],
        map20: r.map_values[2],
    }
}
