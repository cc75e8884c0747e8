//! Losses, optimizer and the training loop.
//!
//! The objective for a batch of `B` pairs is
//!
//! ```text
//! L = α · mean_k Lc_k + β(step) · mean_k Le_k
//! ```
//!
//! where `Lc` is a class-balanced logistic cross-entropy on the network
//! logits and `Le = min(‖E* − e‖², ‖E* + e‖²)` compares the weighted 8-point
//! estimate `e` with the ground truth. `β(step)` is zero before the
//! configured activation step.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::data::PairRecord;
use crate::epipolar::{CorrespondenceSet, EssentialMatrix};
use crate::eval::{self, ValidationMetrics};
use crate::exec::Execution;
use crate::format::FormatError;
use crate::netcore::network::init_perceptron;
use crate::netcore::{
    eigen_backward, network_backward, network_forward, trunc_tanh_backward, weighted_eigen_solve,
    Architecture, Checkpoint, FeatureMap, GradientSet, Mode, NamedArray, NetworkParams,
    PerceptronParams,
};
use crate::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid training data: {0}")]
    InvalidData(String),
    #[error("non-finite loss or gradient at step {step}; offending batch written to {}", dump.display())]
    NonFinite { step: u64, dump: PathBuf },
    #[error("checkpoint does not match the model: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("metrics log: {0}")]
    Csv(#[from] csv::Error),
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Format(FormatError::Io(e))
    }
}

/// Loss settings compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Classification first, essential term switched on later.
    Ours,
    Classification,
    Essential,
    /// Essential matrix regressed from pooled features, no weighted solve.
    Direct,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ours, Variant::Classification, Variant::Essential, Variant::Direct];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::Classification => "classification",
            Variant::Essential => "essential",
            Variant::Direct => "direct",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}` (expected ours, classification, essential or direct)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub beta_activation_step: u64,
    pub variant: Variant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::for_variant(Variant::Ours)
    }
}

impl LossConfig {
    /// Standard weights of each variant.
    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::Ours => Self { alpha: 1.0, beta: 0.1, beta_activation_step: 20_000, variant },
            Variant::Classification => Self { alpha: 1.0, beta: 0.0, beta_activation_step: 0, variant },
            Variant::Essential | Variant::Direct => {
                Self { alpha: 0.0, beta: 1.0, beta_activation_step: 0, variant }
            }
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(TrainError::InvalidConfig("alpha and beta must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Effective `(α, β)` at `step` after the schedule and variant overrides.
    pub fn weights_at(&self, step: u64) -> (f64, f64) {
        let beta = if step < self.beta_activation_step { 0.0 } else { self.beta };
        match self.variant {
            Variant::Ours => (self.alpha, beta),
            Variant::Classification => (self.alpha, 0.0),
            Variant::Essential | Variant::Direct => (0.0, beta),
        }
    }

    /// True at the first step on which the essential term contributes after
    /// a phase without it.
    pub fn phase_change_at(&self, step: u64) -> bool {
        step > 0 && self.weights_at(step).1 > 0.0 && self.weights_at(step - 1).1 == 0.0
    }
}

/// `log(1 + eˣ)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationLoss {
    pub loss: f64,
    /// `∂L/∂o`, one vector per pair.
    pub grad: Vec<Vec<f64>>,
    /// Pairs containing only one class.
    pub single_class_pairs: usize,
}

/// Class-balanced logistic cross-entropy averaged over pairs.
///
/// Within a pair of `N` correspondences, class `c` gets weight
/// `γ_c = N / (2 · count(c))`, so both classes contribute half of the pair
/// loss. A class absent from a pair contributes nothing.
pub fn classification_loss(logits: &[Vec<f64>], labels: &[Vec<bool>]) -> ClassificationLoss {
    assert_eq!(logits.len(), labels.len(), "one label vector per pair");
    let b = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let mut single = 0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(o, y)| {
            assert_eq!(o.len(), y.len(), "one label per logit");
            let n = o.len() as f64;
            let pos = y.iter().filter(|&&l| l).count() as f64;
            let neg = n - pos;
            if pos == 0.0 || neg == 0.0 {
                single += 1;
            }
            let gp = if pos > 0.0 { n / (2.0 * pos) } else { 0.0 };
            let gn = if neg > 0.0 { n / (2.0 * neg) } else { 0.0 };
            let mut pair = 0.0;
            let g = o
                .iter()
                .zip(y)
                .map(|(&oi, &yi)| {
                    let (gamma, h, t) = if yi {
                        (gp, softplus(-oi), 1.0)
                    } else {
                        (gn, softplus(oi), 0.0)
                    };
                    pair += gamma * h;
                    gamma * (sigmoid(oi) - t) / (n * b)
                })
                .collect();
            loss += pair / n;
            g
        })
        .collect();
    ClassificationLoss {
        loss: loss / b,
        grad,
        single_class_pairs: single,
    }
}

/// `min(‖E* − e‖², ‖E* + e‖²)` and its gradient with respect to `e`.
pub fn essential_loss(vec_e: &[f64; 9], e_star: &EssentialMatrix) -> (f64, [f64; 9]) {
    let t = e_star.to_vec();
    let minus: f64 = (0..9).map(|i| (t[i] - vec_e[i]).powi(2)).sum();
    let plus: f64 = (0..9).map(|i| (t[i] + vec_e[i]).powi(2)).sum();
    if minus <= plus {
        (minus, std::array::from_fn(|i| 2.0 * (vec_e[i] - t[i])))
    } else {
        (plus, std::array::from_fn(|i| 2.0 * (vec_e[i] + t[i])))
    }
}

/// Average-pool over correspondences followed by a `width → 9` layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectHead {
    pub fc: PerceptronParams,
}

impl DirectHead {
    pub fn init(width: usize, r: &mut impl Rng) -> Self {
        Self { fc: init_perceptron(r, width, 9) }
    }

    fn pool(features: &FeatureMap) -> Array2<f64> {
        let mut pooled = Array2::zeros((features.pairs(), features.channels()));
        for b in 0..features.pairs() {
            let n = features.n() as f64;
            pooled.row_mut(b).assign(&(features.pair(b).sum_axis(ndarray::Axis(0)) / n));
        }
        pooled
    }

    /// Raw (unnormalized) 9-vectors, one row per pair, plus the pooled input.
    pub fn forward(&self, features: &FeatureMap) -> (Array2<f64>, Array2<f64>) {
        let pooled = Self::pool(features);
        let out = pooled.dot(&self.fc.weight) + &self.fc.bias;
        (out, pooled)
    }

    /// Unit-norm `Vec(E)` per pair.
    pub fn predict(&self, features: &FeatureMap) -> Vec<[f64; 9]> {
        let (out, _) = self.forward(features);
        out.rows()
            .into_iter()
            .map(|r| {
                let norm = r.dot(&r).sqrt().max(f64::MIN_POSITIVE);
                std::array::from_fn(|i| r[i] / norm)
            })
            .collect()
    }
}

/// Network plus the optional direct-regression head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: NetworkParams,
    pub head: Option<DirectHead>,
}

/// Per-pair network output at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    /// Head output for direct models.
    pub direct: Option<[f64; 9]>,
}

impl Model {
    pub fn init(arch: Architecture, variant: Variant, seed: u64) -> Self {
        let mut r = rng::from_seed(seed);
        let net = NetworkParams::init(arch, &mut r);
        let head = (variant == Variant::Direct).then(|| DirectHead::init(arch.width, &mut r));
        Self { net, head }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.net.trainable_mut();
        if let Some(h) = &mut self.head {
            out.push(h.fc.weight.as_slice_mut().unwrap());
            out.push(h.fc.bias.as_slice_mut().unwrap());
        }
        out
    }

    pub fn zero_grads(&self) -> GradientSet {
        let mut g = GradientSet::zeros_like(&self.net);
        if let Some(h) = &self.head {
            g.tensors.push(vec![0.0; h.fc.weight.len()]);
            g.tensors.push(vec![0.0; h.fc.bias.len()]);
        }
        g
    }

    pub fn is_finite(&self) -> bool {
        self.net.is_finite()
            && self.head.as_ref().is_none_or(|h| {
                h.fc.weight.iter().chain(h.fc.bias.iter()).all(|v| v.is_finite())
            })
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let mut arrays = self.net.named_arrays();
        if let Some(h) = &self.head {
            arrays.push(NamedArray::matrix("head.fc.weight".into(), &h.fc.weight));
            arrays.push(NamedArray::vector("head.fc.bias".into(), &h.fc.bias));
        }
        Checkpoint { step, arrays }
    }

    /// Rebuilds a model, inferring the architecture from tensor shapes.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let input = ckpt
            .get("input.weight")
            .ok_or_else(|| TrainError::Checkpoint("missing tensor `input.weight`".into()))?;
        if input.shape.len() != 2 {
            return Err(TrainError::Checkpoint("`input.weight` must be a matrix".into()));
        }
        let width = input.shape[1];
        let blocks = (0..)
            .take_while(|i| ckpt.get(&format!("blocks.{i}.sub0.weight")).is_some())
            .count();
        let arch = Architecture { width, blocks };
        let net = NetworkParams::from_named_arrays(arch, &ckpt.arrays).map_err(TrainError::Checkpoint)?;
        let head = match (ckpt.get("head.fc.weight"), ckpt.get("head.fc.bias")) {
            (Some(w), Some(b)) => Some(DirectHead {
                fc: PerceptronParams {
                    weight: w.to_matrix(width, 9).map_err(TrainError::Checkpoint)?,
                    bias: b.to_vector(9).map_err(TrainError::Checkpoint)?,
                },
            }),
            (None, None) => None,
            _ => return Err(TrainError::Checkpoint("incomplete direct head".into())),
        };
        let expected = net.named_arrays().len() + if head.is_some() { 2 } else { 0 };
        if ckpt.arrays.len() != expected {
            return Err(TrainError::Checkpoint(format!(
                "{} tensors in checkpoint, model needs {expected}",
                ckpt.arrays.len()
            )));
        }
        Ok(Self { net, head })
    }

    /// Eval-mode forward pass over one pair.
    pub fn predict(&self, exec: Execution, x: &CorrespondenceSet) -> Prediction {
        let map = FeatureMap::from_correspondences(&[x]);
        let out = network_forward(exec, &self.net, &map, Mode::Eval, false);
        let direct = self.head.as_ref().map(|h| h.predict(&out.features)[0]);
        Prediction {
            logits: out.logits.data().iter().copied().collect(),
            weights: out.weights.data().iter().copied().collect(),
            direct,
        }
    }
}

/// One mini-batch with equal correspondence counts per pair.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<u64>,
    pub sets: Vec<CorrespondenceSet>,
    pub labels: Vec<Vec<bool>>,
    pub e_star: Vec<EssentialMatrix>,
}

impl Batch {
    /// Builds a batch, optionally keeping a random subset of `subsample`
    /// correspondences per pair.
    pub fn from_records(
        records: &[&PairRecord],
        subsample: Option<usize>,
        r: &mut impl Rng,
    ) -> Result<Self, TrainError> {
        let mut batch = Batch { ids: vec![], sets: vec![], labels: vec![], e_star: vec![] };
        for rec in records {
            let gt = rec
                .truth
                .as_ref()
                .ok_or_else(|| TrainError::InvalidData(format!("pair {} has no ground truth", rec.id)))?;
            let n = rec.len();
            let keep: Vec<usize> = match subsample {
                Some(k) if k < n => {
                    let mut idx = rand::seq::index::sample(r, n, k).into_vec();
                    idx.sort_unstable();
                    idx
                }
                _ => (0..n).collect(),
            };
            batch.ids.push(rec.id);
            batch.sets.push(rec.correspondences.select(&keep));
            batch.labels.push(keep.iter().map(|&i| gt.labels[i]).collect());
            batch.e_star.push(gt.essential);
        }
        let n0 = batch.sets.first().map_or(0, |s| s.len());
        if batch.sets.iter().any(|s| s.len() != n0) {
            return Err(TrainError::InvalidData(
                "pairs in a batch need equal correspondence counts; set a subsample size".into(),
            ));
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct HybridOutput {
    pub loss: f64,
    pub loss_cls: f64,
    /// Mean essential loss over pairs, reported even while `β` is zero.
    pub loss_ess: f64,
    pub grads: GradientSet,
    /// Pairs whose weighted solve failed or had a clamped eigen gradient.
    pub degraded: usize,
    pub tape: crate::netcore::Tape,
}

/// Loss and gradients of one batch in training mode.
pub fn hybrid_loss(exec: Execution, model: &Model, batch: &Batch, cfg: &LossConfig, step: u64) -> HybridOutput {
    let refs: Vec<&CorrespondenceSet> = batch.sets.iter().collect();
    let x = FeatureMap::from_correspondences(&refs);
    let (pairs, n) = (x.pairs(), x.n());
    let fwd = network_forward(exec, &model.net, &x, Mode::Train, true);
    let tape = fwd.tape.expect("tape requested");
    let (alpha, beta) = cfg.weights_at(step);
    let bsz = pairs as f64;

    let logits = fwd.logits.to_pair_vecs();
    let cls = classification_loss(&logits, &batch.labels);
    let mut d_logits = Array2::zeros((pairs * n, 1));
    if alpha > 0.0 {
        for (b, g) in cls.grad.iter().enumerate() {
            for (i, v) in g.iter().enumerate() {
                d_logits[(b * n + i, 0)] = alpha * v;
            }
        }
    }

    let mut ess_sum = 0.0;
    let mut degraded = 0;
    let mut d_features = None;
    let mut head_grads = None;
    match &model.head {
        Some(head) => {
            let (out, pooled) = head.forward(&tape.features);
            let mut d_out = Array2::zeros((pairs, 9));
            for b in 0..pairs {
                let row = out.row(b);
                let norm = row.dot(&row).sqrt();
                if !(norm > 0.0) {
                    degraded += 1;
                    continue;
                }
                let g: [f64; 9] = std::array::from_fn(|i| row[i] / norm);
                let (le, ge) = essential_loss(&g, &batch.e_star[b]);
                ess_sum += le;
                // d(r/‖r‖) = (I − ggᵀ)/‖r‖
                let gdot: f64 = (0..9).map(|i| g[i] * ge[i]).sum();
                for i in 0..9 {
                    d_out[(b, i)] = beta / bsz * (ge[i] - g[i] * gdot) / norm;
                }
            }
            if beta > 0.0 {
                let dw = pooled.t().dot(&d_out);
                let db = d_out.sum_axis(ndarray::Axis(0));
                let d_pooled = d_out.dot(&head.fc.weight.t());
                let mut df = Array2::zeros((pairs * n, tape.features.channels()));
                for b in 0..pairs {
                    let share = &d_pooled.row(b) / n as f64;
                    for i in 0..n {
                        df.row_mut(b * n + i).assign(&share);
                    }
                }
                d_features = Some(FeatureMap::from_rows(df, pairs));
                head_grads = Some((dw, db));
            }
        }
        None => {
            let weights = fwd.weights.to_pair_vecs();
            let per_pair = exec.map(pairs, |b| {
                let (e, cache) = weighted_eigen_solve(&batch.sets[b], &weights[b]).ok()?;
                let (le, ge) = essential_loss(&e, &batch.e_star[b]);
                let eg = (beta > 0.0).then(|| eigen_backward(&ge, &cache));
                if eg.as_ref().is_some_and(|g| g.degraded) || !le.is_finite() {
                    return None;
                }
                Some((le, eg.map(|g| g.grad_w)))
            });
            let mut d_w = Array2::zeros((pairs * n, 1));
            for (b, r) in per_pair.into_iter().enumerate() {
                match r {
                    None => degraded += 1,
                    Some((le, gw)) => {
                        ess_sum += le;
                        if let Some(gw) = gw {
                            for (i, v) in gw.iter().enumerate() {
                                d_w[(b * n + i, 0)] = beta / bsz * v;
                            }
                        }
                    }
                }
            }
            if beta > 0.0 {
                let d = trunc_tanh_backward(&fwd.logits, &fwd.weights, &FeatureMap::from_rows(d_w, pairs));
                d_logits += d.data();
            }
        }
    }
    let loss_ess = ess_sum / bsz;

    let (mut grads, _) = network_backward(
        exec,
        &model.net,
        &tape,
        &FeatureMap::from_rows(d_logits, pairs),
        d_features.as_ref(),
    );
    if let Some(head) = &model.head {
        let (dw, db) = head_grads.unwrap_or_else(|| (Array2::zeros(head.fc.weight.raw_dim()), Array1::zeros(9)));
        grads.tensors.push(dw.iter().copied().collect());
        grads.tensors.push(db.to_vec());
    }
    HybridOutput {
        loss: alpha * cls.loss + beta * loss_ess,
        loss_cls: cls.loss,
        loss_ess,
        grads,
        degraded,
        tape,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 1e-4;

    pub fn new(shapes: &[usize], lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(model: &Model, lr: f64) -> Self {
        let shapes: Vec<usize> = model.zero_grads().tensors.iter().map(Vec::len).collect();
        Self::new(&shapes, lr)
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(params: Vec<&mut [f64]>, grads: &GradientSet, state: &mut AdamState) {
    assert_eq!(params.len(), grads.tensors.len(), "one gradient per parameter tensor");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (k, (p, g)) in params.into_iter().zip(&grads.tensors).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        assert_eq!(p.len(), g.len(), "gradient shape");
        for i in 0..p.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= state.lr * mh / (vh.sqrt() + state.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Correspondences kept per pair and step; `None` uses all of them.
    pub subsample: Option<usize>,
    pub lr: f64,
    pub loss: LossConfig,
    pub arch: Architecture,
    pub seed: u64,
    pub val_every: u64,
    pub log_every: u64,
    /// Validation pairs used per check; `None` uses the whole split.
    pub val_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 50_000,
            batch_size: 32,
            subsample: None,
            lr: AdamState::DEFAULT_LR,
            loss: LossConfig::default(),
            arch: Architecture::default(),
            seed: 0,
            val_every: 500,
            log_every: 10,
            val_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        self.loss.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.subsample.is_some_and(|k| k < 8) {
            return bad("subsample must keep at least 8 correspondences");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.val_every == 0 || self.log_every == 0 {
            return bad("val_every and log_every must be >= 1");
        }
        if self.arch.width == 0 || self.arch.blocks == 0 {
            return bad("architecture must have non-zero width and depth");
        }
        Ok(())
    }
}

pub const METRICS_HEADER: [&str; 9] = [
    "step",
    "loss_total",
    "loss_cls",
    "loss_ess",
    "val_f1",
    "val_map5",
    "val_map10",
    "val_map20",
    "degenerate_count",
];

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: Model,
    pub best_model: Model,
    pub best_step: u64,
    pub best_metrics: Option<ValidationMetrics>,
    pub metrics_path: PathBuf,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub degenerate_total: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Trains a fresh model and writes `metrics.csv`, `best.ckpt` and
/// `last.ckpt` into `out_dir`.
///
/// Batches are drawn from a seeded shuffle of `train`; every `val_every`
/// steps the model is scored on `val` and the best validation score (mean of
/// mAP at 5°, 10° and 20°) is checkpointed. The metrics log gets a row
/// every `log_every` steps with that step's losses; validation columns are
/// filled on validation steps only. `degenerate_count` is cumulative.
pub fn train(
    exec: Execution,
    train_set: &[PairRecord],
    val_set: &[PairRecord],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::InvalidData("empty training split".into()));
    }
    if let Some(r) = train_set.iter().chain(val_set).find(|r| r.truth.is_none()) {
        return Err(TrainError::InvalidData(format!("pair {} has no ground truth", r.id)));
    }
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let mut log = csv::Writer::from_writer(fs::File::create(&metrics_path)?);
    log.write_record(METRICS_HEADER)?;
    log.flush()?;

    let mut model = Model::init(cfg.arch, cfg.loss.variant, rng::derive(cfg.seed, 0));
    let mut adam = AdamState::for_model(&model, cfg.lr);
    let mut r = rng::from_seed(rng::derive(cfg.seed, 1));
    let val: &[PairRecord] = match cfg.val_limit {
        Some(k) => &val_set[..k.min(val_set.len())],
        None => val_set,
    };

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut degenerate_total = 0u64;
    let mut best: Option<(f64, u64, ValidationMetrics, Model)> = None;

    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size.min(train_set.len()) {
            if cursor == order.len() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut r);
                cursor = 0;
            }
            picked.push(&train_set[order[cursor]]);
            cursor += 1;
        }
        let batch = Batch::from_records(&picked, cfg.subsample, &mut r)?;
        if cfg.loss.phase_change_at(step) {
            // Second moments estimated on classification gradients alone are
            // far below the scale of the eigen-solve gradient and would
            // inflate the first few hundred updates of the new phase.
            adam = AdamState::for_model(&model, cfg.lr);
        }
        let out = hybrid_loss(exec, &model, &batch, &cfg.loss, step);
        degenerate_total += out.degraded as u64;
        if !out.loss.is_finite() || !out.grads.is_finite() {
            let dump = out_dir.join(format!("nonfinite_batch_step{step}.bin"));
            let owned: Vec<PairRecord> = picked.iter().map(|&p| p.clone()).collect();
            crate::data::save_pairs(&dump, &owned)?;
            return Err(TrainError::NonFinite { step, dump });
        }
        model.net.update_running_stats(&out.tape);
        adam_step(model.trainable_mut(), &out.grads, &mut adam);

        let done = step + 1;
        let validate = done % cfg.val_every == 0 || done == cfg.steps;
        let metrics = if validate && !val.is_empty() {
            let m = eval::validate(exec, &model, val);
            let score = m.score();
            if best.as_ref().is_none_or(|(s, ..)| score > *s) {
                model.to_checkpoint(done).save(&best_path)?;
                best = Some((score, done, m, model.clone()));
            }
            Some(m)
        } else {
            None
        };
        if validate {
            model.to_checkpoint(done).save(&last_path)?;
        }
        if done % cfg.log_every == 0 || validate {
            log.write_record([
                done.to_string(),
                format!("{:?}", out.loss),
                format!("{:?}", out.loss_cls),
                format!("{:?}", out.loss_ess),
                opt(metrics.map(|m| m.f1)),
                opt(metrics.map(|m| m.map5)),
                opt(metrics.map(|m| m.map10)),
                opt(metrics.map(|m| m.map20)),
                degenerate_total.to_string(),
            ])?;
            log.flush()?;
        }
    }
    let final_step = cfg.steps;
    if cfg.steps == 0 || val.is_empty() {
        model.to_checkpoint(final_step).save(&last_path)?;
    }
    let (best_step, best_metrics, best_model) = match best {
        Some((_, s, m, bm)) => (s, Some(m), bm),
        None => {
            model.to_checkpoint(final_step).save(&best_path)?;
            (final_step, None, model.clone())
        }
    };
    log.into_inner().map_err(|e| TrainError::from(e.into_error()))?.flush()?;
    Ok(TrainReport {
        model,
        best_model,
        best_step,
        best_metrics,
        metrics_path,
        best_path,
        last_path,
        degenerate_total,
    })
}

/// Fraction of correct inlier/outlier predictions (`w > 0` means inlier).
pub fn classification_accuracy(weights: &[f64], labels: &[bool]) -> f64 {
    let hits = weights.iter().zip(labels).filter(|(&w, &l)| (w > 0.0) == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Writes the model as a checkpoint file.
pub fn save_model(model: &Model, step: u64, path: &Path) -> Result<(), TrainError> {
    model.to_checkpoint(step).save(path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(Model, u64), TrainError> {
    let ckpt = Checkpoint::load(path)?;
    Ok((Model::from_checkpoint(&ckpt)?, ckpt.step))
}

/// Appends one line to a text file, creating it if needed.
pub fn append_line(path: &Path, line: &str) -> std::io::Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")
}
