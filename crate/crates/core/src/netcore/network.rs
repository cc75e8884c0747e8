//! The residual perceptron stack and its backward pass.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::checkpoint::NamedArray;
use super::layers::*;
use super::FeatureMap;
use crate::exec::Execution;

/// Channel width and residual depth. Inputs always have 4 channels and the
/// output head always has 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub width: usize,
    pub blocks: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            width: 128,
            blocks: 12,
        }
    }
}

pub const INPUT_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubBlockParams {
    pub perceptron: PerceptronParams,
    pub bn: BatchNormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlockParams {
    pub sub: [SubBlockParams; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub input: PerceptronParams,
    pub blocks: Vec<ResidualBlockParams>,
    pub output: PerceptronParams,
}

/// He-initialized perceptron, zero bias.
pub fn init_perceptron(rng: &mut impl Rng, c_in: usize, c_out: usize) -> PerceptronParams {
    let scale = (2.0 / c_in as f64).sqrt();
    PerceptronParams {
        weight: Array2::from_shape_simple_fn((c_in, c_out), || {
            scale * rng.sample::<f64, _>(StandardNormal)
        }),
        bias: Array1::zeros(c_out),
    }
}

impl NetworkParams {
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Self {
        let w = arch.width;
        let input = init_perceptron(rng, INPUT_CHANNELS, w);
        let blocks = (0..arch.blocks)
            .map(|_| ResidualBlockParams {
                sub: std::array::from_fn(|_| SubBlockParams {
                    perceptron: init_perceptron(rng, w, w),
                    bn: BatchNormParams::new(w),
                }),
            })
            .collect();
        let output = init_perceptron(rng, w, 1);
        Self {
            input,
            blocks,
            output,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            width: self.input.c_out(),
            blocks: self.blocks.len(),
        }
    }

    fn perceptrons(&self) -> impl Iterator<Item = &PerceptronParams> {
        std::iter::once(&self.input)
            .chain(self.blocks.iter().flat_map(|b| b.sub.iter().map(|s| &s.perceptron)))
            .chain(std::iter::once(&self.output))
    }

    /// Trainable tensors in canonical order: input weight/bias, then per
    /// sub-block weight, bias, gamma, beta, then output weight/bias.
    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![slice(&self.input.weight), self.input.bias.as_slice().unwrap()];
        for b in &self.blocks {
            for s in &b.sub {
                out.push(slice(&s.perceptron.weight));
                out.push(s.perceptron.bias.as_slice().unwrap());
                out.push(s.bn.gamma.as_slice().unwrap());
                out.push(s.bn.beta.as_slice().unwrap());
            }
        }
        out.push(slice(&self.output.weight));
        out.push(self.output.bias.as_slice().unwrap());
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.input.weight.as_slice_mut().unwrap(),
            self.input.bias.as_slice_mut().unwrap(),
        ];
        for b in &mut self.blocks {
            for s in &mut b.sub {
                out.push(s.perceptron.weight.as_slice_mut().unwrap());
                out.push(s.perceptron.bias.as_slice_mut().unwrap());
                out.push(s.bn.gamma.as_slice_mut().unwrap());
                out.push(s.bn.beta.as_slice_mut().unwrap());
            }
        }
        out.push(self.output.weight.as_slice_mut().unwrap());
        out.push(self.output.bias.as_slice_mut().unwrap());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Every tensor, including batch-norm running statistics, by name.
    pub fn named_arrays(&self) -> Vec<NamedArray> {
        let mut out = Vec::new();
        push_perceptron(&mut out, "input", &self.input);
        for (i, b) in self.blocks.iter().enumerate() {
            for (j, s) in b.sub.iter().enumerate() {
                let p = format!("blocks.{i}.sub{j}");
                push_perceptron(&mut out, &p, &s.perceptron);
                let bn = &s.bn;
                out.push(NamedArray::vector(format!("{p}.bn.gamma"), &bn.gamma));
                out.push(NamedArray::vector(format!("{p}.bn.beta"), &bn.beta));
                out.push(NamedArray::vector(format!("{p}.bn.running_mean"), &bn.running_mean));
                out.push(NamedArray::vector(format!("{p}.bn.running_var"), &bn.running_var));
                out.push(NamedArray::scalar(format!("{p}.bn.momentum"), bn.momentum));
                out.push(NamedArray::scalar(format!("{p}.bn.epsilon"), bn.epsilon));
            }
        }
        push_perceptron(&mut out, "output", &self.output);
        out
    }

    /// Rebuilds parameters for `arch` from named arrays, verifying every shape.
    pub fn from_named_arrays(arch: Architecture, arrays: &[NamedArray]) -> Result<Self, String> {
        let find = |name: &str| {
            arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| format!("missing tensor `{name}`"))
        };
        let w = arch.width;
        let input = read_perceptron(&find, "input", INPUT_CHANNELS, w)?;
        let mut blocks = Vec::with_capacity(arch.blocks);
        for i in 0..arch.blocks {
            let mut subs = Vec::with_capacity(2);
            for j in 0..2 {
                let p = format!("blocks.{i}.sub{j}");
                let perceptron = read_perceptron(&find, &p, w, w)?;
                let bn = BatchNormParams {
                    gamma: find(&format!("{p}.bn.gamma"))?.to_vector(w)?,
                    beta: find(&format!("{p}.bn.beta"))?.to_vector(w)?,
                    running_mean: find(&format!("{p}.bn.running_mean"))?.to_vector(w)?,
                    running_var: find(&format!("{p}.bn.running_var"))?.to_vector(w)?,
                    momentum: find(&format!("{p}.bn.momentum"))?.to_scalar()?,
                    epsilon: find(&format!("{p}.bn.epsilon"))?.to_scalar()?,
                };
                if bn.running_var.iter().any(|&v| v < 0.0) || !(bn.momentum > 0.0 && bn.momentum < 1.0) {
                    return Err(format!("invalid batch-norm state in `{p}`"));
                }
                subs.push(SubBlockParams { perceptron, bn });
            }
            let [a, b]: [SubBlockParams; 2] = subs.try_into().expect("two sub-blocks");
            blocks.push(ResidualBlockParams { sub: [a, b] });
        }
        let output = read_perceptron(&find, "output", w, 1)?;
        Ok(Self {
            input,
            blocks,
            output,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.perceptrons()
            .all(|p| p.weight.iter().chain(p.bias.iter()).all(|v| v.is_finite()))
    }

    /// Folds the batch statistics recorded in a training-mode tape into the
    /// running averages.
    pub fn update_running_stats(&mut self, tape: &Tape) {
        for (b, bt) in self.blocks.iter_mut().zip(&tape.blocks) {
            for (s, st) in b.sub.iter_mut().zip(&bt.sub) {
                if st.bn.training {
                    s.bn.update_running(&st.bn);
                }
            }
        }
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn push_perceptron(out: &mut Vec<NamedArray>, prefix: &str, p: &PerceptronParams) {
    out.push(NamedArray::matrix(format!("{prefix}.weight"), &p.weight));
    out.push(NamedArray::vector(format!("{prefix}.bias"), &p.bias));
}

fn read_perceptron<'a>(
    find: &impl Fn(&str) -> Result<&'a NamedArray, String>,
    prefix: &str,
    c_in: usize,
    c_out: usize,
) -> Result<PerceptronParams, String> {
    Ok(PerceptronParams {
        weight: find(&format!("{prefix}.weight"))?.to_matrix(c_in, c_out)?,
        bias: find(&format!("{prefix}.bias"))?.to_vector(c_out)?,
    })
}

/// Gradients aligned one-to-one with [`NetworkParams::trainable`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub tensors: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            tensors: params.trainable().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct SubBlockTape {
    pub cn: ContextNormCache,
    pub bn: BatchNormCache,
    /// Post-ReLU output.
    pub act: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct BlockTape {
    pub input: FeatureMap,
    pub sub: Vec<SubBlockTape>,
}

/// Forward intermediates needed by [`network_backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    pub input: FeatureMap,
    pub blocks: Vec<BlockTape>,
    pub features: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `B·N × 1` pre-activation logits.
    pub logits: FeatureMap,
    /// `tanh(ReLU(logits))`.
    pub weights: FeatureMap,
    /// Output of the last residual block, `B·N × width`.
    pub features: FeatureMap,
    pub tape: Option<Tape>,
}

fn sub_block_forward(
    exec: Execution,
    p: &SubBlockParams,
    x: &FeatureMap,
    training: bool,
) -> SubBlockTape {
    let h = perceptron_forward(exec, x, &p.perceptron);
    let cn = context_norm_forward(exec, &h);
    drop(h);
    let (bn_out, bn) = batch_norm_forward(exec, &cn.out, &p.bn, training);
    let act = relu_forward(&bn_out);
    SubBlockTape { cn, bn, act }
}

/// Runs the network. With `keep_tape` the intermediates are retained for a
/// backward pass; otherwise they are dropped as soon as possible.
pub fn network_forward(
    exec: Execution,
    params: &NetworkParams,
    x: &FeatureMap,
    mode: Mode,
    keep_tape: bool,
) -> ForwardOutput {
    assert_eq!(x.channels(), INPUT_CHANNELS, "network input must have 4 channels");
    let training = mode == Mode::Train;
    let mut h = perceptron_forward(exec, x, &params.input);
    if !training && !keep_tape {
        for bp in &params.blocks {
            let mut a = perceptron_forward(exec, &h, &bp.sub[0].perceptron);
            context_norm_inplace(exec, &mut a);
            batch_norm_relu_eval_inplace(exec, &mut a, &bp.sub[0].bn);
            a = perceptron_forward(exec, &a, &bp.sub[1].perceptron);
            context_norm_inplace(exec, &mut a);
            batch_norm_relu_eval_inplace(exec, &mut a, &bp.sub[1].bn);
            *a.data_mut() += h.data();
            h = a;
        }
        let logits = perceptron_forward(exec, &h, &params.output);
        let weights = trunc_tanh_forward(&logits);
        return ForwardOutput {
            logits,
            weights,
            features: h,
            tape: None,
        };
    }
    let mut blocks = Vec::new();
    for bp in &params.blocks {
        let s0 = sub_block_forward(exec, &bp.sub[0], &h, training);
        let s1 = sub_block_forward(exec, &bp.sub[1], &s0.act, training);
        let mut out = s1.act.data().clone();
        out += h.data();
        let out = FeatureMap::from_rows(out, x.pairs());
        if keep_tape {
            blocks.push(BlockTape {
                input: h,
                sub: vec![s0, s1],
            });
        }
        h = out;
    }
    let logits = perceptron_forward(exec, &h, &params.output);
    let weights = trunc_tanh_forward(&logits);
    let tape = keep_tape.then(|| Tape {
        input: x.clone(),
        blocks,
        features: h.clone(),
    });
    ForwardOutput {
        logits,
        weights,
        features: h,
        tape,
    }
}

fn sub_block_backward(
    exec: Execution,
    p: &SubBlockParams,
    input: &FeatureMap,
    t: &SubBlockTape,
    d_act: &FeatureMap,
    grads: &mut [Vec<f64>],
) -> FeatureMap {
    let d_bn = relu_backward(&t.act, d_act);
    let (d_cn, g_bn) = batch_norm_backward(exec, &p.bn, &t.bn, &d_bn);
    let d_h = context_norm_backward(exec, &t.cn, &d_cn);
    let (d_in, g_p) = perceptron_backward(exec, input, &p.perceptron, &d_h);
    grads[0] = g_p.weight.into_raw_vec_and_offset().0;
    grads[1] = g_p.bias.to_vec();
    grads[2] = g_bn.gamma.to_vec();
    grads[3] = g_bn.beta.to_vec();
    d_in
}

/// Backpropagates `d_logits` (and optionally a gradient arriving directly on
/// the last block's features) through the network.
///
/// Returns parameter gradients and the gradient with respect to the input map.
pub fn network_backward(
    exec: Execution,
    params: &NetworkParams,
    tape: &Tape,
    d_logits: &FeatureMap,
    d_features: Option<&FeatureMap>,
) -> (GradientSet, FeatureMap) {
    let mut grads = GradientSet::zeros_like(params);
    let nt = grads.tensors.len();
    let (mut d_h, g_out) = perceptron_backward(exec, &tape.features, &params.output, d_logits);
    grads.tensors[nt - 2] = g_out.weight.into_raw_vec_and_offset().0;
    grads.tensors[nt - 1] = g_out.bias.to_vec();
    if let Some(extra) = d_features {
        *d_h.data_mut() += extra.data();
    }
    for (bi, (bp, bt)) in params.blocks.iter().zip(&tape.blocks).enumerate().rev() {
        let base = 2 + bi * 8;
        let d_mid = sub_block_backward(
            exec,
            &bp.sub[1],
            &bt.sub[0].act,
            &bt.sub[1],
            &d_h,
            &mut grads.tensors[base + 4..base + 8],
        );
        let mut d_in = sub_block_backward(
            exec,
            &bp.sub[0],
            &bt.input,
            &bt.sub[0],
            &d_mid,
            &mut grads.tensors[base..base + 4],
        );
        *d_in.data_mut() += d_h.data();
        d_h = d_in;
    }
    let (d_x, g_in) = perceptron_backward(exec, &tape.input, &params.input, &d_h);
    grads.tensors[0] = g_in.weight.into_raw_vec_and_offset().0;
    grads.tensors[1] = g_in.bias.to_vec();
    (grads, d_x)
}
