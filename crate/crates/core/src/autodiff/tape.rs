//! Reverse-mode autodiff tape.
//!
//! Every operation evaluates eagerly, appends a node, and returns a [`Var`]
//! handle. Nodes are topologically ordered by construction, so
//! [`Tape::backward`] walks them in strict reverse insertion order.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvSpec, GroupNormSaved};
use super::surrogate::SurrogateConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Storage precision for node values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Every node value is rounded to the nearest `f32` after evaluation.
    F32,
}

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// Tensor times a one-element variable.
    MulScalar(Var, Var),
    /// `c - s` for a one-element variable `s`.
    RSubScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Detach,
    Spike {
        input: Var,
        vth: f64,
        surrogate: SurrogateConfig,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        saved: GroupNormSaved,
    },
    Patchify(Var, usize),
    Unpatchify(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    precision: Precision,
    smooth_spikes: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. `v`, with zeros standing in for an absent path.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            precision,
            smooth_spikes: false,
        }
    }

    /// Gradient-check mode: `spike` emits the surrogate primitive instead of
    /// a hard step, so finite differences see exactly the function whose
    /// derivative the backward pass computes.
    pub fn set_smooth_spikes(&mut self, on: bool) {
        self.smooth_spikes = on;
    }

    pub fn smooth_spikes(&self) -> bool {
        self.smooth_spikes
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignNode(v.index));
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn push(&mut self, op_name: &'static str, mut value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.precision == Precision::F32 {
            value.round_to_f32();
        }
        value.check_finite(op_name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// A differentiable input (parameter or probed state).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Constant, false)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        self.value(a).zip_map(self.value(b), name, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.needs(a) || self.needs(b);
        self.push("add", v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.needs(a) || self.needs(b);
        self.push("sub", v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        self.push("mul", v, Op::Mul(a, b), rg)
    }

    /// `c · a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| c * x);
        let rg = self.needs(a);
        self.push("scale", v, Op::Scale(a, c), rg)
    }

    /// `c + a` for a constant `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| c + x);
        let rg = self.needs(a);
        self.push("add_scalar", v, Op::AddScalar(a), rg)
    }

    /// `s · a` where `s` holds a single value.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check(a)?;
        self.check(s)?;
        if !self.value(s).is_scalar() {
            return Err(Error::shape("mul_scalar", format!("scalar expected, got {:?}", self.value(s).shape())));
        }
        let c = self.value(s).item();
        let v = self.value(a).map(|x| c * x);
        let rg = self.needs(a) || self.needs(s);
        self.push("mul_scalar", v, Op::MulScalar(a, s), rg)
    }

    /// `c - s` for a constant `c` and a one-element `s`.
    pub fn rsub_scalar(&mut self, c: f64, s: Var) -> Result<Var> {
        self.check(s)?;
        let v = self.value(s).map(|x| c - x);
        let rg = self.needs(s);
        self.push("rsub_scalar", v, Op::RSubScalar(s), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(f64::tanh);
        let rg = self.needs(a);
        self.push("tanh", v, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.needs(a);
        self.push("sigmoid", v, Op::Sigmoid(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x * x);
        let rg = self.needs(a);
        self.push("square", v, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(a);
        self.push("sum", v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = Tensor::scalar(self.value(a).mean());
        let rg = self.needs(a);
        self.push("mean", v, Op::Mean(a), rg)
    }

    /// Forward identity that contributes no gradient to its input.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).clone();
        self.push("detach", v, Op::Detach, false)
    }

    /// Heaviside step `input >= vth`, differentiated through the surrogate.
    pub fn spike(&mut self, input: Var, vth: f64, surrogate: SurrogateConfig) -> Result<Var> {
        self.check(input)?;
        let v = if self.smooth_spikes {
            self.value(input).map(|x| surrogate.primitive(x - vth))
        } else {
            self.value(input).map(|x| if x >= vth { 1.0 } else { 0.0 })
        };
        let rg = self.needs(input);
        self.push(
            "spike",
            v,
            Op::Spike {
                input,
                vth,
                surrogate,
            },
            rg,
        )
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        self.check(input)?;
        self.check(weight)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let v = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        let rg = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        self.push(
            "conv2d",
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            rg,
        )
    }

    pub fn group_norm(&mut self, input: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(input)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (v, saved) =
            kernels::group_norm_forward(self.value(input), groups, self.value(gamma), self.value(beta), eps)?;
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        self.push(
            "group_norm",
            v,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                saved,
            },
            rg,
        )
    }

    pub fn patchify(&mut self, input: Var, p: usize) -> Result<Var> {
        self.check(input)?;
        let v = kernels::patchify(self.value(input), p)?;
        let rg = self.needs(input);
        self.push("patchify", v, Op::Patchify(input, p), rg)
    }

    pub fn unpatchify(&mut self, input: Var, p: usize) -> Result<Var> {
        self.check(input)?;
        let v = kernels::unpatchify(self.value(input), p)?;
        let rg = self.needs(input);
        self.push("unpatchify", v, Op::Unpatchify(input, p), rg)
    }

    /// Element-mean squared error between two same-shaped variables.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Accumulates `∂loss/∂node` for every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.index] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Constant | Op::Detach => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = g.zip_map(self.value(*b), "mul_backward", |x, y| x * y)?;
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = g.zip_map(self.value(*a), "mul_backward", |x, y| x * y)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| c * x)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulScalar(a, s) => {
                if self.needs(*a) {
                    let c = self.value(*s).item();
                    self.accumulate(grads, *a, g.map(|x| c * x));
                }
                if self.needs(*s) {
                    let dot: f64 = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    let shape = self.value(*s).shape().to_vec();
                    self.accumulate(grads, *s, Tensor::new(shape, vec![dot])?);
                }
            }
            Op::RSubScalar(s) => self.accumulate(grads, *s, g.map(|x| -x)),
            Op::Tanh(a) => {
                let ga = g.zip_map(&node.value, "tanh_backward", |x, y| x * (1.0 - y * y))?;
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(&node.value, "sigmoid_backward", |x, y| x * y * (1.0 - y))?;
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), "square_backward", |x, y| 2.0 * y * x)?;
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let gv = g.item() / t.numel() as f64;
                self.accumulate(grads, *a, Tensor::full(t.shape(), gv));
            }
            Op::Spike {
                input,
                vth,
                surrogate,
            } => {
                let ga = g.zip_map(self.value(*input), "spike_backward", |x, m| x * surrogate.derivative(m - vth))?;
                self.accumulate(grads, *input, ga);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let cg = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    bias.is_some_and(|b| self.needs(b)),
                    g,
                    *spec,
                    self.needs(*input),
                    self.needs(*weight),
                )?;
                if let Some(gi) = cg.input {
                    self.accumulate(grads, *input, gi);
                }
                if let Some(gw) = cg.weight {
                    self.accumulate(grads, *weight, gw);
                }
                if let (Some(b), Some(gb)) = (bias, cg.bias) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                saved,
            } => {
                let (dx, dgamma, dbeta) = kernels::group_norm_backward(saved, *groups, self.value(*gamma), g)?;
                self.accumulate(grads, *input, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Patchify(a, p) => self.accumulate(grads, *a, kernels::unpatchify(g, *p)?),
            Op::Unpatchify(a, p) => self.accumulate(grads, *a, kernels::patchify(g, *p)?),
        }
        Ok(())
    }
}
