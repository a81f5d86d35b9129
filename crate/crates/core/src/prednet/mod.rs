//! Recurrent spiking frame predictor.
//!
//! `patchify → [conv → group norm → circuit → neuron] × L → conv → unpatchify`
//!
//! Feature-map resolution is constant through the stack. The head
//! convolution has neither normalization nor neurons, so its output is a
//! real-valued frame.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorDtype, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvSpec, Precision, Tape, Var};
use crate::circuit::{modulation_on_tape, CircuitConfig, CircuitVars, CircuitWeights, Pathway};
use crate::error::{Error, Result};
use crate::neuron::{step_on_tape, NeuronParams, NeuronScalars, NeuronState, StateVars};
use crate::tensor::Tensor;

/// Architecture description.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Frame shape `(C, H, W)`.
    pub frame: [usize; 3],
    pub patch: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub norm_groups: usize,
    pub norm_eps: f64,
    pub neuron: NeuronParams,
    pub circuit: CircuitConfig,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.frame;
        let p = self.patch;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("network", "frame dimensions must be positive"));
        }
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::invalid("network", format!("patch {p} must divide frame {h}x{w}")));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::invalid("network", "need at least one spiking block with positive width"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::invalid("network", "kernel size must be odd"));
        }
        for &ch in &self.channels {
            if self.norm_groups == 0 || ch % self.norm_groups != 0 {
                return Err(Error::invalid(
                    "network",
                    format!("norm_groups={} must divide channels={ch}", self.norm_groups),
                ));
            }
            if self.neuron.kind.is_stc() {
                self.circuit.geometry(ch)?;
            }
        }
        self.neuron.validate()
    }

    /// Channels entering the first block.
    pub fn in_channels(&self) -> usize {
        self.frame[0] * self.patch * self.patch
    }

    /// Feature-map size `(H/p, W/p)`.
    pub fn feature_hw(&self) -> (usize, usize) {
        (self.frame[1] / self.patch, self.frame[2] / self.patch)
    }

    /// Whether a block carries circuits at all.
    pub fn has_circuit(&self) -> bool {
        self.neuron.kind.is_stc()
    }

    pub fn block_in_out(&self, i: usize) -> (usize, usize) {
        let cin = if i == 0 { self.in_channels() } else { self.channels[i - 1] };
        (cin, self.channels[i])
    }

    fn conv_spec(&self) -> ConvSpec {
        ConvSpec::same(self.kernel, 1)
    }
}

/// Recurrent schedule for one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RolloutPlan {
    pub t_in: usize,
    pub t_out: usize,
    /// Feed ground truth for all `t_in` input frames. When false only the
    /// first frame is observed and every later step consumes the previous
    /// prediction.
    pub teacher_forcing: bool,
}

impl RolloutPlan {
    pub fn new(t_in: usize, t_out: usize) -> Self {
        RolloutPlan {
            t_in,
            t_out,
            teacher_forcing: true,
        }
    }

    /// Steps executed: the step consuming frame `t` predicts frame `t+1`,
    /// so the final prediction needs `t_in + t_out - 1` steps.
    pub fn steps(&self) -> usize {
        self.t_in + self.t_out - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_in == 0 || self.t_out == 0 {
            return Err(Error::invalid("rollout", "t_in and t_out must be at least 1"));
        }
        Ok(())
    }
}

/// Learnable parameters and the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    config: NetworkConfig,
    tensors: IndexMap<String, Tensor>,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

pub fn block_key(i: usize, name: &str) -> String {
    format!("block{i}.{name}")
}

impl NetworkParams {
    /// Fresh parameters: fan-in uniform conv weights, zero biases, unit
    /// norm scale, zero norm shift, neuron scalars at their configured
    /// initial values.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel;
        let mut tensors = IndexMap::new();
        for i in 0..config.channels.len() {
            let (cin, cout) = config.block_in_out(i);
            let bound = 1.0 / ((cin * k * k) as f64).sqrt();
            tensors.insert(block_key(i, "conv.weight"), uniform(&[cout, cin, k, k], bound, &mut rng));
            tensors.insert(block_key(i, "conv.bias"), Tensor::zeros(&[cout]));
            tensors.insert(block_key(i, "norm.gamma"), Tensor::ones(&[cout]));
            tensors.insert(block_key(i, "norm.beta"), Tensor::zeros(&[cout]));
            if config.has_circuit() {
                let cw = CircuitWeights::init(&config.circuit, cout, &mut rng)?;
                for p in [Pathway::Temporal, Pathway::Spatial] {
                    if let Some((w, b)) = cw.get(p) {
                        tensors.insert(block_key(i, &format!("{}.weight", p.prefix())), w.clone());
                        tensors.insert(block_key(i, &format!("{}.bias", p.prefix())), b.clone());
                    }
                }
            }
            let n = &config.neuron;
            if n.kind.has_learnable_alpha() {
                tensors.insert(block_key(i, "neuron.alpha_raw"), Tensor::scalar(n.alpha_raw()));
            }
            if n.kind.is_two_compartment() {
                tensors.insert(block_key(i, "neuron.mu_d"), Tensor::scalar(n.lmh.mu_d));
                tensors.insert(block_key(i, "neuron.mu_s"), Tensor::scalar(n.lmh.mu_s));
                tensors.insert(block_key(i, "neuron.lambda_d"), Tensor::scalar(n.lmh.lambda_d));
                tensors.insert(block_key(i, "neuron.lambda_s"), Tensor::scalar(n.lmh.lambda_s));
            }
        }
        let clast = *config.channels.last().expect("validated");
        let cout = config.in_channels();
        let bound = 1.0 / ((clast * k * k) as f64).sqrt();
        tensors.insert("head.weight".into(), uniform(&[cout, clast, k, k], bound, &mut rng));
        tensors.insert("head.bias".into(), Tensor::zeros(&[cout]));
        Ok(NetworkParams { config, tensors })
    }

    /// Rebuilds parameters from named tensors, validating names and shapes
    /// against `config`.
    pub fn from_tensors(config: NetworkConfig, tensors: IndexMap<String, Tensor>) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        if reference.tensors.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this architecture, found {}",
                reference.tensors.len(),
                tensors.len()
            )));
        }
        let mut ordered = IndexMap::new();
        for (name, want) in &reference.tensors {
            let got = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if got.shape() != want.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, architecture needs {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
            ordered.insert(name.clone(), got.clone());
        }
        Ok(NetworkParams {
            config,
            tensors: ordered,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn tensors(&self) -> &IndexMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut IndexMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor on the tape, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundNet> {
        let mut vars = IndexMap::new();
        for (name, t) in &self.tensors {
            let v = if trainable {
                tape.leaf(t.clone())?
            } else {
                tape.constant(t.clone())?
            };
            vars.insert(name.clone(), v);
        }
        let get = |name: &str| -> Result<Var> {
            vars.get(name)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let mut blocks = Vec::with_capacity(self.config.channels.len());
        for i in 0..self.config.channels.len() {
            let key = |s: &str| block_key(i, s);
            let mut circuit = CircuitVars::default();
            if self.config.has_circuit() {
                if self.config.circuit.temporal {
                    circuit.temporal = Some((get(&key("tc.weight"))?, get(&key("tc.bias"))?));
                }
                if self.config.circuit.spatial {
                    circuit.spatial = Some((get(&key("sc.weight"))?, get(&key("sc.bias"))?));
                }
            }
            let kind = self.config.neuron.kind;
            let mut scalars = NeuronScalars::default();
            if kind.has_learnable_alpha() {
                let raw = get(&key("neuron.alpha_raw"))?;
                scalars.alpha = Some(tape.sigmoid(raw)?);
            }
            if kind.is_two_compartment() {
                scalars.mu_d = Some(get(&key("neuron.mu_d"))?);
                scalars.mu_s = Some(get(&key("neuron.mu_s"))?);
                scalars.lambda_d = Some(get(&key("neuron.lambda_d"))?);
                scalars.lambda_s = Some(get(&key("neuron.lambda_s"))?);
            }
            blocks.push(BlockVars {
                conv_w: get(&key("conv.weight"))?,
                conv_b: get(&key("conv.bias"))?,
                gamma: get(&key("norm.gamma"))?,
                beta: get(&key("norm.beta"))?,
                circuit,
                scalars,
            });
        }
        Ok(BoundNet {
            head_w: get("head.weight")?,
            head_b: get("head.bias")?,
            vars,
            blocks,
        })
    }

    /// One recurrent step on plain tensors. `states` is filled with zero
    /// states on the first call.
    pub fn forward_step(&self, states: &mut Vec<NeuronState>, frame: &Tensor) -> Result<Tensor> {
        Ok(self.forward_step_traced(states, frame)?.0)
    }

    /// As [`Self::forward_step`], also returning per-layer probe values.
    pub fn forward_step_traced(
        &self,
        states: &mut Vec<NeuronState>,
        frame: &Tensor,
    ) -> Result<(Tensor, Vec<LayerProbeValues>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let mut sv = if states.is_empty() {
            None
        } else {
            Some(
                states
                    .iter()
                    .map(|s| StateVars::from_state(&mut tape, s))
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        let fv = tape.constant(frame.clone())?;
        let out = forward_step(&mut tape, &self.config, &bound, &mut sv, fv)?;
        *states = sv
            .expect("initialized by forward_step")
            .iter()
            .map(|s| s.to_state(&tape))
            .collect();
        let probes = out
            .layers
            .iter()
            .map(|p| LayerProbeValues {
                beta: tape.value(p.beta).clone(),
                gamma: tape.value(p.gamma).clone(),
                m: tape.value(p.m).clone(),
                spikes: tape.value(p.spikes).clone(),
                alpha: p.alpha.map(|a| tape.value(a).item()),
            })
            .collect();
        Ok((tape.value(out.prediction).clone(), probes))
    }

    /// Recursive multi-frame prediction on plain tensors.
    ///
    /// `inputs` is `[B, T, C, H, W]` with `T >= t_in`; returns
    /// `[B, t_out, C, H, W]`.
    pub fn rollout(&self, plan: &RolloutPlan, inputs: &Tensor) -> Result<Tensor> {
        self.rollout_with(plan, inputs, |_, _| Ok(()))
    }

    /// [`Self::rollout`] that hands each step's probes to `observe`.
    pub fn rollout_with(
        &self,
        plan: &RolloutPlan,
        inputs: &Tensor,
        mut observe: impl FnMut(usize, &[LayerProbeValues]) -> Result<()>,
    ) -> Result<Tensor> {
        plan.validate()?;
        let (_, t, _, _, _) = inputs.dims5("rollout")?;
        if t < plan.t_in {
            return Err(Error::invalid("rollout", format!("need {} input frames, got {t}", plan.t_in)));
        }
        let mut states = Vec::new();
        let mut preds = Vec::with_capacity(plan.t_out);
        let mut last: Option<Tensor> = None;
        for step in 0..plan.steps() {
            let frame = match (&last, step < plan.t_in && (plan.teacher_forcing || step == 0)) {
                (_, true) => inputs.frame(step)?,
                (Some(prev), false) => prev.clone(),
                (None, false) => unreachable!("step 0 always observes"),
            };
            let (pred, probes) = self.forward_step_traced(&mut states, &frame)?;
            observe(step, &probes)?;
            if step + 1 >= plan.t_in {
                preds.push(pred.clone());
            }
            last = Some(pred);
        }
        Tensor::stack_frames(&preds)
    }
}

/// Block parameters as tape variables.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub conv_w: Var,
    pub conv_b: Var,
    pub gamma: Var,
    pub beta: Var,
    pub circuit: CircuitVars,
    pub scalars: NeuronScalars,
}

/// All parameters bound to one tape.
#[derive(Clone, Debug)]
pub struct BoundNet {
    pub vars: IndexMap<String, Var>,
    pub blocks: Vec<BlockVars>,
    pub head_w: Var,
    pub head_b: Var,
}

/// Per-layer tape variables exposed by one step.
#[derive(Clone, Copy, Debug)]
pub struct LayerProbe {
    pub beta: Var,
    pub gamma: Var,
    pub m: Var,
    pub spikes: Var,
    pub alpha: Option<Var>,
}

/// Value-level copy of [`LayerProbe`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerProbeValues {
    pub beta: Tensor,
    pub gamma: Tensor,
    pub m: Tensor,
    pub spikes: Tensor,
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StepOut {
    pub prediction: Var,
    pub layers: Vec<LayerProbe>,
}

/// One recurrent step on the tape. States are created (zeros) when `None`.
pub fn forward_step(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    net: &BoundNet,
    states: &mut Option<Vec<StateVars>>,
    frame: Var,
) -> Result<StepOut> {
    let [c, h, w] = cfg.frame;
    let (b, fc, fh, fw) = tape.value(frame).dims4("forward_step")?;
    if (fc, fh, fw) != (c, h, w) {
        return Err(Error::shape(
            "forward_step",
            format!("frame {:?} vs configured {:?}", [fc, fh, fw], cfg.frame),
        ));
    }
    let (ho, wo) = cfg.feature_hw();
    if states.is_none() {
        let init = cfg
            .channels
            .iter()
            .map(|&ch| StateVars::zeros(tape, cfg.neuron.kind, &[b, ch, ho, wo]))
            .collect::<Result<Vec<_>>>()?;
        *states = Some(init);
    }
    let st = states.as_mut().expect("just set");
    if st.len() != cfg.channels.len() || tape.value(st[0].v).shape()[0] != b {
        return Err(Error::shape("forward_step", "states do not match network/batch"));
    }

    let mut h_in = tape.patchify(frame, cfg.patch)?;
    let mut layers = Vec::with_capacity(cfg.channels.len());
    for (i, blk) in net.blocks.iter().enumerate() {
        let conv = tape.conv2d(h_in, blk.conv_w, Some(blk.conv_b), cfg.conv_spec())?;
        let x = tape.group_norm(conv, cfg.norm_groups, blk.gamma, blk.beta, cfg.norm_eps)?;
        let modulation = if cfg.has_circuit() {
            Some(modulation_on_tape(tape, &cfg.circuit, &blk.circuit, st[i].s_prev)?)
        } else {
            None
        };
        let (out, next) = step_on_tape(tape, &cfg.neuron, &blk.scalars, &st[i], x, modulation)?;
        let (beta, gamma) = match modulation {
            Some(bg) => bg,
            None => {
                let z = tape.constant(Tensor::zeros(tape.value(x).shape()))?;
                (z, z)
            }
        };
        let (beta, gamma) = match cfg.neuron.modulation_override {
            Some((bv, gv)) if cfg.has_circuit() => {
                let shape = tape.value(x).shape().to_vec();
                (tape.constant(Tensor::full(&shape, bv))?, tape.constant(Tensor::full(&shape, gv))?)
            }
            _ => (beta, gamma),
        };
        layers.push(LayerProbe {
            beta,
            gamma,
            m: out.m,
            spikes: out.spikes,
            alpha: blk.scalars.alpha,
        });
        st[i] = next;
        h_in = out.spikes;
    }
    let head = tape.conv2d(h_in, net.head_w, Some(net.head_b), cfg.conv_spec())?;
    let prediction = tape.unpatchify(head, cfg.patch)?;
    Ok(StepOut { prediction, layers })
}

/// Tape-level rollout output.
#[derive(Clone, Debug)]
pub struct RolloutVars {
    /// Output of every step; entry `k` predicts frame `k + 1`.
    pub steps: Vec<Var>,
    pub t_in: usize,
}

impl RolloutVars {
    /// Predictions for frames `t_in .. t_in + t_out`.
    pub fn predictions(&self) -> &[Var] {
        &self.steps[self.t_in - 1..]
    }

    /// Predictions made during the input phase (frames `1 .. t_in`).
    pub fn input_phase(&self) -> &[Var] {
        &self.steps[..self.t_in - 1]
    }
}

/// Recursive rollout on the tape. Gradients flow through fed-back
/// predictions.
pub fn rollout_on_tape(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    net: &BoundNet,
    plan: &RolloutPlan,
    inputs: &Tensor,
) -> Result<RolloutVars> {
    plan.validate()?;
    let (_, t, _, _, _) = inputs.dims5("rollout")?;
    if t < plan.t_in {
        return Err(Error::invalid("rollout", format!("need {} input frames, got {t}", plan.t_in)));
    }
    let mut states = None;
    let mut steps: Vec<Var> = Vec::with_capacity(plan.steps());
    for k in 0..plan.steps() {
        let frame = if k < plan.t_in && (plan.teacher_forcing || k == 0) {
            tape.constant(inputs.frame(k)?)?
        } else {
            *steps.last().expect("k > 0")
        };
        let out = forward_step(tape, cfg, net, &mut states, frame)?;
        steps.push(out.prediction);
    }
    Ok(RolloutVars { steps, t_in: plan.t_in })
}

/// Creates a tape for `precision`.
pub fn tape_for(precision: Precision) -> Tape {
    Tape::with_precision(precision)
}
