//! Autaptic spatio-temporal circuit.
//!
//! A layer's previous spikes feed back through two learnable pathways:
//! the temporal (axon-soma) circuit yields `β = tanh(W_gt ∗ s[t-1])`, which
//! scales the stored potential, and the spatial (axon-dendrite) circuit
//! yields `γ = tanh(W_gs ∗ s[t-1])`, which scales the input current.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CircuitVariant {
    /// One scalar weight and bias per channel, applied pointwise.
    PerNeuron,
    /// Grouped `k×k` convolution.
    #[default]
    GroupConv,
    /// Dense `k×k` convolution across all channels.
    GlobalConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CircuitConfig {
    pub variant: CircuitVariant,
    pub groups: usize,
    pub kernel: usize,
    /// Temporal (β) circuit enabled.
    pub temporal: bool,
    /// Spatial (γ) circuit enabled.
    pub spatial: bool,
    /// Stop gradients through the circuit input.
    pub detach: bool,
    /// Weights are drawn from `U(-a, a)` with `a = init_gain / sqrt(fan_in)`.
    pub init_gain: f64,
}

impl Default for CircuitConfig {
    fn default() -> Self {
        CircuitConfig {
            variant: CircuitVariant::GroupConv,
            groups: 16,
            kernel: 5,
            temporal: true,
            spatial: true,
            detach: true,
            init_gain: 0.5,
        }
    }
}

/// Which of the two pathways.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pathway {
    Temporal,
    Spatial,
}

impl Pathway {
    pub fn prefix(self) -> &'static str {
        match self {
            Pathway::Temporal => "tc",
            Pathway::Spatial => "sc",
        }
    }
}

impl CircuitConfig {
    pub fn disabled() -> Self {
        CircuitConfig {
            temporal: false,
            spatial: false,
            ..Default::default()
        }
    }

    pub fn enabled(&self, p: Pathway) -> bool {
        match p {
            Pathway::Temporal => self.temporal,
            Pathway::Spatial => self.spatial,
        }
    }

    /// Weight shape and convolution geometry for a layer with `channels` channels.
    pub fn geometry(&self, channels: usize) -> Result<([usize; 4], ConvSpec)> {
        match self.variant {
            CircuitVariant::PerNeuron => Ok((
                [channels, 1, 1, 1],
                ConvSpec {
                    groups: channels,
                    stride: 1,
                    padding: 0,
                },
            )),
            CircuitVariant::GroupConv | CircuitVariant::GlobalConv => {
                let groups = if self.variant == CircuitVariant::GlobalConv { 1 } else { self.groups };
                if groups == 0 || !channels.is_multiple_of(groups) {
                    return Err(Error::invalid(
                        "circuit",
                        format!("groups={groups} must divide channels={channels}"),
                    ));
                }
                if self.kernel.is_multiple_of(2) {
                    return Err(Error::invalid("circuit", "kernel size must be odd"));
                }
                Ok(([channels, channels / groups, self.kernel, self.kernel], ConvSpec::same(self.kernel, groups)))
            }
        }
    }

    /// Learnable scalars in one pathway (weights plus biases).
    pub fn pathway_params(&self, channels: usize) -> Result<usize> {
        let (shape, _) = self.geometry(channels)?;
        Ok(shape.iter().product::<usize>() + channels)
    }

    /// Multiply-accumulates of one pathway per sample per timestep.
    pub fn pathway_macs(&self, channels: usize, h: usize, w: usize) -> Result<u64> {
        let (shape, _) = self.geometry(channels)?;
        let per_out = (shape[1] * shape[2] * shape[3]) as u64;
        Ok(per_out * (channels * h * w) as u64)
    }
}

/// Weights and biases of both pathways; `None` where disabled.
#[derive(Clone, Debug, PartialEq)]
pub struct CircuitWeights {
    pub temporal: Option<(Tensor, Tensor)>,
    pub spatial: Option<(Tensor, Tensor)>,
}

impl CircuitWeights {
    pub fn init(cfg: &CircuitConfig, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let (shape, _) = cfg.geometry(channels)?;
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let bound = cfg.init_gain / fan_in.sqrt();
        let mut make = |on: bool| {
            on.then(|| {
                let w = Tensor::from_fn(&shape, |_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 });
                (w, Tensor::zeros(&[channels]))
            })
        };
        let temporal = make(cfg.temporal);
        let spatial = make(cfg.spatial);
        Ok(CircuitWeights { temporal, spatial })
    }

    pub fn get(&self, p: Pathway) -> Option<&(Tensor, Tensor)> {
        match p {
            Pathway::Temporal => self.temporal.as_ref(),
            Pathway::Spatial => self.spatial.as_ref(),
        }
    }
}

/// Circuit weights bound to a tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct CircuitVars {
    pub temporal: Option<(Var, Var)>,
    pub spatial: Option<(Var, Var)>,
}

/// Computes `(β, γ)` on the tape from the previous spikes.
///
/// A disabled pathway yields an exact zero tensor.
pub fn modulation_on_tape(
    tape: &mut Tape,
    cfg: &CircuitConfig,
    vars: &CircuitVars,
    s_prev: Var,
) -> Result<(Var, Var)> {
    let (_, c, _, _) = tape.value(s_prev).dims4("circuit")?;
    let (_, spec) = cfg.geometry(c)?;
    let input = if cfg.detach { tape.detach(s_prev)? } else { s_prev };
    let factor = |tape: &mut Tape, on: bool, wb: Option<(Var, Var)>| -> Result<Var> {
        match (on, wb) {
            (true, Some((w, b))) => {
                let pre = tape.conv2d(input, w, Some(b), spec)?;
                tape.tanh(pre)
            }
            (true, None) => Err(Error::invalid("circuit", "enabled pathway has no weights")),
            (false, _) => {
                let shape = tape.value(s_prev).shape().to_vec();
                tape.constant(Tensor::zeros(&shape))
            }
        }
    };
    let beta = factor(tape, cfg.temporal, vars.temporal)?;
    let gamma = factor(tape, cfg.spatial, vars.spatial)?;
    Ok((beta, gamma))
}

/// Value-level `(β, γ)` for `s_prev` of shape `[B, C, H, W]`.
pub fn compute_modulation(s_prev: &Tensor, cfg: &CircuitConfig, weights: &CircuitWeights) -> Result<(Tensor, Tensor)> {
    if s_prev.data().iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::invalid("circuit", "previous spikes must be binary"));
    }
    let mut tape = Tape::new();
    let s = tape.constant(s_prev.clone())?;
    let mut bind = |wb: Option<&(Tensor, Tensor)>| -> Result<Option<(Var, Var)>> {
        wb.map(|(w, b)| Ok((tape.constant(w.clone())?, tape.constant(b.clone())?))).transpose()
    };
    let vars = CircuitVars {
        temporal: bind(weights.temporal.as_ref())?,
        spatial: bind(weights.spatial.as_ref())?,
    };
    let (b, g) = modulation_on_tape(&mut tape, cfg, &vars, s)?;
    Ok((tape.value(b).clone(), tape.value(g).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn silent_layer_gives_zero_factors() {
        let cfg = CircuitConfig {
            groups: 2,
            ..Default::default()
        };
        let w = CircuitWeights::init(&cfg, 4, &mut rng()).unwrap();
        let (b, g) = compute_modulation(&Tensor::zeros(&[2, 4, 6, 6]), &cfg, &w).unwrap();
        assert!(b.data().iter().chain(g.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn per_neuron_unit_weight() {
        let cfg = CircuitConfig {
            variant: CircuitVariant::PerNeuron,
            ..Default::default()
        };
        let unit = (Tensor::ones(&[3, 1, 1, 1]), Tensor::zeros(&[3]));
        let w = CircuitWeights {
            temporal: Some(unit.clone()),
            spatial: Some(unit),
        };
        let mut s = Tensor::zeros(&[1, 3, 2, 2]);
        s.data_mut()[5] = 1.0;
        let (b, g) = compute_modulation(&s, &cfg, &w).unwrap();
        for t in [b, g] {
            for (i, &x) in t.data().iter().enumerate() {
                if i == 5 {
                    assert!((x - 0.76159).abs() < 1e-5);
                    assert_eq!(x, 1f64.tanh());
                } else {
                    assert_eq!(x, 0.0);
                }
            }
        }
    }

    #[test]
    fn disabled_pathways_are_exact_zero() {
        let cfg = CircuitConfig {
            spatial: false,
            groups: 1,
            ..Default::default()
        };
        let w = CircuitWeights::init(&cfg, 2, &mut rng()).unwrap();
        assert!(w.spatial.is_none());
        let s = Tensor::ones(&[1, 2, 3, 3]);
        let (b, g) = compute_modulation(&s, &cfg, &w).unwrap();
        assert!(b.data().iter().any(|&x| x != 0.0));
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_channel_group_mismatch_and_non_binary() {
        let cfg = CircuitConfig {
            groups: 3,
            ..Default::default()
        };
        assert!(cfg.geometry(4).is_err());
        let ok = CircuitConfig {
            groups: 1,
            ..Default::default()
        };
        let w = CircuitWeights::init(&ok, 2, &mut rng()).unwrap();
        assert!(compute_modulation(&Tensor::full(&[1, 2, 3, 3], 0.5), &ok, &w).is_err());
    }

    #[test]
    fn detach_blocks_spike_gradient_but_not_weights() {
        let cfg = CircuitConfig {
            groups: 2,
            ..Default::default()
        };
        let weights = CircuitWeights::init(&cfg, 4, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let mut spikes = Tensor::zeros(&[1, 4, 5, 5]);
        for i in (0..spikes.numel()).step_by(3) {
            spikes.data_mut()[i] = 1.0;
        }
        let s = tape.leaf(spikes).unwrap();
        let (tw, tb) = weights.temporal.clone().unwrap();
        let (sw, sb) = weights.spatial.clone().unwrap();
        let vars = CircuitVars {
            temporal: Some((tape.leaf(tw).unwrap(), tape.leaf(tb).unwrap())),
            spatial: Some((tape.leaf(sw).unwrap(), tape.leaf(sb).unwrap())),
        };
        let (b, g) = modulation_on_tape(&mut tape, &cfg, &vars, s).unwrap();
        let bg = tape.add(b, g).unwrap();
        let l = tape.sum(bg).unwrap();
        let grads = tape.backward(l).unwrap();
        assert!(grads.wrt(&tape, s).data().iter().all(|&x| x == 0.0));
        let gw = grads.wrt(&tape, vars.temporal.unwrap().0);
        assert!(gw.max_abs() > 0.0);

        let no_detach = CircuitConfig { detach: false, ..cfg };
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::ones(&[1, 4, 5, 5])).unwrap();
        let (tw, tb) = weights.temporal.clone().unwrap();
        let vars = CircuitVars {
            temporal: Some((tape.constant(tw).unwrap(), tape.constant(tb).unwrap())),
            spatial: None,
        };
        let cfg2 = CircuitConfig { spatial: false, ..no_detach };
        let (b, _) = modulation_on_tape(&mut tape, &cfg2, &vars, s).unwrap();
        let l = tape.sum(b).unwrap();
        assert!(tape.backward(l).unwrap().wrt(&tape, s).max_abs() > 0.0);
    }

    #[test]
    fn group_conv_is_local_within_group() {
        // A single spike at (channel 0, site 6,6) may only affect sites within
        // the 5x5 window and channels of the same group.
        let cfg = CircuitConfig {
            groups: 2,
            init_gain: 1.0,
            ..Default::default()
        };
        let w = CircuitWeights::init(&cfg, 4, &mut rng()).unwrap();
        let mut s = Tensor::zeros(&[1, 4, 12, 12]);
        s.data_mut()[6 * 12 + 6] = 1.0;
        let (b, _) = compute_modulation(&s, &cfg, &w).unwrap();
        for c in 0..4 {
            for y in 0..12 {
                for x in 0..12 {
                    let v = b.data()[(c * 12 + y) * 12 + x];
                    let near = (y as i64 - 6).abs() <= 2 && (x as i64 - 6).abs() <= 2;
                    if c >= 2 || !near {
                        assert_eq!(v, 0.0, "c={c} y={y} x={x}");
                    }
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn factors_within_unit_interval(seed in 0u64..500, density in 0.0f64..1.0) {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cfg = CircuitConfig { groups: 2, init_gain: 3.0, ..Default::default() };
            let w = CircuitWeights::init(&cfg, 4, &mut r).unwrap();
            let s = Tensor::from_fn(&[1, 4, 6, 6], |_| if r.gen_bool(density) { 1.0 } else { 0.0 });
            let (b, g) = compute_modulation(&s, &cfg, &w).unwrap();
            proptest::prop_assert!(b.data().iter().chain(g.data()).all(|x| (-1.0..=1.0).contains(x)));
        }
    }
}
