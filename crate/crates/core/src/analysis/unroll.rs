//! Closed-form T-step unrolls of the membrane recursion and the temporal
//! gradient product, checked against step simulation.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{SurrogateConfig, Tape};
use crate::circuit::{compute_modulation, CircuitConfig, CircuitWeights};
use crate::error::{Error, Result};
use crate::neuron::{step, step_on_tape, NeuronKind, NeuronParams, NeuronScalars, NeuronState, StateVars};
use crate::tensor::Tensor;

/// One timestep of a single neuron.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub x: f64,
    pub beta: f64,
    pub gamma: f64,
    pub s: f64,
    pub m: f64,
    /// Potential after reset.
    pub v: f64,
}

/// Iterates of one neuron over `T` steps, starting from `v0`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnrollTrace {
    pub v0: f64,
    pub steps: Vec<StepRecord>,
}

impl UnrollTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Simulated final potential.
    pub fn final_v(&self) -> Result<f64> {
        self.steps
            .last()
            .map(|r| r.v)
            .ok_or_else(|| Error::invalid("unroll", "trace is empty"))
    }

    fn check(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::invalid("unroll", "trace is empty"));
        }
        if self.steps.iter().any(|r| r.s != 0.0 && r.s != 1.0) {
            return Err(Error::invalid("unroll", "trace spikes must be binary"));
        }
        Ok(())
    }
}

fn scalar_state(kind: NeuronKind, v0: f64) -> NeuronState {
    let mut st = NeuronState::zeros(kind, &[1]);
    st.v = Tensor::full(&[1], v0);
    st
}

/// Simulates one LIF (or IF) neuron with the production step.
pub fn simulate_lif(x: &[f64], alpha: f64, vth: f64, v0: f64) -> Result<UnrollTrace> {
    let params = NeuronParams::new(NeuronKind::Lif).with_alpha(alpha).with_vth(vth);
    let mut st = scalar_state(NeuronKind::Lif, v0);
    let mut steps = Vec::with_capacity(x.len());
    for &xi in x {
        let out = step(&mut st, &Tensor::full(&[1], xi), None, &params)?;
        steps.push(StepRecord {
            x: xi,
            beta: 0.0,
            gamma: 0.0,
            s: out.spikes.item(),
            m: out.m.item(),
            v: st.v.item(),
        });
    }
    Ok(UnrollTrace { v0, steps })
}

/// Simulates one STC-LIF neuron under the given factor sequences.
pub fn simulate_stc(x: &[f64], beta: &[f64], gamma: &[f64], vth: f64, v0: f64) -> Result<UnrollTrace> {
    if x.len() != beta.len() || x.len() != gamma.len() {
        return Err(Error::shape("unroll", "x, beta and gamma need equal lengths"));
    }
    let params = NeuronParams::new(NeuronKind::StcLif).with_vth(vth);
    let mut st = scalar_state(NeuronKind::StcLif, v0);
    let mut steps = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let (b, g) = (Tensor::full(&[1], beta[i]), Tensor::full(&[1], gamma[i]));
        let out = step(&mut st, &Tensor::full(&[1], x[i]), Some((&b, &g)), &params)?;
        steps.push(StepRecord {
            x: x[i],
            beta: beta[i],
            gamma: gamma[i],
            s: out.spikes.item(),
            m: out.m.item(),
            v: st.v.item(),
        });
    }
    Ok(UnrollTrace { v0, steps })
}

/// Runs a live STC-LIF layer (`[1, C, H, W]`) whose factors come from a
/// randomly initialised group-conv circuit, returning one trace per neuron.
pub fn simulate_live_circuit(
    channels: usize,
    hw: usize,
    t: usize,
    vth: f64,
    seed: u64,
) -> Result<Vec<UnrollTrace>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = CircuitConfig {
        groups: channels.clamp(1, 2),
        kernel: 3,
        ..Default::default()
    };
    let weights = CircuitWeights::init(&cfg, channels, &mut rng)?;
    let params = NeuronParams::new(NeuronKind::StcLif).with_vth(vth);
    let shape = [1, channels, hw, hw];
    let mut st = NeuronState::zeros(NeuronKind::StcLif, &shape);
    st.v = Tensor::from_fn(&shape, |_| rng.gen_range(-vth..vth));
    let n = st.v.numel();
    let mut traces: Vec<UnrollTrace> = st
        .v
        .data()
        .iter()
        .map(|&v0| UnrollTrace {
            v0,
            steps: Vec::with_capacity(t),
        })
        .collect();
    for _ in 0..t {
        let x = Tensor::from_fn(&shape, |_| rng.gen_range(-0.5 * vth..1.5 * vth));
        let (beta, gamma) = compute_modulation(&st.s_prev, &cfg, &weights)?;
        let out = step(&mut st, &x, Some((&beta, &gamma)), &params)?;
        for i in 0..n {
            traces[i].steps.push(StepRecord {
                x: x.data()[i],
                beta: beta.data()[i],
                gamma: gamma.data()[i],
                s: out.spikes.data()[i],
                m: out.m.data()[i],
                v: st.v.data()[i],
            });
        }
    }
    Ok(traces)
}

/// `v[T] = α^T v[0] + Σ α^{T-i} ((1-α) x[i] - vth s[i])`.
pub fn lif_unroll_oracle(trace: &UnrollTrace, alpha: f64, vth: f64) -> Result<f64> {
    trace.check()?;
    let t = trace.len() as i32;
    let mut v = alpha.powi(t) * trace.v0;
    for (i, r) in trace.steps.iter().enumerate() {
        let w = alpha.powi(t - 1 - i as i32);
        v += w * (1.0 - alpha) * r.x - w * vth * r.s;
    }
    Ok(v)
}

/// `v[T] = v[0] Π(1+β) + Σ ((1+γ[i]) x[i] - vth s[i]) Π_{j>i}(1+β[j])`.
pub fn stc_unroll_oracle(trace: &UnrollTrace, vth: f64) -> Result<f64> {
    trace.check()?;
    let n = trace.len();
    // suffix[i] = Π_{j>=i} (1+β[j])
    let mut suffix = vec![1.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] * (1.0 + trace.steps[i].beta);
    }
    let mut v = trace.v0 * suffix[0];
    for (i, r) in trace.steps.iter().enumerate() {
        v += ((1.0 + r.gamma) * r.x - vth * r.s) * suffix[i + 1];
    }
    Ok(v)
}

/// Model whose temporal gradient product is traced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FlowModel {
    Lif { alpha: f64 },
    Stc,
}

/// Per-step factors of `∂v[T]/∂v[0]`; their product is the full derivative.
pub fn gradient_flow_factors(trace: &UnrollTrace, vth: f64, surrogate: SurrogateConfig, model: FlowModel) -> Result<Vec<f64>> {
    trace.check()?;
    Ok(trace
        .steps
        .iter()
        .map(|r| {
            let gate = 1.0 - vth * surrogate.derivative(r.m - vth);
            match model {
                FlowModel::Lif { alpha } => alpha * gate,
                FlowModel::Stc => gate * (1.0 + r.beta),
            }
        })
        .collect())
}

/// `∂v[T]/∂v[0]` as the product of per-step factors.
pub fn gradient_flow_trace(trace: &UnrollTrace, vth: f64, surrogate: SurrogateConfig, model: FlowModel) -> Result<f64> {
    Ok(gradient_flow_factors(trace, vth, surrogate, model)?.iter().product())
}

/// `∂v[T]/∂v[0]` by reverse-mode differentiation of the step recursion,
/// with the trace's inputs and factors held constant.
pub fn autodiff_flow(trace: &UnrollTrace, vth: f64, surrogate: SurrogateConfig, model: FlowModel) -> Result<f64> {
    trace.check()?;
    let (kind, alpha) = match model {
        FlowModel::Lif { alpha } => (NeuronKind::Lif, alpha),
        FlowModel::Stc => (NeuronKind::StcLif, 0.5),
    };
    let mut params = NeuronParams::new(kind).with_alpha(alpha).with_vth(vth);
    params.surrogate = surrogate;
    let mut tape = Tape::new();
    let scalars = NeuronScalars::constants(&mut tape, &params)?;
    let v0 = tape.leaf(Tensor::full(&[1], trace.v0))?;
    let mut state = StateVars {
        v: v0,
        s_prev: tape.constant(Tensor::zeros(&[1]))?,
        v_dend: None,
    };
    for r in &trace.steps {
        let x = tape.constant(Tensor::full(&[1], r.x))?;
        let modulation = if kind.is_stc() {
            Some((tape.constant(Tensor::full(&[1], r.beta))?, tape.constant(Tensor::full(&[1], r.gamma))?))
        } else {
            None
        };
        state = step_on_tape(&mut tape, &params, &scalars, &state, x, modulation)?.1;
    }
    let out = tape.sum(state.v)?;
    let g = tape.backward(out)?;
    Ok(g.wrt(&tape, v0).item())
}

/// Result of [`unroll_experiment`].
#[derive(Clone, Debug, PartialEq)]
pub struct UnrollReport {
    /// `(neuron, simulated, closed form)`.
    pub rows: Vec<(usize, f64, f64)>,
    pub max_abs_error: f64,
}

impl UnrollReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("neuron,simulated,closed_form,abs_error\n");
        for &(i, sim, closed) in &self.rows {
            writeln!(s, "{i},{sim},{closed},{}", (sim - closed).abs()).unwrap();
        }
        s
    }
}

/// Random-input unroll check for `model` over `t` steps.
pub fn unroll_experiment(model: FlowModel, t: usize, seed: u64, neurons: usize) -> Result<UnrollReport> {
    if t == 0 || neurons == 0 {
        return Err(Error::invalid("unroll", "need at least one step and one neuron"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(neurons);
    let mut push = |i: usize, trace: &UnrollTrace, closed: f64| -> Result<()> {
        rows.push((i, trace.final_v()?, closed));
        Ok(())
    };
    match model {
        FlowModel::Lif { .. } => {
            for i in 0..neurons {
                let alpha = rng.gen_range(0.05..0.99);
                let vth = rng.gen_range(0.2..2.0);
                let x: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..3.0) * vth).collect();
                let v0 = rng.gen_range(-vth..vth);
                let trace = simulate_lif(&x, alpha, vth, v0)?;
                push(i, &trace, lif_unroll_oracle(&trace, alpha, vth)?)?;
            }
        }
        FlowModel::Stc => {
            let side = (neurons as f64 / 2.0).sqrt().ceil() as usize;
            let vth = rng.gen_range(0.5..1.5);
            let traces = simulate_live_circuit(2, side, t, vth, rng.gen())?;
            for (i, trace) in traces.iter().take(neurons).enumerate() {
                push(i, trace, stc_unroll_oracle(trace, vth)?)?;
            }
        }
    }
    let max_abs_error = rows.iter().map(|&(_, a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(UnrollReport { rows, max_abs_error })
}

/// Per-step factor, running product and autodiff cross-check as CSV.
pub fn gradient_flow_csv(trace: &UnrollTrace, vth: f64, surrogate: SurrogateConfig, model: FlowModel) -> Result<String> {
    let factors = gradient_flow_factors(trace, vth, surrogate, model)?;
    let mut s = String::from("step,m,beta,factor,product,autodiff\n");
    let mut prod = 1.0;
    for (i, (r, f)) in trace.steps.iter().zip(&factors).enumerate() {
        prod *= f;
        let prefix = UnrollTrace {
            v0: trace.v0,
            steps: trace.steps[..=i].to_vec(),
        };
        let ad = autodiff_flow(&prefix, vth, surrogate, model)?;
        writeln!(s, "{},{},{},{f},{prod},{ad}", i + 1, r.m, r.beta).unwrap();
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_series_case() {
        let trace = simulate_lif(&[1.0; 3], 0.5, 10.0, 0.0).unwrap();
        assert_eq!(trace.final_v().unwrap(), 0.875);
        assert_eq!(lif_unroll_oracle(&trace, 0.5, 10.0).unwrap(), 0.875);
    }

    #[test]
    fn one_step_base_case() {
        let trace = simulate_lif(&[3.0], 0.7, 1.0, 0.4).unwrap();
        let want = 0.7 * 0.4 + (1.0 - 0.7) * 3.0 - 1.0;
        assert_eq!(trace.steps[0].s, 1.0);
        assert!((lif_unroll_oracle(&trace, 0.7, 1.0).unwrap() - want).abs() < 1e-15);
        assert!((trace.final_v().unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn stc_zero_factors_integrate() {
        let x = [0.3, 0.9, -0.2, 1.4, 0.6];
        let trace = simulate_stc(&x, &[0.0; 5], &[0.0; 5], 1.0, 0.1).unwrap();
        let spikes: f64 = trace.steps.iter().map(|r| r.s).sum();
        let want = 0.1 + x.iter().sum::<f64>() - spikes;
        assert!((stc_unroll_oracle(&trace, 1.0).unwrap() - want).abs() < 1e-12);
        assert!((trace.final_v().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn stc_reproduces_lif_closed_form() {
        let alpha = 0.75;
        let x = [0.4, 1.8, 0.1, 2.2, -0.3, 0.9];
        let lif = simulate_lif(&x, alpha, 1.0, 0.2).unwrap();
        let stc = simulate_stc(&x, &[alpha - 1.0; 6], &[-alpha; 6], 1.0, 0.2).unwrap();
        assert_eq!(lif.final_v().unwrap(), stc.final_v().unwrap());
        let a = lif_unroll_oracle(&lif, alpha, 1.0).unwrap();
        let b = stc_unroll_oracle(&stc, 1.0).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn random_unrolls_match() {
        for seed in 0..5 {
            let r = unroll_experiment(FlowModel::Lif { alpha: 0.0 }, 25, seed, 16).unwrap();
            assert!(r.max_abs_error < 1e-9, "{}", r.max_abs_error);
            let r = unroll_experiment(FlowModel::Stc, 25, seed, 16).unwrap();
            assert!(r.max_abs_error < 1e-9, "{}", r.max_abs_error);
            assert_eq!(r.rows.len(), 16);
        }
    }

    #[test]
    fn live_circuit_factors_are_nontrivial() {
        let traces = simulate_live_circuit(2, 3, 10, 1.0, 4).unwrap();
        assert!(traces.iter().flat_map(|t| &t.steps).any(|r| r.beta.abs() > 0.05));
    }

    #[test]
    fn single_factor_value() {
        let trace = UnrollTrace {
            v0: 0.0,
            steps: vec![StepRecord { x: 0.0, beta: 0.0, gamma: 0.0, s: 1.0, m: 2.0, v: 1.0 }],
        };
        let f = gradient_flow_trace(&trace, 1.0, SurrogateConfig::default(), FlowModel::Stc).unwrap();
        let want = 1.0 - 1.0 / (1.0 + std::f64::consts::PI.powi(2));
        assert!((f - want).abs() < 1e-15);
        assert!((f - 0.90801).abs() < 1e-5);
    }

    #[test]
    fn product_matches_autodiff() {
        let traces = simulate_live_circuit(2, 2, 12, 1.0, 9).unwrap();
        let sg = SurrogateConfig::default();
        for t in &traces {
            let a = gradient_flow_trace(t, 1.0, sg, FlowModel::Stc).unwrap();
            let b = autodiff_flow(t, 1.0, sg, FlowModel::Stc).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300), "{a} vs {b}");
        }
        let lif = simulate_lif(&[0.5, 1.5, 2.5, 0.2, 1.1], 0.6, 1.0, 0.0).unwrap();
        let a = gradient_flow_trace(&lif, 1.0, sg, FlowModel::Lif { alpha: 0.6 }).unwrap();
        let b = autodiff_flow(&lif, 1.0, sg, FlowModel::Lif { alpha: 0.6 }).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn empty_trace_errors() {
        let t = UnrollTrace { v0: 0.0, steps: vec![] };
        assert!(lif_unroll_oracle(&t, 0.5, 1.0).is_err());
        assert!(gradient_flow_trace(&t, 1.0, SurrogateConfig::default(), FlowModel::Stc).is_err());
    }
}
