//! Spiking neuron dynamics with soft reset.
//!
//! All kinds share one charge/fire/reset skeleton:
//!
//! ```text
//! m  = retain(v, β) + drive(x, γ)
//! s  = H(m - vth)
//! v' = m - vth·s
//! ```
//!
//! | kind       | membrane update                                     |
//! |------------|-----------------------------------------------------|
//! | `if`       | `m = v + (1-α)·x`                                   |
//! | `lif`      | `m = α·v + (1-α)·x`                                 |
//! | `plif`     | as `lif`, α = logistic(raw) is learnable            |
//! | `lmh`      | two compartments, see [`NeuronKind::Lmh`]           |
//! | `stc_*`    | base kind with `v⊙(1+β)` and `x⊙(1+γ)`              |

use serde::{Deserialize, Serialize};

use crate::autodiff::{SurrogateConfig, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronKind {
    If,
    Lif,
    Plif,
    /// Dendritic potential `vD' = μD·vD + μS·vS + x`, somatic
    /// `m = λS·vS + λD·vD'`; `vS` is the post-reset potential.
    Lmh,
    StcLif,
    StcPlif,
    StcLmh,
}

impl NeuronKind {
    pub const ALL: [NeuronKind; 7] = [
        NeuronKind::If,
        NeuronKind::Lif,
        NeuronKind::Plif,
        NeuronKind::Lmh,
        NeuronKind::StcLif,
        NeuronKind::StcPlif,
        NeuronKind::StcLmh,
    ];

    pub fn is_stc(self) -> bool {
        matches!(self, NeuronKind::StcLif | NeuronKind::StcPlif | NeuronKind::StcLmh)
    }

    pub fn has_learnable_alpha(self) -> bool {
        matches!(self, NeuronKind::Plif | NeuronKind::StcPlif)
    }

    pub fn is_two_compartment(self) -> bool {
        matches!(self, NeuronKind::Lmh | NeuronKind::StcLmh)
    }

    pub fn name(self) -> &'static str {
        match self {
            NeuronKind::If => "if",
            NeuronKind::Lif => "lif",
            NeuronKind::Plif => "plif",
            NeuronKind::Lmh => "lmh",
            NeuronKind::StcLif => "stc_lif",
            NeuronKind::StcPlif => "stc_plif",
            NeuronKind::StcLmh => "stc_lmh",
        }
    }

    /// Number of learnable per-layer scalars owned by the neuron.
    pub fn scalar_count(self) -> usize {
        if self.has_learnable_alpha() {
            1
        } else if self.is_two_compartment() {
            4
        } else {
            0
        }
    }
}

impl std::fmt::Display for NeuronKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Initial values for the four LM-H mixing scalars. The default is the
/// LIF-equivalent point for α = 0.5.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmhInit {
    pub mu_d: f64,
    pub mu_s: f64,
    pub lambda_d: f64,
    pub lambda_s: f64,
}

impl Default for LmhInit {
    fn default() -> Self {
        LmhInit {
            mu_d: 0.0,
            mu_s: 0.0,
            lambda_d: 0.5,
            lambda_s: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronParams {
    pub kind: NeuronKind,
    /// Fixed membrane constant for `if`/`lif`; initial value for PLIF kinds.
    pub alpha: f64,
    pub vth: f64,
    pub lmh: LmhInit,
    pub surrogate: SurrogateConfig,
    /// Cut the gradient through `-vth·s` in LM-H kinds (the original LM-H
    /// behaviour). Off by default.
    pub truncate_reset_grad: bool,
    /// Fixed `(β, γ)` replacing circuit output, for testing.
    pub modulation_override: Option<(f64, f64)>,
}

impl NeuronParams {
    pub fn new(kind: NeuronKind) -> Self {
        NeuronParams {
            kind,
            alpha: 0.5,
            vth: 1.0,
            lmh: LmhInit::default(),
            surrogate: SurrogateConfig::default(),
            truncate_reset_grad: false,
            modulation_override: None,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_vth(mut self, vth: f64) -> Self {
        self.vth = vth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.vth > 0.0 && self.vth.is_finite()) {
            return Err(Error::invalid("neuron", format!("vth must be positive, got {}", self.vth)));
        }
        let ok = if self.kind.has_learnable_alpha() {
            self.alpha > 0.0 && self.alpha < 1.0
        } else {
            (0.0..=1.0).contains(&self.alpha)
        };
        if !ok {
            return Err(Error::invalid("neuron", format!("alpha {} out of range for {}", self.alpha, self.kind)));
        }
        Ok(())
    }

    /// Raw parameter whose logistic equals `alpha`.
    pub fn alpha_raw(&self) -> f64 {
        (self.alpha / (1.0 - self.alpha)).ln()
    }
}

/// Per-layer neuron state between timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState {
    /// Post-reset membrane potential (somatic potential for LM-H kinds).
    pub v: Tensor,
    pub s_prev: Tensor,
    /// Dendritic potential, LM-H kinds only.
    pub v_dend: Option<Tensor>,
}

impl NeuronState {
    pub fn zeros(kind: NeuronKind, shape: &[usize]) -> Self {
        NeuronState {
            v: Tensor::zeros(shape),
            s_prev: Tensor::zeros(shape),
            v_dend: kind.is_two_compartment().then(|| Tensor::zeros(shape)),
        }
    }

    pub fn reset(&mut self) {
        self.v.data_mut().fill(0.0);
        self.s_prev.data_mut().fill(0.0);
        if let Some(d) = &mut self.v_dend {
            d.data_mut().fill(0.0);
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.v.shape()
    }
}

/// Learnable per-layer scalars as tape variables.
#[derive(Clone, Copy, Debug, Default)]
pub struct NeuronScalars {
    pub alpha: Option<Var>,
    pub mu_d: Option<Var>,
    pub mu_s: Option<Var>,
    pub lambda_d: Option<Var>,
    pub lambda_s: Option<Var>,
}

impl NeuronScalars {
    /// Non-learnable scalars holding the values in `params`.
    pub fn constants(tape: &mut Tape, params: &NeuronParams) -> Result<Self> {
        let mut out = NeuronScalars::default();
        if params.kind.has_learnable_alpha() {
            out.alpha = Some(tape.constant(Tensor::scalar(params.alpha))?);
        }
        if params.kind.is_two_compartment() {
            out.mu_d = Some(tape.constant(Tensor::scalar(params.lmh.mu_d))?);
            out.mu_s = Some(tape.constant(Tensor::scalar(params.lmh.mu_s))?);
            out.lambda_d = Some(tape.constant(Tensor::scalar(params.lmh.lambda_d))?);
            out.lambda_s = Some(tape.constant(Tensor::scalar(params.lmh.lambda_s))?);
        }
        Ok(out)
    }
}

fn need(v: Option<Var>, what: &str) -> Result<Var> {
    v.ok_or_else(|| Error::invalid("neuron", format!("missing learnable scalar `{what}`")))
}

/// Neuron state as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub v: Var,
    pub s_prev: Var,
    pub v_dend: Option<Var>,
}

impl StateVars {
    pub fn from_state(tape: &mut Tape, state: &NeuronState) -> Result<Self> {
        Ok(StateVars {
            v: tape.constant(state.v.clone())?,
            s_prev: tape.constant(state.s_prev.clone())?,
            v_dend: state.v_dend.as_ref().map(|d| tape.constant(d.clone())).transpose()?,
        })
    }

    pub fn zeros(tape: &mut Tape, kind: NeuronKind, shape: &[usize]) -> Result<Self> {
        Self::from_state(tape, &NeuronState::zeros(kind, shape))
    }

    pub fn to_state(&self, tape: &Tape) -> NeuronState {
        NeuronState {
            v: tape.value(self.v).clone(),
            s_prev: tape.value(self.s_prev).clone(),
            v_dend: self.v_dend.map(|d| tape.value(d).clone()),
        }
    }
}

/// Pre-reset potential and spikes of one step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub m: Var,
    pub spikes: Var,
}

fn check_modulation(tape: &Tape, beta: Var, gamma: Var, shape: &[usize]) -> Result<()> {
    for (name, v) in [("beta", beta), ("gamma", gamma)] {
        let t = tape.value(v);
        if t.shape() != shape {
            return Err(Error::shape("neuron", format!("{name} {:?} vs state {shape:?}", t.shape())));
        }
        if t.data().iter().any(|x| !(-1.0..=1.0).contains(x)) {
            return Err(Error::invalid("neuron", format!("{name} outside [-1, 1]")));
        }
    }
    Ok(())
}

/// Advances one neuron layer by a timestep on the tape.
///
/// `modulation` carries the circuit factors `(β, γ)` and is only accepted
/// for STC kinds; `None` there means both factors are zero.
pub fn step_on_tape(
    tape: &mut Tape,
    params: &NeuronParams,
    scalars: &NeuronScalars,
    state: &StateVars,
    x: Var,
    modulation: Option<(Var, Var)>,
) -> Result<(StepVars, StateVars)> {
    let kind = params.kind;
    let shape = tape.value(state.v).shape().to_vec();
    if tape.value(x).shape() != shape.as_slice() {
        return Err(Error::shape(
            "neuron",
            format!("input {:?} vs state {:?}", tape.value(x).shape(), shape),
        ));
    }
    if kind.is_two_compartment() != state.v_dend.is_some() {
        return Err(Error::invalid("neuron", format!("state layout does not match kind {kind}")));
    }

    let modulation = if kind.is_stc() {
        let (beta, gamma) = match (params.modulation_override, modulation) {
            (Some((b, g)), _) => (tape.constant(Tensor::full(&shape, b))?, tape.constant(Tensor::full(&shape, g))?),
            (None, Some(bg)) => bg,
            (None, None) => (tape.constant(Tensor::zeros(&shape))?, tape.constant(Tensor::zeros(&shape))?),
        };
        check_modulation(tape, beta, gamma, &shape)?;
        Some((tape.add_scalar(beta, 1.0)?, tape.add_scalar(gamma, 1.0)?))
    } else {
        if modulation.is_some() {
            return Err(Error::invalid("neuron", format!("kind {kind} takes no modulation")));
        }
        None
    };

    let v = state.v;
    let mut v_dend_next = None;
    let m = match kind {
        NeuronKind::If => {
            let drive = tape.scale(x, 1.0 - params.alpha)?;
            tape.add(v, drive)?
        }
        NeuronKind::Lif => {
            let retain = tape.scale(v, params.alpha)?;
            let drive = tape.scale(x, 1.0 - params.alpha)?;
            tape.add(retain, drive)?
        }
        NeuronKind::StcLif => {
            let (gain_v, gain_x) = modulation.expect("stc modulation");
            let retain = tape.mul(v, gain_v)?;
            let drive = tape.mul(x, gain_x)?;
            tape.add(retain, drive)?
        }
        NeuronKind::Plif | NeuronKind::StcPlif => {
            let alpha = need(scalars.alpha, "alpha")?;
            let one_minus = tape.rsub_scalar(1.0, alpha)?;
            let mut retain = tape.mul_scalar(v, alpha)?;
            let mut drive = tape.mul_scalar(x, one_minus)?;
            if let Some((gain_v, gain_x)) = modulation {
                retain = tape.mul(retain, gain_v)?;
                drive = tape.mul(drive, gain_x)?;
            }
            tape.add(retain, drive)?
        }
        NeuronKind::Lmh | NeuronKind::StcLmh => {
            let vd = state.v_dend.expect("checked above");
            let a = tape.mul_scalar(vd, need(scalars.mu_d, "mu_d")?)?;
            let b = tape.mul_scalar(v, need(scalars.mu_s, "mu_s")?)?;
            let hist = tape.add(a, b)?;
            let input = match modulation {
                Some((_, gain_x)) => tape.mul(x, gain_x)?,
                None => x,
            };
            let vd_next = tape.add(hist, input)?;
            let mut soma = tape.mul_scalar(v, need(scalars.lambda_s, "lambda_s")?)?;
            if let Some((gain_v, _)) = modulation {
                soma = tape.mul(soma, gain_v)?;
            }
            let dend = tape.mul_scalar(vd_next, need(scalars.lambda_d, "lambda_d")?)?;
            v_dend_next = Some(vd_next);
            tape.add(soma, dend)?
        }
    };

    let spikes = tape.spike(m, params.vth, params.surrogate)?;
    let reset_src = if params.truncate_reset_grad && kind.is_two_compartment() {
        tape.detach(spikes)?
    } else {
        spikes
    };
    let reset = tape.scale(reset_src, params.vth)?;
    let v_next = tape.sub(m, reset)?;
    Ok((
        StepVars { m, spikes },
        StateVars {
            v: v_next,
            s_prev: spikes,
            v_dend: v_dend_next,
        },
    ))
}

/// Values produced by one value-level step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub m: Tensor,
    pub spikes: Tensor,
}

/// Value-level step for any kind; `modulation` is `(β, γ)` for STC kinds.
pub fn step(
    state: &mut NeuronState,
    x: &Tensor,
    modulation: Option<(&Tensor, &Tensor)>,
    params: &NeuronParams,
) -> Result<StepOutput> {
    params.validate()?;
    let mut tape = Tape::new();
    let scalars = NeuronScalars::constants(&mut tape, params)?;
    let sv = StateVars::from_state(&mut tape, state)?;
    let xv = tape.constant(x.clone())?;
    let mv = modulation
        .map(|(b, g)| -> Result<_> { Ok((tape.constant(b.clone())?, tape.constant(g.clone())?)) })
        .transpose()?;
    let (out, next) = step_on_tape(&mut tape, params, &scalars, &sv, xv, mv)?;
    *state = next.to_state(&tape);
    Ok(StepOutput {
        m: tape.value(out.m).clone(),
        spikes: tape.value(out.spikes).clone(),
    })
}

fn expect_kind(params: &NeuronParams, allowed: &[NeuronKind], op: &'static str) -> Result<()> {
    if allowed.contains(&params.kind) {
        Ok(())
    } else {
        Err(Error::invalid(op, format!("kind {} not accepted", params.kind)))
    }
}

/// IF / LIF step.
pub fn lif_step(state: &mut NeuronState, x: &Tensor, params: &NeuronParams) -> Result<Tensor> {
    expect_kind(params, &[NeuronKind::If, NeuronKind::Lif], "lif_step")?;
    Ok(step(state, x, None, params)?.spikes)
}

pub fn stc_lif_step(
    state: &mut NeuronState,
    x: &Tensor,
    beta: &Tensor,
    gamma: &Tensor,
    params: &NeuronParams,
) -> Result<Tensor> {
    expect_kind(params, &[NeuronKind::StcLif], "stc_lif_step")?;
    Ok(step(state, x, Some((beta, gamma)), params)?.spikes)
}

pub fn plif_step(state: &mut NeuronState, x: &Tensor, params: &NeuronParams) -> Result<Tensor> {
    expect_kind(params, &[NeuronKind::Plif], "plif_step")?;
    Ok(step(state, x, None, params)?.spikes)
}

pub fn stc_plif_step(
    state: &mut NeuronState,
    x: &Tensor,
    beta: &Tensor,
    gamma: &Tensor,
    params: &NeuronParams,
) -> Result<Tensor> {
    expect_kind(params, &[NeuronKind::StcPlif], "stc_plif_step")?;
    Ok(step(state, x, Some((beta, gamma)), params)?.spikes)
}

pub fn lmh_step(state: &mut NeuronState, x: &Tensor, params: &NeuronParams) -> Result<Tensor> {
    expect_kind(params, &[NeuronKind::Lmh], "lmh_step")?;
    Ok(step(state, x, None, params)?.spikes)
}

pub fn stc_lmh_step(
    state: &mut NeuronState,
    x: &Tensor,
    beta: &Tensor,
    gamma: &Tensor,
    params: &NeuronParams,
) -> Result<Tensor> {
    expect_kind(params, &[NeuronKind::StcLmh], "stc_lmh_step")?;
    Ok(step(state, x, Some((beta, gamma)), params)?.spikes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, finite_difference};

    fn s(v: f64) -> Tensor {
        Tensor::full(&[1], v)
    }

    fn state_with(kind: NeuronKind, v: f64) -> NeuronState {
        let mut st = NeuronState::zeros(kind, &[1]);
        st.v = s(v);
        st
    }

    #[test]
    fn lif_hand_iteration() {
        let p = NeuronParams::new(NeuronKind::Lif);
        let mut st = NeuronState::zeros(NeuronKind::Lif, &[1]);
        let o1 = step(&mut st, &s(1.0), None, &p).unwrap();
        assert_eq!((o1.m.item(), o1.spikes.item(), st.v.item()), (0.5, 0.0, 0.5));
        let o2 = step(&mut st, &s(1.0), None, &p).unwrap();
        assert_eq!((o2.m.item(), o2.spikes.item(), st.v.item()), (0.75, 0.0, 0.75));
    }

    #[test]
    fn lif_soft_reset_subtracts_threshold() {
        let p = NeuronParams::new(NeuronKind::Lif);
        let mut st = state_with(NeuronKind::Lif, 1.5);
        let o = step(&mut st, &s(0.5), None, &p).unwrap();
        assert_eq!((o.m.item(), o.spikes.item(), st.v.item()), (1.0, 1.0, 0.0));
    }

    #[test]
    fn quiescent_input_never_fires() {
        for kind in NeuronKind::ALL {
            let p = NeuronParams::new(kind);
            let mut st = NeuronState::zeros(kind, &[3]);
            let zeros = Tensor::zeros(&[3]);
            for _ in 0..20 {
                let m = kind.is_stc().then_some((&zeros, &zeros));
                let o = step(&mut st, &zeros, m, &p).unwrap();
                assert_eq!(o.spikes, zeros);
            }
            assert_eq!(st, NeuronState::zeros(kind, &[3]));
        }
    }

    #[test]
    fn stc_without_modulation_is_if_with_full_input() {
        let p = NeuronParams::new(NeuronKind::StcLif);
        let z = s(0.0);
        let mut st = NeuronState::zeros(NeuronKind::StcLif, &[1]);
        let o1 = step(&mut st, &s(0.6), Some((&z, &z)), &p).unwrap();
        assert_eq!((o1.m.item(), o1.spikes.item()), (0.6, 0.0));
        let o2 = step(&mut st, &s(0.6), Some((&z, &z)), &p).unwrap();
        assert_eq!((o2.m.item(), o2.spikes.item()), (1.2, 1.0));
        assert!((st.v.item() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn stc_modulated_hand_iteration() {
        let p = NeuronParams::new(NeuronKind::StcLif);
        let mut st = state_with(NeuronKind::StcLif, 0.4);
        let o = step(&mut st, &s(1.0), Some((&s(0.5), &s(-0.5))), &p).unwrap();
        assert!((o.m.item() - 1.1).abs() < 1e-15);
        assert_eq!(o.spikes.item(), 1.0);
        assert!((st.v.item() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn stc_override_reproduces_lif() {
        let alpha = 0.5;
        let lif = NeuronParams::new(NeuronKind::Lif).with_alpha(alpha);
        let mut stc = NeuronParams::new(NeuronKind::StcLif);
        stc.modulation_override = Some((alpha - 1.0, -alpha));
        let mut a = NeuronState::zeros(NeuronKind::Lif, &[4]);
        let mut b = NeuronState::zeros(NeuronKind::StcLif, &[4]);
        for t in 0..30 {
            let x = Tensor::from_fn(&[4], |i| ((t * 7 + i * 3) % 11) as f64 * 0.37);
            let sa = step(&mut a, &x, None, &lif).unwrap();
            let sb = step(&mut b, &x, None, &stc).unwrap();
            assert_eq!(sa, sb);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn plif_degenerates_to_lif() {
        let plif = NeuronParams::new(NeuronKind::Plif);
        let mut st = NeuronState::zeros(NeuronKind::Plif, &[1]);
        assert_eq!(plif_step(&mut st, &s(1.0), &plif).unwrap().item(), 0.0);
        assert_eq!(st.v.item(), 0.5);
        plif_step(&mut st, &s(1.0), &plif).unwrap();
        assert_eq!(st.v.item(), 0.75);
    }

    #[test]
    fn plif_pure_retention() {
        let p = NeuronParams::new(NeuronKind::StcPlif).with_alpha(0.9).with_vth(10.0);
        let mut st = state_with(NeuronKind::StcPlif, 1.0);
        let z = s(0.0);
        let o = step(&mut st, &z, Some((&z, &z)), &p).unwrap();
        assert_eq!(o.m.item(), 0.9);
    }

    #[test]
    fn plif_alpha_gradient_matches_finite_differences() {
        let v0 = Tensor::new(vec![3], vec![0.3, -0.2, 0.1]).unwrap();
        let x0 = Tensor::new(vec![3], vec![0.4, 0.5, -0.7]).unwrap();
        let p = NeuronParams::new(NeuronKind::Plif).with_vth(10.0);
        let m_of = |raw: &Tensor| -> (f64, Tensor) {
            let mut tape = Tape::new();
            let r = tape.leaf(raw.clone()).unwrap();
            let alpha = tape.sigmoid(r).unwrap();
            let scalars = NeuronScalars {
                alpha: Some(alpha),
                ..Default::default()
            };
            let st = StateVars::from_state(
                &mut tape,
                &NeuronState {
                    v: v0.clone(),
                    s_prev: Tensor::zeros(&[3]),
                    v_dend: None,
                },
            )
            .unwrap();
            let x = tape.constant(x0.clone()).unwrap();
            let (out, _) = step_on_tape(&mut tape, &p, &scalars, &st, x, None).unwrap();
            let l = tape.sum(out.m).unwrap();
            let g = tape.backward(l).unwrap();
            (tape.value(l).item(), g.wrt(&tape, r))
        };
        let raw = Tensor::scalar(p.alpha_raw() + 0.3);
        let (_, an) = m_of(&raw);
        let fd = finite_difference(&raw, 1e-6, |r| m_of(r).0);
        check_gradient(&an, &fd, 1e-4).unwrap();
    }

    #[test]
    fn lmh_lif_equivalent_point() {
        let p = NeuronParams::new(NeuronKind::Lmh);
        let mut st = NeuronState::zeros(NeuronKind::Lmh, &[1]);
        let o = step(&mut st, &s(1.0), None, &p).unwrap();
        assert_eq!(st.v_dend.as_ref().unwrap().item(), 1.0);
        assert_eq!((o.m.item(), o.spikes.item(), st.v.item()), (0.5, 0.0, 0.5));
    }

    #[test]
    fn lmh_pure_integrator_corner() {
        let mut p = NeuronParams::new(NeuronKind::Lmh);
        p.lmh = LmhInit {
            mu_d: 1.0,
            mu_s: 0.0,
            lambda_d: 0.0,
            lambda_s: 0.0,
        };
        let mut st = NeuronState::zeros(NeuronKind::Lmh, &[1]);
        let xs = [0.5, 2.0, -1.25, 3.0];
        let mut acc = 0.0;
        for x in xs {
            acc += x;
            let o = step(&mut st, &s(x), None, &p).unwrap();
            assert_eq!(o.m.item(), 0.0);
            assert_eq!(st.v_dend.as_ref().unwrap().item(), acc);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = NeuronParams::new(NeuronKind::StcLif);
        let mut st = NeuronState::zeros(NeuronKind::StcLif, &[2]);
        let x = Tensor::zeros(&[2]);
        let big = Tensor::full(&[2], 1.5);
        let z = Tensor::zeros(&[2]);
        assert!(stc_lif_step(&mut st, &x, &big, &z, &p).is_err());
        assert!(stc_lif_step(&mut st, &Tensor::zeros(&[3]), &z, &z, &p).is_err());
        assert!(lif_step(&mut st, &x, &p).is_err());
        let lif = NeuronParams::new(NeuronKind::Lif).with_vth(0.0);
        assert!(lif_step(&mut NeuronState::zeros(NeuronKind::Lif, &[2]), &x, &lif).is_err());
    }

    #[test]
    fn truncated_reset_cuts_spike_gradient() {
        let mut p = NeuronParams::new(NeuronKind::Lmh);
        let grad_of_v = |p: &NeuronParams| {
            let mut tape = Tape::new();
            let sc = NeuronScalars::constants(&mut tape, p).unwrap();
            let st = StateVars::zeros(&mut tape, p.kind, &[1]).unwrap();
            let x = tape.leaf(s(2.0)).unwrap();
            let (_, next) = step_on_tape(&mut tape, p, &sc, &st, x, None).unwrap();
            let l = tape.sum(next.v).unwrap();
            tape.backward(l).unwrap().wrt(&tape, x).item()
        };
        let full = grad_of_v(&p);
        p.truncate_reset_grad = true;
        let cut = grad_of_v(&p);
        assert_eq!(cut, 0.5);
        assert!(full < cut);
    }

    proptest::proptest! {
        #[test]
        fn spikes_binary_and_soft_reset_identity(
            xs in proptest::collection::vec(-3.0f64..3.0, 1..40),
            kind_idx in 0usize..7,
            b in -1.0f64..1.0,
            g in -1.0f64..1.0,
        ) {
            let kind = NeuronKind::ALL[kind_idx];
            let p = NeuronParams::new(kind);
            let mut st = NeuronState::zeros(kind, &[1]);
            let (bt, gt) = (s(b), s(g));
            for x in xs {
                let o = step(&mut st, &s(x), kind.is_stc().then_some((&bt, &gt)), &p).unwrap();
                let spk = o.spikes.item();
                proptest::prop_assert!(spk == 0.0 || spk == 1.0);
                let want = if spk == 1.0 { o.m.item() - p.vth } else { o.m.item() };
                proptest::prop_assert_eq!(st.v.item(), want);
                proptest::prop_assert_eq!(st.s_prev.item(), spk);
            }
        }
    }
}
