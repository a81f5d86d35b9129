//! Parameter and multiply-accumulate accounting.
//!
//! Convolution MACs are `C_out · C_in/groups · k² · H · W` per timestep.
//! Normalisation, activation and neuron updates are counted as elementwise
//! operations in a separate column and stay out of the MAC totals.

use std::fmt::Write as _;

use crate::circuit::Pathway;
use crate::error::{Error, Result};
use crate::neuron::NeuronKind;
use crate::prednet::{NetworkConfig, NetworkParams, RolloutPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CostKind {
    Conv,
    Norm,
    TemporalCircuit,
    SpatialCircuit,
    Neuron,
    Head,
}

impl CostKind {
    pub fn name(self) -> &'static str {
        match self {
            CostKind::Conv => "conv",
            CostKind::Norm => "norm",
            CostKind::TemporalCircuit => "temporal_circuit",
            CostKind::SpatialCircuit => "spatial_circuit",
            CostKind::Neuron => "neuron",
            CostKind::Head => "head",
        }
    }

    pub fn is_circuit(self) -> bool {
        matches!(self, CostKind::TemporalCircuit | CostKind::SpatialCircuit)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub module: String,
    pub kind: CostKind,
    pub params: u64,
    pub macs_per_step: u64,
    pub elementwise_per_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    /// Timesteps executed by one rollout.
    pub steps: u64,
}

/// Elementwise operations per neuron per step.
fn neuron_ops(kind: NeuronKind) -> u64 {
    match kind {
        NeuronKind::If => 3,
        NeuronKind::Lif | NeuronKind::Plif => 4,
        NeuronKind::StcLif | NeuronKind::StcPlif => 6,
        NeuronKind::Lmh => 8,
        NeuronKind::StcLmh => 10,
    }
}

/// Norm statistics, normalisation and affine, per element.
const NORM_OPS: u64 = 6;

impl CostReport {
    pub fn from_config(cfg: &NetworkConfig, plan: &RolloutPlan) -> Result<Self> {
        cfg.validate()?;
        plan.validate()?;
        let (h, w) = cfg.feature_hw();
        let hw = (h * w) as u64;
        let k2 = (cfg.kernel * cfg.kernel) as u64;
        let mut rows = Vec::new();
        for i in 0..cfg.channels.len() {
            let (cin, cout) = cfg.block_in_out(i);
            let (cin, cout) = (cin as u64, cout as u64);
            rows.push(CostRow {
                module: format!("block{i}.conv"),
                kind: CostKind::Conv,
                params: cout * cin * k2 + cout,
                macs_per_step: cout * cin * k2 * hw,
                elementwise_per_step: 0,
            });
            rows.push(CostRow {
                module: format!("block{i}.norm"),
                kind: CostKind::Norm,
                params: 2 * cout,
                macs_per_step: 0,
                elementwise_per_step: NORM_OPS * cout * hw,
            });
            if cfg.has_circuit() {
                for p in [Pathway::Temporal, Pathway::Spatial] {
                    if !cfg.circuit.enabled(p) {
                        continue;
                    }
                    let kind = match p {
                        Pathway::Temporal => CostKind::TemporalCircuit,
                        Pathway::Spatial => CostKind::SpatialCircuit,
                    };
                    rows.push(CostRow {
                        module: format!("block{i}.{}", p.prefix()),
                        kind,
                        params: cfg.circuit.pathway_params(cout as usize)? as u64,
                        macs_per_step: cfg.circuit.pathway_macs(cout as usize, h, w)?,
                        // tanh
                        elementwise_per_step: cout * hw,
                    });
                }
            }
            rows.push(CostRow {
                module: format!("block{i}.neuron"),
                kind: CostKind::Neuron,
                params: cfg.neuron.kind.scalar_count() as u64,
                macs_per_step: 0,
                elementwise_per_step: neuron_ops(cfg.neuron.kind) * cout * hw,
            });
        }
        let clast = *cfg.channels.last().expect("validated") as u64;
        let cout = cfg.in_channels() as u64;
        rows.push(CostRow {
            module: "head".into(),
            kind: CostKind::Head,
            params: cout * clast * k2 + cout,
            macs_per_step: cout * clast * k2 * hw,
            elementwise_per_step: 0,
        });
        Ok(CostReport {
            rows,
            steps: plan.steps() as u64,
        })
    }

    fn sum(&self, f: impl Fn(&CostRow) -> u64, keep: impl Fn(&CostRow) -> bool) -> u64 {
        self.rows.iter().filter(|r| keep(r)).map(f).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.sum(|r| r.params, |_| true)
    }

    pub fn circuit_params(&self) -> u64 {
        self.sum(|r| r.params, |r| r.kind.is_circuit())
    }

    pub fn macs_per_step(&self) -> u64 {
        self.sum(|r| r.macs_per_step, |_| true)
    }

    pub fn circuit_macs_per_step(&self) -> u64 {
        self.sum(|r| r.macs_per_step, |r| r.kind.is_circuit())
    }

    pub fn elementwise_per_step(&self) -> u64 {
        self.sum(|r| r.elementwise_per_step, |_| true)
    }

    /// MACs over a whole rollout.
    pub fn total_macs(&self) -> u64 {
        self.macs_per_step() * self.steps
    }

    /// Circuit MACs relative to everything else.
    pub fn circuit_mac_increase(&self) -> f64 {
        let c = self.circuit_macs_per_step() as f64;
        c / (self.macs_per_step() as f64 - c)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("module,kind,params,macs_per_step,elementwise_per_step,macs_per_rollout\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.module,
                r.kind.name(),
                r.params,
                r.macs_per_step,
                r.elementwise_per_step,
                r.macs_per_step * self.steps
            )
            .unwrap();
        }
        writeln!(
            s,
            "total,total,{},{},{},{}",
            self.total_params(),
            self.macs_per_step(),
            self.elementwise_per_step(),
            self.total_macs()
        )
        .unwrap();
        s
    }
}

/// Cost of an instantiated network; the parameter total is cross-checked
/// against the stored tensors.
pub fn count_params_flops(net: &NetworkParams, plan: &RolloutPlan) -> Result<CostReport> {
    let report = CostReport::from_config(net.config(), plan)?;
    let stored = net.param_count() as u64;
    if stored != report.total_params() {
        return Err(Error::invalid(
            "cost",
            format!("network stores {stored} scalars but accounting gives {}", report.total_params()),
        ));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::CircuitConfig;
    use crate::neuron::NeuronParams;

    fn cfg(kind: NeuronKind) -> NetworkConfig {
        NetworkConfig {
            frame: [1, 8, 8],
            patch: 2,
            channels: vec![8, 8],
            kernel: 5,
            norm_groups: 4,
            norm_eps: 1e-5,
            neuron: NeuronParams::new(kind),
            circuit: CircuitConfig {
                groups: 4,
                kernel: 3,
                ..Default::default()
            },
        }
    }

    #[test]
    fn single_conv_hand_count() {
        let r = CostReport::from_config(&cfg(NeuronKind::Lif), &RolloutPlan::new(2, 2)).unwrap();
        let first = &r.rows[0];
        assert_eq!(first.params, 4 * 8 * 25 + 8);
        assert_eq!(first.params, 808);
        assert_eq!(first.macs_per_step, 808 * 16 - 8 * 16);
        assert_eq!(r.steps, 3);
    }

    #[test]
    fn matches_instantiated_networks() {
        for kind in NeuronKind::ALL {
            let net = NetworkParams::init(cfg(kind), 0).unwrap();
            count_params_flops(&net, &RolloutPlan::new(3, 3)).unwrap();
        }
    }

    #[test]
    fn disabling_pathways_removes_their_rows() {
        let plan = RolloutPlan::new(4, 4);
        let full = CostReport::from_config(&cfg(NeuronKind::StcLif), &plan).unwrap();
        let mut c = cfg(NeuronKind::StcLif);
        c.circuit.temporal = false;
        let no_tc = CostReport::from_config(&c, &plan).unwrap();
        c.circuit.temporal = true;
        c.circuit.spatial = false;
        let no_sc = CostReport::from_config(&c, &plan).unwrap();
        c.circuit.temporal = false;
        let base = CostReport::from_config(&c, &plan).unwrap();
        for f in [CostReport::total_params, CostReport::total_macs, CostReport::elementwise_per_step] {
            assert_eq!(f(&full) + f(&base), f(&no_tc) + f(&no_sc));
        }
        assert_eq!(base.circuit_params(), 0);
    }
}
