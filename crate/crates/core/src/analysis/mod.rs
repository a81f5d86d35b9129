//! Executable versions of the analytical results: unroll identities,
//! gradient-flow products, cost accounting and the shuffle probe.

mod cost;
mod probe;
mod unroll;

pub use cost::{count_params_flops, CostKind, CostReport, CostRow};
pub use probe::{
    paramtrace, paramtrace_csv, shuffle_permutations, shuffle_probe, shuffle_probe_with, NeuronSite, ParamTraceRow,
    ShuffleReport,
};
pub use unroll::{
    autodiff_flow, gradient_flow_csv, gradient_flow_factors, gradient_flow_trace, lif_unroll_oracle,
    simulate_live_circuit, simulate_lif, simulate_stc, stc_unroll_oracle, unroll_experiment, FlowModel, StepRecord,
    UnrollReport, UnrollTrace,
};
