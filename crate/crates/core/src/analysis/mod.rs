//! Machine-checkable theory: reachability of global information exchange
//! and the analytic FLOPs/parameter model.

pub mod cost;
pub mod reach;

pub use cost::{model_cost, module_flops, param_count, reference_row, CostReport, ModuleCost, ReferenceRow, StageCost};
pub use reach::{
    erf_depth_bound, verify_theorem1, verify_with_radius, witness, EdgeKind, RadiusMode, ReachabilityGraph,
    ReachabilityReport, ReachabilityWitness,
};
