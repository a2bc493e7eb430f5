//! Verification instruments: the symbolic degree oracle, the throughput
//! benchmark and the complexity-scaling probe.

mod bench;
mod poly;

pub use bench::{linear_fit_r2, machine_tag, scaling_probe, tps_benchmark, ScalingAxis, ScalingReport, ScalingRow, TpsRecord, TIMED_PASSES};
pub use poly::{
    expand_stack, simplified_block_apply, verify_degree_bound, DegreeReport, SimplifiedBlockSpec, SymbolicPoly, MAX_ORACLE_LAYERS, MAX_ORACLE_LEN,
};
