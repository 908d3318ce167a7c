pub mod cost;
pub mod sweep;
pub mod traffic;

pub use cost::{
    calibrate_cost_params, dataflow_latency, estimate_collective_latency, parse_fixture, per_block_bytes, rounds,
    AffineCost, Calibration, CostParams, HardwareProfile, LatencyPoint, Link, PrimitiveCost, Residual,
    FIXTURE_CLUSTER_SIZE, TABLE1_CSV,
};
pub use sweep::{active_block_slots, sweep_cluster_sizes, SweepRow, DEFAULT_TOTAL_SMS};
pub use traffic::{
    analytical_traffic, collective_traffic, dataflow_traffic, swapped_split_token_traffic, traffic_gather,
    traffic_reduce, TrafficBreakdown, TrafficEntry,
};
