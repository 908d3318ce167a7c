//! Deterministic simulator of thread-block clusters exchanging data through
//! distributed shared memory, with the decoding dataflows built on it, dense
//! reference implementations, and traffic/latency models.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file name the common instantiations.

pub mod analysis;
pub mod collectives;
pub mod dataflows;
pub mod error;
pub mod oracle;
pub mod presets;
pub mod report;
pub mod scalar;
pub mod scenario;
pub mod sim;
pub mod tensor;

pub use collectives::{canonicalize_gathered, cluster_gather, cluster_reduce, GatherLayout, Primitive, ReduceOp};
pub use dataflows::{run_decode, DataflowKind, DecodeOptions, DecodeResult, StatsReduction};
pub use error::{Result, SimError};
pub use scalar::Scalar;
pub use scenario::{DecodeScenario, ModelDims};
pub use sim::{Channel, ClusterConfig, ClusterState, TrafficLedger, MAX_CLUSTER_SIZE};
pub use tensor::{Precision, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ClusterState32 = ClusterState<f32>;
pub type ClusterState64 = ClusterState<f64>;
pub type DecodeScenario32 = DecodeScenario<f32>;
pub type DecodeScenario64 = DecodeScenario<f64>;
pub type DecodeResult32 = DecodeResult<f32>;
pub type DecodeResult64 = DecodeResult<f64>;
