//! Report rows shared by the command-line driver and the test suites.

use serde::{Deserialize, Serialize};

use crate::analysis::cost::{dataflow_latency, CostParams, Link};
use crate::analysis::traffic::{analytical_traffic, dataflow_traffic, TrafficBreakdown};
use crate::dataflows::{run_fused_mha_decode_with, run_fused_mla_decode_with, run_splithead_decode};
use crate::dataflows::{DataflowKind, DecodeOptions, StatsReduction};
use crate::error::Result;
use crate::oracle::{dense_mha_decode, dense_mla_decode, AttentionVariant};
use crate::presets::{DimOverrides, ModelPreset};
use crate::scenario::{DecodeScenario, ModelDims};
use crate::sim::ClusterConfig;
use crate::tensor::Precision;

/// Max-abs-error tolerance against the dense oracle.
pub fn tolerance(precision: Precision) -> f64 {
    match precision {
        Precision::F32 => 1e-5,
        Precision::F16Emulated => 3e-2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub model: ModelPreset,
    pub overrides: DimOverrides,
    pub dataflow: DataflowKind,
    pub n: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub precision: Precision,
    pub seed: u64,
    pub stats: StatsReduction,
}

impl ScenarioSpec {
    pub fn dims(&self) -> ModelDims {
        self.model.dims(self.batch, self.seq_len, &self.overrides)
    }

    pub fn id(&self) -> String {
        format!(
            "{}-{}-n{}-s{}-b{}-{}-seed{}",
            self.model.name(),
            self.dataflow.name(),
            self.n,
            self.seq_len,
            self.batch,
            self.precision.name(),
            self.seed
        )
    }

    pub fn cluster(&self) -> ClusterConfig {
        ClusterConfig::new(self.n).with_precision(self.precision)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataflow.validate(&self.dims(), self.n)
    }
}

/// Columns, in output order.
pub const REPORT_COLUMNS: [&str; 15] = [
    "scenario_id",
    "model",
    "dataflow",
    "n",
    "s",
    "b",
    "dtype",
    "dsmem_bytes_measured",
    "dsmem_bytes_analytical",
    "dsmem_bytes_headline",
    "dsmem_bytes_statistics",
    "est_latency_on_chip_us",
    "est_latency_off_chip_us",
    "max_abs_error_vs_oracle",
    "pass",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario_id: String,
    pub model: String,
    pub dataflow: String,
    pub n: usize,
    pub s: usize,
    pub b: usize,
    pub dtype: String,
    /// Per-cluster DSMEM bytes from the simulator ledger, statistics included.
    pub dsmem_bytes_measured: u64,
    /// Per-cluster DSMEM bytes from the closed-form formulas, statistics included.
    pub dsmem_bytes_analytical: u64,
    pub dsmem_bytes_headline: u64,
    pub dsmem_bytes_statistics: u64,
    pub est_latency_on_chip_us: f64,
    pub est_latency_off_chip_us: f64,
    /// Present only when the dataflow was executed against its oracle.
    pub max_abs_error_vs_oracle: Option<f64>,
    pub pass: bool,
}

impl ReportRow {
    fn new(spec: &ScenarioSpec, t: &TrafficBreakdown, params: &CostParams, error: Option<f64>) -> Self {
        let measured = t.total_measured();
        let error_ok = error.is_none_or(|e| e.is_finite() && e <= tolerance(spec.precision));
        ReportRow {
            scenario_id: spec.id(),
            model: spec.model.name().to_string(),
            dataflow: spec.dataflow.name().to_string(),
            n: spec.n,
            s: spec.seq_len,
            b: spec.batch,
            dtype: spec.precision.name().to_string(),
            dsmem_bytes_measured: measured.unwrap_or(0),
            dsmem_bytes_analytical: t.total_analytical(),
            dsmem_bytes_headline: t.headline_analytical(),
            dsmem_bytes_statistics: t.statistics_analytical(),
            est_latency_on_chip_us: dataflow_latency(t, Link::OnChip, params),
            est_latency_off_chip_us: dataflow_latency(t, Link::OffChip, params),
            max_abs_error_vs_oracle: error,
            pass: t.reconciles() && error_ok,
        }
    }
}

pub struct VerifyOutcome {
    pub row: ReportRow,
    pub traffic: TrafficBreakdown,
}

/// Runs the dataflow on a random scenario, compares it with the dense oracle
/// and reconciles cluster 0's ledger against the analytical traffic.
pub fn verify_scenario(spec: &ScenarioSpec, params: &CostParams) -> Result<VerifyOutcome> {
    spec.validate()?;
    let dims = spec.dims();
    let cluster = spec.cluster();
    let opts = DecodeOptions { stats: spec.stats };
    let (result, reference) = if spec.dataflow.is_mla() {
        let sc = DecodeScenario::<f32>::random_mla(dims, cluster, spec.seed)?;
        (run_fused_mla_decode_with(&sc, opts)?, dense_mla_decode(&sc, AttentionVariant::MlaOriginal)?)
    } else {
        let sc = DecodeScenario::<f32>::random_mha(dims, cluster, spec.seed)?;
        let result = match spec.dataflow {
            DataflowKind::SplitHead => run_splithead_decode(&sc)?,
            _ => run_fused_mha_decode_with(&sc, opts)?,
        };
        (result, dense_mha_decode(&sc)?)
    };
    let error = if result.output.all_finite() {
        result.output.max_abs_diff(&reference)
    } else {
        f64::INFINITY
    };
    let traffic = analytical_traffic(spec.dataflow, &dims, spec.n, spec.precision, spec.stats)?
        .with_measurements(&result.ledger, 0);
    Ok(VerifyOutcome {
        row: ReportRow::new(spec, &traffic, params, Some(error)),
        traffic,
    })
}

/// Traffic and latency only; the collectives are traced on zero buffers.
pub fn traffic_row(spec: &ScenarioSpec, params: &CostParams) -> Result<(ReportRow, TrafficBreakdown)> {
    spec.validate()?;
    let t = dataflow_traffic(spec.dataflow, &spec.dims(), spec.n, spec.precision, spec.stats)?;
    Ok((ReportRow::new(spec, &t, params, None), t))
}
