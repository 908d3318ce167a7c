//! Closed-form DSMEM traffic of the collectives and of each dataflow.

use serde::{Deserialize, Serialize};

use crate::collectives::Primitive;
use crate::dataflows::{trace_collectives, DataflowKind, StatsReduction};
use crate::error::Result;
use crate::scenario::ModelDims;
use crate::sim::{validate_cluster_size, ClusterConfig, TrafficLedger};
use crate::tensor::Precision;

/// `size * log2(N) * N`.
pub fn traffic_reduce(size_bytes: u64, n: usize) -> Result<u64> {
    validate_cluster_size(n)?;
    Ok(size_bytes * n.trailing_zeros() as u64 * n as u64)
}

/// `size * (2^(log2(N/2) + 1) - 1) * N`. The exponent is `log2(N)`, so this is
/// `size * (N - 1) * N`, and 0 for `N = 1`.
pub fn traffic_gather(size_bytes: u64, n: usize) -> Result<u64> {
    validate_cluster_size(n)?;
    let doubling = (1u64 << n.trailing_zeros()) - 1;
    Ok(size_bytes * doubling * n as u64)
}

pub fn collective_traffic(primitive: Primitive, size_bytes: u64, n: usize) -> Result<u64> {
    match primitive {
        Primitive::Reduce => traffic_reduce(size_bytes, n),
        Primitive::Gather => traffic_gather(size_bytes, n),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficEntry {
    pub stage: String,
    pub primitive: Primitive,
    /// Reduce buffer size, or per-block gather segment size, in bytes.
    pub payload_bytes: u64,
    pub analytical_bytes: u64,
    pub measured_bytes: Option<u64>,
    pub statistics: bool,
}

/// Per-cluster traffic of one dataflow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficBreakdown {
    pub kind: DataflowKind,
    pub n_blocks: usize,
    pub entries: Vec<TrafficEntry>,
}

impl TrafficBreakdown {
    /// Tensor traffic only; softmax-statistics traffic is excluded.
    pub fn headline_analytical(&self) -> u64 {
        self.entries.iter().filter(|e| !e.statistics).map(|e| e.analytical_bytes).sum()
    }

    pub fn statistics_analytical(&self) -> u64 {
        self.entries.iter().filter(|e| e.statistics).map(|e| e.analytical_bytes).sum()
    }

    pub fn total_analytical(&self) -> u64 {
        self.entries.iter().map(|e| e.analytical_bytes).sum()
    }

    pub fn total_measured(&self) -> Option<u64> {
        self.entries.iter().map(|e| e.measured_bytes).sum()
    }

    /// Every entry has a measurement equal to its analytical value.
    pub fn reconciles(&self) -> bool {
        self.entries.iter().all(|e| e.measured_bytes == Some(e.analytical_bytes))
    }

    /// Fills measurements from one cluster's DSMEM events in `ledger`.
    pub fn with_measurements(mut self, ledger: &TrafficLedger, cluster: usize) -> Self {
        let totals = ledger.stage_totals_for_cluster(cluster);
        for e in &mut self.entries {
            e.measured_bytes = Some(totals.get(&e.stage).copied().unwrap_or(0));
        }
        self
    }
}

fn entry(stage: &str, primitive: Primitive, payload_bytes: u64, n: usize, statistics: bool) -> Result<TrafficEntry> {
    Ok(TrafficEntry {
        stage: stage.to_string(),
        primitive,
        payload_bytes,
        analytical_bytes: collective_traffic(primitive, payload_bytes, n)?,
        measured_bytes: None,
        statistics,
    })
}

fn stats_entries(batch_bytes: u64, n: usize, stats: StatsReduction) -> Result<Vec<TrafficEntry>> {
    Ok(match stats {
        StatsReduction::TwoPass => vec![
            entry("stats_max", Primitive::Reduce, batch_bytes, n, true)?,
            entry("stats_sum", Primitive::Reduce, batch_bytes, n, true)?,
        ],
        StatsReduction::Merged => vec![entry("stats_merge", Primitive::Reduce, 2 * batch_bytes, n, true)?],
    })
}

/// Analytical per-cluster traffic, without measurements.
///
/// Sizes are bytes = elements x dtype bytes and include the batch dimension:
/// - split_token: `Gather(3h) + Reduce(H)`
/// - fused_mla: `Gather(h) + 2 Gather(l/N) + Reduce(l) + Reduce(H)`
/// - split_head: `Reduce((S+1) B) + Reduce(D)` where `S+1` counts the new token
///
/// plus the softmax-statistics reductions, flagged as `statistics`.
pub fn analytical_traffic(
    kind: DataflowKind,
    dims: &ModelDims,
    n: usize,
    precision: Precision,
    stats: StatsReduction,
) -> Result<TrafficBreakdown> {
    kind.validate(dims, n)?;
    let bytes = precision.bytes() as u64;
    let b = dims.batch as u64;
    let head = dims.head_dim as u64;
    let h = head / n as u64;
    let row = b * bytes;
    let entries = match kind {
        DataflowKind::SplitToken => {
            let mut v = vec![entry("qkv_gather", Primitive::Gather, 3 * h * row, n, false)?];
            v.extend(stats_entries(row, n, stats)?);
            v.push(entry("attn_reduce", Primitive::Reduce, head * row, n, false)?);
            v
        }
        DataflowKind::FusedMla => {
            let l = dims.latent()? as u64;
            let l_slice = l / n as u64;
            let mut v = vec![
                entry("q_gather", Primitive::Gather, h * row, n, false)?,
                entry("kv_gather", Primitive::Gather, l_slice * row, n, false)?,
                entry("q_up_gather", Primitive::Gather, l_slice * row, n, false)?,
            ];
            v.extend(stats_entries(row, n, stats)?);
            v.push(entry("attn_reduce", Primitive::Reduce, l * row, n, false)?);
            v.push(entry("down_reduce", Primitive::Reduce, head * row, n, false)?);
            v
        }
        DataflowKind::SplitHead => vec![
            entry("score_reduce", Primitive::Reduce, dims.attended_len() as u64 * row, n, false)?,
            entry("out_reduce", Primitive::Reduce, dims.hidden as u64 * row, n, false)?,
        ],
    };
    Ok(TrafficBreakdown {
        kind,
        n_blocks: n,
        entries,
    })
}

/// Analytical traffic reconciled against a traced execution of the dataflow's collectives.
pub fn dataflow_traffic(
    kind: DataflowKind,
    dims: &ModelDims,
    n: usize,
    precision: Precision,
    stats: StatsReduction,
) -> Result<TrafficBreakdown> {
    let breakdown = analytical_traffic(kind, dims, n, precision, stats)?;
    let cluster = ClusterConfig::new(n).with_precision(precision);
    let ledger = trace_collectives(kind, dims, cluster, stats)?;
    Ok(breakdown.with_measurements(&ledger, 0))
}

/// The split-token total with the reduce and gather payloads interchanged,
/// `Reduce(3h) + Gather(H)`. It does not match what the dataflow executes and
/// is reported for comparison only.
pub fn swapped_split_token_traffic(dims: &ModelDims, n: usize, precision: Precision) -> Result<u64> {
    DataflowKind::SplitToken.validate(dims, n)?;
    let row = (dims.batch * precision.bytes()) as u64;
    let h = (dims.head_dim / n) as u64;
    Ok(traffic_reduce(3 * h * row, n)? + traffic_gather(dims.head_dim as u64 * row, n)?)
}
