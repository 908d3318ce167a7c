//! Cluster-size sweeps over the traffic and latency models.

use serde::{Deserialize, Serialize};

use crate::analysis::cost::{dataflow_latency, CostParams, Link};
use crate::analysis::traffic::dataflow_traffic;
use crate::dataflows::{DataflowKind, StatsReduction};
use crate::error::Result;
use crate::scenario::ModelDims;
use crate::tensor::Precision;

pub const DEFAULT_TOTAL_SMS: usize = 132;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub traffic_measured: u64,
    pub traffic_analytical: u64,
    pub latency_on_chip_us: f64,
    pub latency_off_chip_us: f64,
    pub active_block_slots: usize,
    pub best: bool,
}

/// `floor(total_sms / n) * n`.
pub fn active_block_slots(total_sms: usize, n: usize) -> usize {
    (total_sms / n.max(1)) * n.max(1)
}

/// One row per cluster size in `n_set`, in input order. Exactly one row is
/// flagged `best`: the smallest on-chip latency, ties going to the smaller N.
pub fn sweep_cluster_sizes(
    kind: DataflowKind,
    dims: &ModelDims,
    n_set: &[usize],
    precision: Precision,
    params: &CostParams,
    total_sms: usize,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(n_set.len());
    for &n in n_set {
        let t = dataflow_traffic(kind, dims, n, precision, StatsReduction::default())?;
        rows.push(SweepRow {
            n,
            traffic_measured: t.total_measured().unwrap_or(0),
            traffic_analytical: t.total_analytical(),
            latency_on_chip_us: dataflow_latency(&t, Link::OnChip, params),
            latency_off_chip_us: dataflow_latency(&t, Link::OffChip, params),
            active_block_slots: active_block_slots(total_sms, n),
            best: false,
        });
    }
    let best = rows
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            a.latency_on_chip_us
                .total_cmp(&b.latency_on_chip_us)
                .then(a.n.cmp(&b.n))
        })
        .map(|(i, _)| i);
    if let Some(i) = best {
        rows[i].best = true;
    }
    Ok(rows)
}
