//! Fused decoding dataflows executed on simulated clusters.
//!
//! Each attention head maps to one cluster. Heads run one after another and
//! share a global output tensor that blocks update with atomic accumulation,
//! ordered by head then rank.

mod mha;
mod mla;
mod splithead;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use mha::{run_fused_mha_decode, run_fused_mha_decode_with};
pub use mla::{run_fused_mla_decode, run_fused_mla_decode_with};
pub use splithead::run_splithead_decode;

use crate::collectives::{cluster_gather, cluster_reduce, rescale, Primitive, ReduceOp};
use crate::error::{Result, SimError};
use crate::scalar::Scalar;
use crate::scenario::{DecodeScenario, ModelDims};
use crate::sim::{ClusterConfig, ClusterState, TrafficLedger};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataflowKind {
    /// Head-dimension QKV split, sequence-split attention, output-dimension projection.
    SplitToken,
    /// Latent attention with absorbed weights.
    FusedMla,
    /// Head dimension split through every stage.
    SplitHead,
}

impl DataflowKind {
    pub const ALL: [DataflowKind; 3] = [DataflowKind::SplitToken, DataflowKind::FusedMla, DataflowKind::SplitHead];

    pub fn name(self) -> &'static str {
        match self {
            DataflowKind::SplitToken => "split_token",
            DataflowKind::FusedMla => "fused_mla",
            DataflowKind::SplitHead => "split_head",
        }
    }

    pub fn is_mla(self) -> bool {
        self == DataflowKind::FusedMla
    }

    pub fn validate(self, dims: &ModelDims, n: usize) -> Result<()> {
        crate::sim::validate_cluster_size(n)?;
        match self {
            DataflowKind::FusedMla => dims.validate_mla(n),
            _ => dims.validate_mha(n),
        }
    }
}

impl fmt::Display for DataflowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DataflowKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split_token" | "mha" => Ok(DataflowKind::SplitToken),
            "fused_mla" | "mla" => Ok(DataflowKind::FusedMla),
            "split_head" => Ok(DataflowKind::SplitHead),
            other => Err(SimError::InvalidDims(format!("unknown dataflow `{other}`"))),
        }
    }
}

/// How the softmax statistics are combined across blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsReduction {
    /// Reduce the maxima, rescale local sums to the global max, then reduce the sums.
    #[default]
    TwoPass,
    /// One reduction over `(max, sum)` pairs with the softmax-merge operator.
    Merged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DecodeOptions {
    pub stats: StatsReduction,
}

/// Global softmax statistics of one head, one entry per batch row.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStats<T> {
    pub head: usize,
    pub max: Vec<T>,
    pub sum: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct DecodeResult<T> {
    /// `B x D`.
    pub output: Tensor<T>,
    pub ledger: TrafficLedger,
    /// DSMEM bytes per stage, summed over all clusters.
    pub stage_traffic: BTreeMap<String, u64>,
    pub stats: Vec<HeadStats<T>>,
    pub atomic_adds: u64,
}

/// Runs the dataflow matching `kind` with default options.
pub fn run_decode<T: Scalar>(kind: DataflowKind, scenario: &DecodeScenario<T>) -> Result<DecodeResult<T>> {
    match kind {
        DataflowKind::SplitToken => run_fused_mha_decode(scenario),
        DataflowKind::FusedMla => run_fused_mla_decode(scenario),
        DataflowKind::SplitHead => run_splithead_decode(scenario),
    }
}

/// Unnormalised attention over one KV segment.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAttention<T> {
    /// `B x Hv`: `sum_j exp(score_j - max) v_j` per row.
    pub out: Tensor<T>,
    /// Per-row max score, `-inf` for an empty segment.
    pub max: Vec<T>,
    /// Per-row `sum_j exp(score_j - max)`, 0 for an empty segment.
    pub sum: Vec<T>,
}

/// Attention of every query row in `q` against the same key/value segment,
/// relative to the segment's own maximum score.
pub fn partial_flash_attention<T: Scalar>(
    q: &Tensor<T>,
    k_seg: &Tensor<T>,
    v_seg: &Tensor<T>,
    scale: T,
) -> Result<PartialAttention<T>> {
    let (rows, dk) = (q.rows(), q.cols());
    let seg = k_seg.rows();
    let dv = v_seg.cols();
    if seg > 0 && (k_seg.cols() != dk || v_seg.rows() != seg) {
        return Err(SimError::ShapeMismatch(format!(
            "partial attention: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k_seg.shape(),
            v_seg.shape()
        )));
    }
    let mut out = vec![T::zero(); rows * dv];
    let mut maxes = vec![T::neg_infinity(); rows];
    let mut sums = vec![T::zero(); rows];
    for r in 0..rows {
        let qr = q.row(r);
        let scores: Vec<T> = (0..seg)
            .map(|j| qr.iter().zip(k_seg.row(j)).map(|(&a, &b)| a * b).sum::<T>() * scale)
            .collect();
        let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
        if seg == 0 {
            continue;
        }
        let acc = &mut out[r * dv..(r + 1) * dv];
        for (j, &sc) in scores.iter().enumerate() {
            let p = (sc - m).exp();
            sums[r] += p;
            for (o, &v) in acc.iter_mut().zip(v_seg.row(j)) {
                *o += p * v;
            }
        }
        maxes[r] = m;
    }
    Ok(PartialAttention {
        out: Tensor::matrix(rows, dv, out)?,
        max: maxes,
        sum: sums,
    })
}

/// Partial attention where row `r` additionally attends to its own new key/value
/// (`k_new[r]`, `v_new[r]`) after the shared segment.
pub fn partial_attention_with_new_token<T: Scalar>(
    q: &Tensor<T>,
    k_seg: &Tensor<T>,
    v_seg: &Tensor<T>,
    k_new: &Tensor<T>,
    v_new: &Tensor<T>,
    scale: T,
) -> Result<PartialAttention<T>> {
    let mut outs = Vec::with_capacity(q.rows());
    let (mut maxes, mut sums) = (Vec::new(), Vec::new());
    for r in 0..q.rows() {
        let k = Tensor::concat_rows(&[k_seg, &k_new.slice_rows(r..r + 1)?])?;
        let v = Tensor::concat_rows(&[v_seg, &v_new.slice_rows(r..r + 1)?])?;
        let p = partial_flash_attention(&q.slice_rows(r..r + 1)?, &k, &v, scale)?;
        outs.push(p.out);
        maxes.extend(p.max);
        sums.extend(p.sum);
    }
    Ok(PartialAttention {
        out: Tensor::concat_rows(&outs.iter().collect::<Vec<_>>())?,
        max: maxes,
        sum: sums,
    })
}

pub(crate) fn attention_scale<T: Scalar>(head_dim: usize) -> T {
    T::one() / T::of(head_dim as f64).sqrt()
}

/// Allocates a gather buffer of `N` segments with `local` in segment 0.
pub(crate) fn stage_for_gather<T: Scalar>(cl: &mut ClusterState<T>, rank: usize, name: &str, local: &Tensor<T>) -> Result<()> {
    let mut buf = Tensor::zeros(&[cl.n_blocks() * local.len()]);
    buf.write(0, local.as_slice())?;
    cl.store(rank, name, buf)
}

/// Rebuilds a `rows x (N * width)` matrix from a canonicalized gather buffer whose
/// segments are `rows x seg_cols` blocks, taking columns `offset..offset + width`
/// of every segment.
pub(crate) fn assemble_columns<T: Scalar>(
    canon: &Tensor<T>,
    n: usize,
    rows: usize,
    seg_cols: usize,
    offset: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let data = canon.as_slice();
    let seg_len = rows * seg_cols;
    let mut out = Vec::with_capacity(rows * n * width);
    for r in 0..rows {
        for owner in 0..n {
            let start = owner * seg_len + r * seg_cols + offset;
            out.extend_from_slice(&data[start..start + width]);
        }
    }
    Tensor::matrix(rows, n * width, out)
}

/// Combines the per-block softmax statistics and returns, for each block, the
/// global `(max, sum)` per batch row as read back from that block's buffers.
pub(crate) fn reduce_softmax_stats<T: Scalar>(
    cl: &mut ClusterState<T>,
    partials: &[PartialAttention<T>],
    path: StatsReduction,
) -> Result<Vec<(Vec<T>, Vec<T>)>> {
    let n = cl.n_blocks();
    let mut out = Vec::with_capacity(n);
    match path {
        StatsReduction::TwoPass => {
            for (b, p) in partials.iter().enumerate() {
                cl.store(b, "s_max", Tensor::vector(p.max.clone()))?;
            }
            cluster_reduce(cl, "s_max", ReduceOp::Max, "stats_max")?;
            let mut global_max = Vec::with_capacity(n);
            for (b, p) in partials.iter().enumerate() {
                let m_star = cl.release(b, "s_max")?.into_vec();
                let local: Vec<T> = p
                    .sum
                    .iter()
                    .zip(&p.max)
                    .zip(&m_star)
                    .map(|((&l, &m), &ms)| rescale(l, m, ms))
                    .collect();
                cl.store(b, "s_sum", Tensor::vector(local))?;
                global_max.push(m_star);
            }
            cluster_reduce(cl, "s_sum", ReduceOp::Sum, "stats_sum")?;
            for (b, m_star) in global_max.into_iter().enumerate() {
                let l_star = cl.release(b, "s_sum")?.into_vec();
                out.push((m_star, l_star));
            }
        }
        StatsReduction::Merged => {
            for (b, p) in partials.iter().enumerate() {
                let pairs: Vec<T> = p.max.iter().zip(&p.sum).flat_map(|(&m, &l)| [m, l]).collect();
                cl.store(b, "s_stats", Tensor::vector(pairs))?;
            }
            cluster_reduce(cl, "s_stats", ReduceOp::SoftmaxMerge, "stats_merge")?;
            for b in 0..n {
                let pairs = cl.release(b, "s_stats")?.into_vec();
                let m = pairs.iter().step_by(2).copied().collect();
                let l = pairs.iter().skip(1).step_by(2).copied().collect();
                out.push((m, l));
            }
        }
    }
    Ok(out)
}

/// Rescales a block's partial output by `exp(local_max - global_max) / global_sum` per row.
pub(crate) fn normalize_partial<T: Scalar>(p: &PartialAttention<T>, m_star: &[T], l_star: &[T]) -> Tensor<T> {
    let cols = p.out.cols();
    let mut out = p.out.clone();
    out.map_inplace(|i, a| {
        let r = i / cols;
        rescale(a, p.max[r], m_star[r]) / l_star[r]
    });
    out
}

/// One collective a dataflow issues per cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedCollective {
    pub stage: String,
    pub primitive: Primitive,
    /// Reduce: buffer length. Gather: per-block segment length. In elements.
    pub payload_elems: usize,
    /// Softmax-statistics traffic, reported separately from tensor traffic.
    pub statistics: bool,
}

fn planned(stage: &str, primitive: Primitive, payload_elems: usize, statistics: bool) -> PlannedCollective {
    PlannedCollective {
        stage: stage.to_string(),
        primitive,
        payload_elems,
        statistics,
    }
}

fn stats_plan(batch: usize, path: StatsReduction) -> Vec<PlannedCollective> {
    match path {
        StatsReduction::TwoPass => vec![
            planned("stats_max", Primitive::Reduce, batch, true),
            planned("stats_sum", Primitive::Reduce, batch, true),
        ],
        StatsReduction::Merged => vec![planned("stats_merge", Primitive::Reduce, 2 * batch, true)],
    }
}

/// The per-cluster collective sequence of a dataflow, in execution order.
pub fn collective_plan(kind: DataflowKind, dims: &ModelDims, n: usize, stats: StatsReduction) -> Result<Vec<PlannedCollective>> {
    kind.validate(dims, n)?;
    let b = dims.batch;
    let h = dims.head_dim / n;
    let mut plan = Vec::new();
    match kind {
        DataflowKind::SplitToken => {
            plan.push(planned("qkv_gather", Primitive::Gather, b * 3 * h, false));
            plan.extend(stats_plan(b, stats));
            plan.push(planned("attn_reduce", Primitive::Reduce, b * dims.head_dim, false));
        }
        DataflowKind::FusedMla => {
            let l = dims.latent()?;
            plan.push(planned("q_gather", Primitive::Gather, b * h, false));
            plan.push(planned("kv_gather", Primitive::Gather, b * l / n, false));
            plan.push(planned("q_up_gather", Primitive::Gather, b * l / n, false));
            plan.extend(stats_plan(b, stats));
            plan.push(planned("attn_reduce", Primitive::Reduce, b * l, false));
            plan.push(planned("down_reduce", Primitive::Reduce, b * dims.head_dim, false));
        }
        DataflowKind::SplitHead => {
            plan.push(planned("score_reduce", Primitive::Reduce, dims.attended_len() * b, false));
            plan.push(planned("out_reduce", Primitive::Reduce, b * dims.hidden, false));
        }
    }
    Ok(plan)
}

/// Executes only the collectives of one cluster of a dataflow on zero-filled
/// buffers and returns the resulting ledger. Cheap at any sequence length.
pub fn trace_collectives(kind: DataflowKind, dims: &ModelDims, cluster: ClusterConfig, stats: StatsReduction) -> Result<TrafficLedger> {
    let plan = collective_plan(kind, dims, cluster.n_blocks, stats)?;
    let mut cl = ClusterState::<f32>::new(cluster)?;
    let n = cl.n_blocks();
    for step in &plan {
        match step.primitive {
            Primitive::Reduce => {
                for b in 0..n {
                    cl.alloc(b, &step.stage, &[step.payload_elems])?;
                }
                let op = if step.stage == "stats_merge" {
                    ReduceOp::SoftmaxMerge
                } else {
                    ReduceOp::Sum
                };
                cluster_reduce(&mut cl, &step.stage, op, &step.stage)?;
            }
            Primitive::Gather => {
                for b in 0..n {
                    cl.alloc(b, &step.stage, &[n * step.payload_elems])?;
                }
                cluster_gather(&mut cl, &step.stage, step.payload_elems, &step.stage)?;
            }
        }
        for b in 0..n {
            cl.release(b, &step.stage)?;
        }
    }
    Ok(cl.into_parts().1)
}
