//! Cluster-level collectives over DSMEM.
//!
//! Both primitives run `log2(N)` lockstep rounds. In round `r` the stride is
//! `2^r` and block `b` sends to `(b + stride) mod N` while receiving from
//! `(b - stride) mod N`. Reduce keeps the message size fixed and folds the
//! received copy into the local buffer; gather doubles the message each round.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::scalar::Scalar;
use crate::sim::{ClusterState, Transfer};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Reduce,
    Gather,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Reduce => "cluster_reduce",
            Primitive::Gather => "cluster_gather",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceOp {
    Sum,
    Max,
    /// Buffers hold interleaved `(max, sum)` softmax statistics:
    /// `m' = max(m_a, m_b)`, `l' = l_a exp(m_a - m') + l_b exp(m_b - m')`.
    SoftmaxMerge,
}

impl ReduceOp {
    /// Folds `incoming` into `local` elementwise.
    pub fn combine<T: Scalar>(self, local: &mut [T], incoming: &[T]) {
        match self {
            ReduceOp::Sum => local.iter_mut().zip(incoming).for_each(|(a, &b)| *a += b),
            ReduceOp::Max => local.iter_mut().zip(incoming).for_each(|(a, &b)| *a = a.max(b)),
            ReduceOp::SoftmaxMerge => {
                for (a, b) in local.chunks_exact_mut(2).zip(incoming.chunks_exact(2)) {
                    let (m, l) = merge_softmax_stats((a[0], a[1]), (b[0], b[1]));
                    a[0] = m;
                    a[1] = l;
                }
            }
        }
    }
}

/// Merges two online-softmax `(max, sum)` pairs. `(-inf, 0)` is the identity.
pub fn merge_softmax_stats<T: Scalar>(a: (T, T), b: (T, T)) -> (T, T) {
    let m = a.0.max(b.0);
    if m == T::neg_infinity() {
        return (m, T::zero());
    }
    (m, rescale(a.1, a.0, m) + rescale(b.1, b.0, m))
}

/// `value * exp(local_max - global_max)`, treating an empty partial (`-inf` max) as zero.
pub fn rescale<T: Scalar>(value: T, local_max: T, global_max: T) -> T {
    if local_max == T::neg_infinity() {
        T::zero()
    } else {
        value * (local_max - global_max).exp()
    }
}

/// `(send_to, recv_from)` for block `rank` at `stride`.
pub fn ring_partners(rank: usize, stride: usize, n: usize) -> (usize, usize) {
    ((rank + stride) % n, (rank + n - stride) % n)
}

/// Final placement produced by [`cluster_gather`]: segment `j` of block `b`'s
/// buffer holds the data of rank `(b - j) mod N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatherLayout {
    pub n_blocks: usize,
}

impl GatherLayout {
    pub fn owner_of_segment(&self, rank: usize, segment: usize) -> usize {
        (rank + self.n_blocks - segment % self.n_blocks) % self.n_blocks
    }

    /// Segment index where block `rank` stores the data of `owner`.
    pub fn segment_of(&self, rank: usize, owner: usize) -> usize {
        (rank + self.n_blocks - owner) % self.n_blocks
    }
}

fn scratch_name(buffer: &str) -> String {
    format!("{buffer}.scratch")
}

/// All-reduce of `buffer` across the cluster, in place. Ledger events are tagged `stage`.
pub fn cluster_reduce<T: Scalar>(cluster: &mut ClusterState<T>, buffer: &str, op: ReduceOp, stage: &str) -> Result<()> {
    let n = cluster.n_blocks();
    let shape = cluster.buffer(0, buffer)?.shape().to_vec();
    for rank in 1..n {
        let other = cluster.buffer(rank, buffer)?.shape();
        if other != shape.as_slice() {
            return Err(SimError::ShapeMismatch(format!(
                "reduce buffer `{buffer}`: block 0 has {shape:?}, block {rank} has {other:?}"
            )));
        }
    }
    let len: usize = shape.iter().product();
    if op == ReduceOp::SoftmaxMerge && !len.is_multiple_of(2) {
        return Err(SimError::ShapeMismatch(format!(
            "softmax-merge buffer `{buffer}` must hold (max, sum) pairs, got {len} elements"
        )));
    }

    let scratch = scratch_name(buffer);
    for rank in 0..n {
        if let Err(e) = cluster.alloc(rank, &scratch, &shape) {
            for r in 0..rank {
                cluster.release(r, &scratch)?;
            }
            return Err(e);
        }
    }

    let invocation = cluster.begin_collective(stage);
    let mut stride = 1;
    let mut round = 0;
    while stride < n {
        let transfers: Vec<Transfer> = (0..n)
            .map(|b| Transfer {
                src: b,
                src_buffer: buffer.to_string(),
                src_range: 0..len,
                dst: ring_partners(b, stride, n).0,
                dst_buffer: scratch.clone(),
                dst_offset: 0,
            })
            .collect();
        cluster.exchange(invocation, round, &transfers)?;
        for b in 0..n {
            let incoming = cluster.buffer(b, &scratch)?.as_slice().to_vec();
            let mut local = cluster.buffer(b, buffer)?.as_slice().to_vec();
            op.combine(&mut local, &incoming);
            cluster.write(b, buffer, 0, &local)?;
        }
        stride *= 2;
        round += 1;
    }

    for rank in 0..n {
        cluster.release(rank, &scratch)?;
    }
    Ok(())
}

/// All-gather: each block's buffer holds `N * segment_len` elements with its own
/// data in segment 0. Afterwards every block holds every rank's segment, laid out
/// per the returned [`GatherLayout`].
pub fn cluster_gather<T: Scalar>(
    cluster: &mut ClusterState<T>,
    buffer: &str,
    segment_len: usize,
    stage: &str,
) -> Result<GatherLayout> {
    let n = cluster.n_blocks();
    for rank in 0..n {
        let len = cluster.buffer(rank, buffer)?.len();
        if len != n * segment_len {
            return Err(SimError::GatherBufferSize {
                rank,
                len,
                n_blocks: n,
                segment: segment_len,
            });
        }
    }

    let invocation = cluster.begin_collective(stage);
    let mut stride = 1;
    let mut round = 0;
    while stride < n {
        let transfers: Vec<Transfer> = (0..n)
            .map(|b| Transfer {
                src: b,
                src_buffer: buffer.to_string(),
                src_range: 0..segment_len * stride,
                dst: ring_partners(b, stride, n).0,
                dst_buffer: buffer.to_string(),
                dst_offset: stride * segment_len,
            })
            .collect();
        cluster.exchange(invocation, round, &transfers)?;
        stride *= 2;
        round += 1;
    }
    Ok(GatherLayout { n_blocks: n })
}

/// Reorders a gathered buffer from block `rank` so that segment `r` holds rank `r`'s data.
pub fn canonicalize_gathered<T: Scalar>(buffer: &Tensor<T>, rank: usize, n: usize, segment_len: usize) -> Tensor<T> {
    let layout = GatherLayout { n_blocks: n };
    let src = buffer.as_slice();
    let mut out = Vec::with_capacity(src.len());
    for owner in 0..n {
        let j = layout.segment_of(rank, owner);
        out.extend_from_slice(&src[j * segment_len..(j + 1) * segment_len]);
    }
    Tensor::new(buffer.shape().to_vec(), out)
        .expect("canonicalization preserves length")
        .rounded(buffer.precision())
}
