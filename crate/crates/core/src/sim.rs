//! Simulated thread-block cluster.
//!
//! A [`ClusterState`] owns `N` blocks with named shared-memory buffers, a global
//! memory with atomic accumulation, and the [`TrafficLedger`]. Data only moves
//! between blocks through [`ClusterState::exchange`], which executes one
//! lockstep round: every transfer reads its source before any destination is
//! written, and every transfer is logged as exactly one ledger event.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::scalar::Scalar;
use crate::tensor::{Precision, Tensor};

/// Largest cluster the hardware supports.
pub const MAX_CLUSTER_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub n_blocks: usize,
    /// Per-block shared-memory budget in bytes; `None` means unlimited.
    pub smem_capacity_bytes: Option<usize>,
    pub precision: Precision,
}

impl ClusterConfig {
    pub fn new(n_blocks: usize) -> Self {
        Self {
            n_blocks,
            smem_capacity_bytes: None,
            precision: Precision::F32,
        }
    }

    pub fn with_smem_capacity(mut self, bytes: usize) -> Self {
        self.smem_capacity_bytes = Some(bytes);
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn validate(&self) -> Result<()> {
        validate_cluster_size(self.n_blocks)
    }

    pub fn dtype_bytes(&self) -> usize {
        self.precision.bytes()
    }

    /// Number of collective rounds, `log2(N)`.
    pub fn rounds(&self) -> usize {
        self.n_blocks.trailing_zeros() as usize
    }
}

pub fn validate_cluster_size(n: usize) -> Result<()> {
    if n == 0 || n > MAX_CLUSTER_SIZE || !n.is_power_of_two() {
        return Err(SimError::InvalidClusterSize(n));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BlockState<T> {
    rank: usize,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> BlockState<T> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &str> {
        self.buffers.keys().map(String::as_str)
    }

    pub fn smem_bytes(&self, dtype_bytes: usize) -> usize {
        self.buffers.values().map(|t| t.len() * dtype_bytes).sum()
    }
}

#[derive(Debug, Clone, Default)]
pub struct GlobalMemory<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    atomic_add_count: u64,
}

impl<T: Scalar> GlobalMemory<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
            atomic_add_count: 0,
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) {
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn atomic_add_count(&self) -> u64 {
        self.atomic_add_count
    }

    /// `target[offset + i] += values[i]`, rounded to the target's precision.
    pub fn atomic_accumulate(&mut self, name: &str, offset: usize, values: &[T]) -> Result<()> {
        let target = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| SimError::MissingTensor(name.to_string()))?;
        let end = offset + values.len();
        if end > target.len() {
            return Err(SimError::OutOfBounds {
                start: offset,
                end,
                len: target.len(),
            });
        }
        target.map_inplace(|i, x| {
            if (offset..end).contains(&i) {
                x + values[i - offset]
            } else {
                x
            }
        });
        self.atomic_add_count += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Dsmem,
    Global,
}

/// One data movement. For `Global` events `src == dst` is the writing block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficEvent {
    pub cluster: usize,
    pub invocation: usize,
    pub stage: String,
    pub round: usize,
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
    pub channel: Channel,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficLedger {
    events: Vec<TrafficEvent>,
}

impl TrafficLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[TrafficEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub(crate) fn push(&mut self, event: TrafficEvent) {
        debug_assert!(event.bytes > 0);
        self.events.push(event);
    }

    pub fn append(&mut self, other: TrafficLedger) {
        self.events.extend(other.events);
    }

    pub fn bytes(&self, channel: Channel) -> u64 {
        self.events
            .iter()
            .filter(|e| e.channel == channel)
            .map(|e| e.bytes)
            .sum()
    }

    pub fn dsmem_bytes(&self) -> u64 {
        self.bytes(Channel::Dsmem)
    }

    pub fn dsmem_bytes_for_cluster(&self, cluster: usize) -> u64 {
        self.events
            .iter()
            .filter(|e| e.channel == Channel::Dsmem && e.cluster == cluster)
            .map(|e| e.bytes)
            .sum()
    }

    /// DSMEM bytes per stage label.
    pub fn stage_totals(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for e in self.events.iter().filter(|e| e.channel == Channel::Dsmem) {
            *out.entry(e.stage.clone()).or_insert(0) += e.bytes;
        }
        out
    }

    /// DSMEM stage totals restricted to one cluster.
    pub fn stage_totals_for_cluster(&self, cluster: usize) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for e in self
            .events
            .iter()
            .filter(|e| e.channel == Channel::Dsmem && e.cluster == cluster)
        {
            *out.entry(e.stage.clone()).or_insert(0) += e.bytes;
        }
        out
    }

    /// Distinct `(cluster, invocation)` pairs with DSMEM events, in first-seen order.
    pub fn invocations(&self) -> Vec<(usize, usize)> {
        let mut seen = Vec::new();
        for e in self.events.iter().filter(|e| e.channel == Channel::Dsmem) {
            let key = (e.cluster, e.invocation);
            if !seen.contains(&key) {
                seen.push(key);
            }
        }
        seen
    }

    /// Number of rounds a collective invocation executed (max round + 1), 0 if it logged nothing.
    pub fn rounds_of(&self, cluster: usize, invocation: usize) -> usize {
        self.events
            .iter()
            .filter(|e| e.channel == Channel::Dsmem && e.cluster == cluster && e.invocation == invocation)
            .map(|e| e.round + 1)
            .max()
            .unwrap_or(0)
    }
}

/// A copy of `src_range` from block `src`'s buffer into block `dst`'s buffer at `dst_offset`.
#[derive(Debug, Clone)]
pub struct Transfer {
    pub src: usize,
    pub src_buffer: String,
    pub src_range: Range<usize>,
    pub dst: usize,
    pub dst_buffer: String,
    pub dst_offset: usize,
}

#[derive(Debug, Clone)]
pub struct ClusterState<T> {
    config: ClusterConfig,
    cluster_id: usize,
    blocks: Vec<BlockState<T>>,
    global: GlobalMemory<T>,
    ledger: TrafficLedger,
    invocations: Vec<String>,
}

impl<T: Scalar> ClusterState<T> {
    pub fn new(config: ClusterConfig) -> Result<Self> {
        Self::with_global(config, 0, GlobalMemory::new())
    }

    /// Builds a cluster tagged `cluster_id` in the ledger that takes ownership of an
    /// existing global memory.
    pub fn with_global(config: ClusterConfig, cluster_id: usize, global: GlobalMemory<T>) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.n_blocks)
            .map(|rank| BlockState {
                rank,
                buffers: BTreeMap::new(),
            })
            .collect();
        Ok(Self {
            config,
            cluster_id,
            blocks,
            global,
            ledger: TrafficLedger::new(),
            invocations: Vec::new(),
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn n_blocks(&self) -> usize {
        self.config.n_blocks
    }

    pub fn cluster_id(&self) -> usize {
        self.cluster_id
    }

    pub fn blocks(&self) -> &[BlockState<T>] {
        &self.blocks
    }

    pub fn block(&self, rank: usize) -> Result<&BlockState<T>> {
        self.blocks.get(rank).ok_or(SimError::InvalidRank {
            rank,
            n_blocks: self.config.n_blocks,
        })
    }

    fn block_mut(&mut self, rank: usize) -> Result<&mut BlockState<T>> {
        let n_blocks = self.config.n_blocks;
        self.blocks
            .get_mut(rank)
            .ok_or(SimError::InvalidRank { rank, n_blocks })
    }

    pub fn ledger(&self) -> &TrafficLedger {
        &self.ledger
    }

    pub fn global(&self) -> &GlobalMemory<T> {
        &self.global
    }

    pub fn global_mut(&mut self) -> &mut GlobalMemory<T> {
        &mut self.global
    }

    pub fn into_parts(self) -> (GlobalMemory<T>, TrafficLedger) {
        (self.global, self.ledger)
    }

    pub fn smem_in_use(&self, rank: usize) -> Result<usize> {
        Ok(self.block(rank)?.smem_bytes(self.config.dtype_bytes()))
    }

    /// Allocates a zeroed buffer, enforcing the shared-memory cap.
    pub fn alloc(&mut self, rank: usize, name: &str, shape: &[usize]) -> Result<()> {
        let t = Tensor::zeros(shape).rounded(self.config.precision);
        self.insert_buffer(rank, name, t)
    }

    /// Allocates (or overwrites a same-shaped) buffer with `tensor`, rounded to the
    /// cluster precision.
    pub fn store(&mut self, rank: usize, name: &str, tensor: Tensor<T>) -> Result<()> {
        let t = tensor.rounded(self.config.precision);
        self.insert_buffer(rank, name, t)
    }

    fn insert_buffer(&mut self, rank: usize, name: &str, t: Tensor<T>) -> Result<()> {
        let dtype_bytes = self.config.dtype_bytes();
        let cap = self.config.smem_capacity_bytes;
        let block = self.block_mut(rank)?;
        let existing = block.buffers.get(name);
        if let Some(old) = existing {
            if old.shape() != t.shape() {
                return Err(SimError::BufferShapeChange {
                    rank,
                    name: name.to_string(),
                });
            }
        }
        if let Some(capacity) = cap {
            let in_use = block.smem_bytes(dtype_bytes) - existing.map_or(0, |o| o.len() * dtype_bytes);
            let requested = t.len() * dtype_bytes;
            if in_use + requested > capacity {
                return Err(SimError::SmemOverflow {
                    rank,
                    requested,
                    in_use,
                    capacity,
                });
            }
        }
        block.buffers.insert(name.to_string(), t);
        Ok(())
    }

    pub fn release(&mut self, rank: usize, name: &str) -> Result<Tensor<T>> {
        self.block_mut(rank)?
            .buffers
            .remove(name)
            .ok_or_else(|| SimError::MissingBuffer {
                rank,
                name: name.to_string(),
            })
    }

    pub fn buffer(&self, rank: usize, name: &str) -> Result<&Tensor<T>> {
        self.block(rank)?
            .buffer(name)
            .ok_or_else(|| SimError::MissingBuffer {
                rank,
                name: name.to_string(),
            })
    }

    /// Block-local write into an existing buffer.
    pub fn write(&mut self, rank: usize, name: &str, offset: usize, values: &[T]) -> Result<()> {
        self.buffer_mut(rank, name)?.write(offset, values)
    }

    /// Block-local elementwise update of an existing buffer.
    pub fn update(&mut self, rank: usize, name: &str, f: impl FnMut(usize, T) -> T) -> Result<()> {
        self.buffer_mut(rank, name)?.map_inplace(f);
        Ok(())
    }

    fn buffer_mut(&mut self, rank: usize, name: &str) -> Result<&mut Tensor<T>> {
        self.block_mut(rank)?
            .buffers
            .get_mut(name)
            .ok_or_else(|| SimError::MissingBuffer {
                rank,
                name: name.to_string(),
            })
    }

    /// Opens a new collective invocation labelled `stage` and returns its id.
    pub fn begin_collective(&mut self, stage: &str) -> usize {
        self.invocations.push(stage.to_string());
        self.invocations.len() - 1
    }

    /// Executes one lockstep round of DSMEM transfers for `invocation`.
    ///
    /// All sources are read before any destination is written, which models the
    /// barrier at the end of each round.
    pub fn exchange(&mut self, invocation: usize, round: usize, transfers: &[Transfer]) -> Result<()> {
        let stage = self
            .invocations
            .get(invocation)
            .cloned()
            .ok_or_else(|| SimError::InvalidDims(format!("unknown collective invocation {invocation}")))?;
        let mut payloads = Vec::with_capacity(transfers.len());
        for t in transfers {
            let src = self.buffer(t.src, &t.src_buffer)?;
            if t.src_range.end > src.len() || t.src_range.start > t.src_range.end {
                return Err(SimError::OutOfBounds {
                    start: t.src_range.start,
                    end: t.src_range.end,
                    len: src.len(),
                });
            }
            payloads.push(src.as_slice()[t.src_range.clone()].to_vec());
        }
        let dtype_bytes = self.config.dtype_bytes() as u64;
        for (t, payload) in transfers.iter().zip(payloads) {
            if payload.is_empty() {
                continue;
            }
            self.buffer_mut(t.dst, &t.dst_buffer)?.write(t.dst_offset, &payload)?;
            self.ledger.push(TrafficEvent {
                cluster: self.cluster_id,
                invocation,
                stage: stage.clone(),
                round,
                src: t.src,
                dst: t.dst,
                bytes: payload.len() as u64 * dtype_bytes,
                channel: Channel::Dsmem,
            });
        }
        Ok(())
    }

    /// Atomically accumulates into a global tensor on behalf of block `rank`.
    pub fn atomic_accumulate(&mut self, rank: usize, name: &str, offset: usize, values: &[T]) -> Result<()> {
        self.block(rank)?;
        self.global.atomic_accumulate(name, offset, values)?;
        if !values.is_empty() {
            self.ledger.push(TrafficEvent {
                cluster: self.cluster_id,
                invocation: usize::MAX,
                stage: "atomic_add".to_string(),
                round: 0,
                src: rank,
                dst: rank,
                bytes: (values.len() * self.config.dtype_bytes()) as u64,
                channel: Channel::Global,
            });
        }
        Ok(())
    }
}
