use crate::collectives::{canonicalize_gathered, cluster_gather, cluster_reduce, ReduceOp};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::scenario::{new_token_owner, seq_partition, DecodeScenario};
use crate::sim::{ClusterState, GlobalMemory, TrafficLedger};
use crate::tensor::Tensor;

use super::{
    assemble_columns, attention_scale, normalize_partial, partial_attention_with_new_token, partial_flash_attention,
    reduce_softmax_stats, stage_for_gather, DecodeOptions, DecodeResult, HeadStats,
};

pub fn run_fused_mha_decode<T: Scalar>(scenario: &DecodeScenario<T>) -> Result<DecodeResult<T>> {
    run_fused_mha_decode_with(scenario, DecodeOptions::default())
}

/// Split-token MHA decode: blocks split the head dimension for the QKV
/// projection, the KV sequence for attention, and the hidden dimension for the
/// output projection.
pub fn run_fused_mha_decode_with<T: Scalar>(scenario: &DecodeScenario<T>, opts: DecodeOptions) -> Result<DecodeResult<T>> {
    let cfg = scenario.cluster;
    cfg.validate()?;
    scenario.validate_shapes()?;
    let dims = scenario.dims;
    let n = cfg.n_blocks;
    dims.validate_mha(n)?;
    let w = scenario.mha()?;

    let (bsz, d, hd) = (dims.batch, dims.hidden, dims.head_dim);
    let h = hd / n;
    let d_slice = d / n;
    let segment = bsz * 3 * h;
    let ranges = seq_partition(dims.seq_len, n);
    let owner = new_token_owner(n);
    let scale = attention_scale::<T>(hd);

    let mut global = GlobalMemory::new();
    global.insert("output", Tensor::zeros(&[bsz, d]).rounded(cfg.precision));
    let mut ledger = TrafficLedger::new();
    let mut stats = Vec::with_capacity(dims.n_heads);

    for head in 0..dims.n_heads {
        let mut cl = ClusterState::with_global(cfg, head, global)?;
        let w_qkv = &w.w_qkv[head];

        for b in 0..n {
            let cols = b * h..(b + 1) * h;
            let w_slice = Tensor::concat_cols(&[
                &w_qkv.slice_cols(cols.clone())?,
                &w_qkv.slice_cols(hd + cols.start..hd + cols.end)?,
                &w_qkv.slice_cols(2 * hd + cols.start..2 * hd + cols.end)?,
            ])?;
            let local = scenario.hidden.matmul(&w_slice)?;
            stage_for_gather(&mut cl, b, "qkv", &local)?;
        }
        cluster_gather(&mut cl, "qkv", segment, "qkv_gather")?;

        let mut partials = Vec::with_capacity(n);
        for (b, range) in ranges.iter().enumerate() {
            let canon = canonicalize_gathered(cl.buffer(b, "qkv")?, b, n, segment);
            let q = assemble_columns(&canon, n, bsz, 3 * h, 0, h)?;
            let k_seg = w.k_cache[head].slice_rows(range.clone())?;
            let v_seg = w.v_cache[head].slice_rows(range.clone())?;
            let partial = if b == owner {
                let k_new = assemble_columns(&canon, n, bsz, 3 * h, h, h)?;
                let v_new = assemble_columns(&canon, n, bsz, 3 * h, 2 * h, h)?;
                partial_attention_with_new_token(&q, &k_seg, &v_seg, &k_new, &v_new, scale)?
            } else {
                partial_flash_attention(&q, &k_seg, &v_seg, scale)?
            };
            cl.release(b, "qkv")?;
            partials.push(partial);
        }

        let global_stats = reduce_softmax_stats(&mut cl, &partials, opts.stats)?;
        for (b, (p, (m_star, l_star))) in partials.iter().zip(&global_stats).enumerate() {
            cl.store(b, "attn", normalize_partial(p, m_star, l_star))?;
        }
        cluster_reduce(&mut cl, "attn", ReduceOp::Sum, "attn_reduce")?;

        for b in 0..n {
            let attn = cl.release(b, "attn")?;
            let o = attn.matmul(&w.w_o[head].slice_cols(b * d_slice..(b + 1) * d_slice)?)?;
            for r in 0..bsz {
                cl.atomic_accumulate(b, "output", r * d + b * d_slice, o.row(r))?;
            }
        }

        let (m_star, l_star) = global_stats.into_iter().next().expect("cluster has a block");
        stats.push(HeadStats {
            head,
            max: m_star,
            sum: l_star,
        });
        let (g, l) = cl.into_parts();
        global = g;
        ledger.append(l);
    }

    finish(global, ledger, stats)
}

pub(super) fn finish<T: Scalar>(
    mut global: GlobalMemory<T>,
    ledger: TrafficLedger,
    stats: Vec<HeadStats<T>>,
) -> Result<DecodeResult<T>> {
    let atomic_adds = global.atomic_add_count();
    let output = global
        .remove("output")
        .ok_or_else(|| crate::error::SimError::MissingTensor("output".into()))?;
    Ok(DecodeResult {
        output,
        stage_traffic: ledger.stage_totals(),
        ledger,
        stats,
        atomic_adds,
    })
}
