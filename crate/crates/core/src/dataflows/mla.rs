use crate::collectives::{canonicalize_gathered, cluster_gather, cluster_reduce, ReduceOp};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::scenario::{new_token_owner, seq_partition, DecodeScenario};
use crate::sim::{ClusterState, GlobalMemory, TrafficLedger};
use crate::tensor::Tensor;

use super::mha::finish;
use super::{
    assemble_columns, attention_scale, normalize_partial, partial_attention_with_new_token, partial_flash_attention,
    reduce_softmax_stats, stage_for_gather, DecodeOptions, DecodeResult, HeadStats,
};

pub fn run_fused_mla_decode<T: Scalar>(scenario: &DecodeScenario<T>) -> Result<DecodeResult<T>> {
    run_fused_mla_decode_with(scenario, DecodeOptions::default())
}

/// Fused latent-attention decode with absorbed query weights.
///
/// Per cluster: head-dim split Q projection and latent-split KV projection,
/// both gathered; latent-split up-projection of Q, gathered; sequence-split
/// attention over the latent cache with the key reused as value; statistics
/// reduction; attention-output reduce; latent-split down-projection, reduced;
/// output projection split over the hidden dimension.
pub fn run_fused_mla_decode_with<T: Scalar>(scenario: &DecodeScenario<T>, opts: DecodeOptions) -> Result<DecodeResult<T>> {
    let cfg = scenario.cluster;
    cfg.validate()?;
    scenario.validate_shapes()?;
    let dims = scenario.dims;
    let n = cfg.n_blocks;
    dims.validate_mla(n)?;
    let w = scenario.mla()?;

    let (bsz, d, hd) = (dims.batch, dims.hidden, dims.head_dim);
    let l = dims.latent()?;
    let (h, l_slice, d_slice) = (hd / n, l / n, d / n);
    let ranges = seq_partition(dims.seq_len, n);
    let owner = new_token_owner(n);
    let scale = attention_scale::<T>(hd);

    let mut global = GlobalMemory::new();
    global.insert("output", Tensor::zeros(&[bsz, d]).rounded(cfg.precision));
    let mut ledger = TrafficLedger::new();
    let mut stats = Vec::with_capacity(dims.n_heads);

    for head in 0..dims.n_heads {
        let mut cl = ClusterState::with_global(cfg, head, global)?;

        for b in 0..n {
            let q = scenario.hidden.matmul(&w.w_q[head].slice_cols(b * h..(b + 1) * h)?)?;
            stage_for_gather(&mut cl, b, "q", &q)?;
            let kv = scenario.hidden.matmul(&w.w_kv.slice_cols(b * l_slice..(b + 1) * l_slice)?)?;
            stage_for_gather(&mut cl, b, "kv", &kv)?;
        }
        cluster_gather(&mut cl, "q", bsz * h, "q_gather")?;
        cluster_gather(&mut cl, "kv", bsz * l_slice, "kv_gather")?;

        for b in 0..n {
            let canon = canonicalize_gathered(&cl.release(b, "q")?, b, n, bsz * h);
            let q_full = assemble_columns(&canon, n, bsz, h, 0, h)?;
            let q_up = q_full.matmul(&w.w_up[head].slice_cols(b * l_slice..(b + 1) * l_slice)?)?;
            stage_for_gather(&mut cl, b, "q_up", &q_up)?;
        }
        cluster_gather(&mut cl, "q_up", bsz * l_slice, "q_up_gather")?;

        let mut partials = Vec::with_capacity(n);
        for (b, range) in ranges.iter().enumerate() {
            let q_canon = canonicalize_gathered(&cl.release(b, "q_up")?, b, n, bsz * l_slice);
            let q_latent = assemble_columns(&q_canon, n, bsz, l_slice, 0, l_slice)?;
            let kv_canon = canonicalize_gathered(&cl.release(b, "kv")?, b, n, bsz * l_slice);
            let kv_new = assemble_columns(&kv_canon, n, bsz, l_slice, 0, l_slice)?;
            let cache_seg = w.kv_cache.slice_rows(range.clone())?;
            let partial = if b == owner {
                partial_attention_with_new_token(&q_latent, &cache_seg, &cache_seg, &kv_new, &kv_new, scale)?
            } else {
                partial_flash_attention(&q_latent, &cache_seg, &cache_seg, scale)?
            };
            partials.push(partial);
        }

        let global_stats = reduce_softmax_stats(&mut cl, &partials, opts.stats)?;
        for (b, (p, (m_star, l_star))) in partials.iter().zip(&global_stats).enumerate() {
            cl.store(b, "attn", normalize_partial(p, m_star, l_star))?;
        }
        cluster_reduce(&mut cl, "attn", ReduceOp::Sum, "attn_reduce")?;

        for b in 0..n {
            let lat = b * l_slice..(b + 1) * l_slice;
            let attn = cl.release(b, "attn")?;
            let down = attn
                .slice_cols(lat.clone())?
                .matmul(&w.w_down[head].slice_rows(lat)?)?;
            cl.store(b, "down", down)?;
        }
        cluster_reduce(&mut cl, "down", ReduceOp::Sum, "down_reduce")?;

        for b in 0..n {
            let z = cl.release(b, "down")?;
            let o = z.matmul(&w.w_o[head].slice_cols(b * d_slice..(b + 1) * d_slice)?)?;
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
        let (g, lg) = cl.into_parts();
        global = g;
        ledger.append(lg);
    }

    finish(global, ledger, stats)
}
