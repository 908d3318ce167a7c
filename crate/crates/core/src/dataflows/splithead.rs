use crate::collectives::{cluster_reduce, ReduceOp};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::scenario::DecodeScenario;
use crate::sim::{ClusterState, GlobalMemory, TrafficLedger};
use crate::tensor::Tensor;

use super::mha::finish;
use super::{attention_scale, DecodeResult, HeadStats};

/// Head-split MHA decode.
///
/// Every block owns an `h = H/N` slice of the head dimension throughout. The
/// partial score matrix `(S+1) x B` is summed across blocks, every block then
/// computes the same softmax, projects its value slice through its rows of
/// `W_O`, and the full `B x D` partial outputs are summed before each block
/// atomically writes its `D/N` column slice.
pub fn run_splithead_decode<T: Scalar>(scenario: &DecodeScenario<T>) -> Result<DecodeResult<T>> {
    let cfg = scenario.cluster;
    cfg.validate()?;
    scenario.validate_shapes()?;
    let dims = scenario.dims;
    let n = cfg.n_blocks;
    dims.validate_mha(n)?;
    let w = scenario.mha()?;

    let (bsz, d, hd, s) = (dims.batch, dims.hidden, dims.head_dim, dims.seq_len);
    let keys = dims.attended_len();
    let (h, d_slice) = (hd / n, d / n);
    let scale = attention_scale::<T>(hd);

    let mut global = GlobalMemory::new();
    global.insert("output", Tensor::zeros(&[bsz, d]).rounded(cfg.precision));
    let mut ledger = TrafficLedger::new();
    let mut stats = Vec::with_capacity(dims.n_heads);

    for head in 0..dims.n_heads {
        let mut cl = ClusterState::with_global(cfg, head, global)?;
        let w_qkv = &w.w_qkv[head];

        // Q/K/V slices live in registers; only the score matrix goes to shared memory.
        let mut slices = Vec::with_capacity(n);
        for b in 0..n {
            let cols = b * h..(b + 1) * h;
            let q = scenario.hidden.matmul(&w_qkv.slice_cols(cols.clone())?)?;
            let k = scenario.hidden.matmul(&w_qkv.slice_cols(hd + cols.start..hd + cols.end)?)?;
            let v = scenario.hidden.matmul(&w_qkv.slice_cols(2 * hd + cols.start..2 * hd + cols.end)?)?;
            let k_cache = w.k_cache[head].slice_cols(cols.clone())?;
            let v_cache = w.v_cache[head].slice_cols(cols)?;

            let mut scores = Tensor::zeros(&[keys, bsz]);
            scores.map_inplace(|i, _| {
                let (t, r) = (i / bsz, i % bsz);
                let key = if t < s { k_cache.row(t) } else { k.row(r) };
                q.row(r).iter().zip(key).map(|(&a, &b)| a * b).sum()
            });
            cl.store(b, "scores", scores)?;
            slices.push((v, v_cache));
        }
        cluster_reduce(&mut cl, "scores", ReduceOp::Sum, "score_reduce")?;

        let mut head_stats = None;
        for (b, (v, v_cache)) in slices.iter().enumerate() {
            let scores = cl.release(b, "scores")?;
            let mut attn = Tensor::zeros(&[bsz, h]);
            let (mut maxes, mut sums) = (Vec::with_capacity(bsz), Vec::with_capacity(bsz));
            for r in 0..bsz {
                let col: Vec<T> = (0..keys).map(|t| scores.get(t, r) * scale).collect();
                let m = col.iter().copied().fold(T::neg_infinity(), T::max);
                let exps: Vec<T> = col.iter().map(|&x| (x - m).exp()).collect();
                let total: T = exps.iter().copied().sum();
                let mut row = vec![T::zero(); h];
                for (t, e) in exps.iter().enumerate() {
                    let p = *e / total;
                    let value = if t < s { v_cache.row(t) } else { v.row(r) };
                    for (o, &x) in row.iter_mut().zip(value) {
                        *o += p * x;
                    }
                }
                attn.write(r * h, &row)?;
                maxes.push(m);
                sums.push(total);
            }
            if b == 0 {
                head_stats = Some((maxes, sums));
            }
            let partial_out = attn.matmul(&w.w_o[head].slice_rows(b * h..(b + 1) * h)?)?;
            cl.store(b, "out", partial_out)?;
        }
        cluster_reduce(&mut cl, "out", ReduceOp::Sum, "out_reduce")?;

        for b in 0..n {
            let o = cl.release(b, "out")?;
            for r in 0..bsz {
                cl.atomic_accumulate(b, "output", r * d + b * d_slice, &o.row(r)[b * d_slice..(b + 1) * d_slice])?;
            }
        }

        let (max, sum) = head_stats.expect("cluster has a block");
        stats.push(HeadStats { head, max, sum });
        let (g, l) = cl.into_parts();
        global = g;
        ledger.append(l);
    }

    finish(global, ledger, stats)
}
