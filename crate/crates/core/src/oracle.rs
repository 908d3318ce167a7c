//! Dense, partition-free reference computations.
//!
//! Every batch row attends to the shared KV cache followed by its own new
//! token. Scores are scaled by `1/sqrt(H)` with `H` the per-head query/key
//! dimension, for MHA and for both MLA forms.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::scalar::Scalar;
use crate::scenario::DecodeScenario;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Mha,
    MlaOriginal,
    MlaAbsorbed,
}

/// Row-wise numerically stable softmax of a 2-D tensor.
pub fn softmax_rows<T: Scalar>(scores: &Tensor<T>) -> Tensor<T> {
    let c = scores.cols();
    let mut out = Vec::with_capacity(scores.len());
    for r in 0..scores.rows() {
        let row = scores.row(r);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&x| (x - m).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    Tensor::matrix(scores.rows(), c, out).expect("softmax preserves shape")
}

/// `softmax(q K^T * scale) V` for a single query row.
fn attend_row<T: Scalar>(q: &Tensor<T>, keys: &Tensor<T>, values: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    let scores = q.matmul(&keys.transpose())?.scale(scale);
    softmax_rows(&scores).matmul(values)
}

fn head_scale<T: Scalar>(head_dim: usize) -> T {
    T::one() / T::of(head_dim as f64).sqrt()
}

/// Multi-head attention decode followed by the output projection, summed over heads.
pub fn dense_mha_decode<T: Scalar>(scenario: &DecodeScenario<T>) -> Result<Tensor<T>> {
    scenario.validate_shapes()?;
    let w = scenario.mha()?;
    let dims = scenario.dims;
    let h = dims.head_dim;
    let scale = head_scale::<T>(h);
    let mut out = Tensor::zeros(&[dims.batch, dims.hidden]);
    for head in 0..dims.n_heads {
        let qkv = scenario.hidden.matmul(&w.w_qkv[head])?;
        let q = qkv.slice_cols(0..h)?;
        let k_new = qkv.slice_cols(h..2 * h)?;
        let v_new = qkv.slice_cols(2 * h..3 * h)?;
        let mut z_rows = Vec::with_capacity(dims.batch);
        for r in 0..dims.batch {
            let keys = Tensor::concat_rows(&[&w.k_cache[head], &k_new.slice_rows(r..r + 1)?])?;
            let values = Tensor::concat_rows(&[&w.v_cache[head], &v_new.slice_rows(r..r + 1)?])?;
            z_rows.push(attend_row(&q.slice_rows(r..r + 1)?, &keys, &values, scale)?);
        }
        let z = Tensor::concat_rows(&z_rows.iter().collect::<Vec<_>>())?;
        out = out.add(&z.matmul(&w.w_o[head])?)?;
    }
    Ok(out)
}

/// Index-loop MHA decode accumulated in `f64`. Shares no code with [`dense_mha_decode`].
pub fn dense_mha_decode_naive<T: Scalar>(scenario: &DecodeScenario<T>) -> Result<Tensor<T>> {
    scenario.validate_shapes()?;
    let w = scenario.mha()?;
    let dm = scenario.dims;
    let (bsz, d, h, s) = (dm.batch, dm.hidden, dm.head_dim, dm.seq_len);
    let x = |r: usize, c: usize| scenario.hidden.as_slice()[r * d + c].as_f64();
    let mut out = vec![0.0f64; bsz * d];
    for head in 0..dm.n_heads {
        let wqkv = w.w_qkv[head].as_slice();
        let wo = w.w_o[head].as_slice();
        let kc = w.k_cache[head].as_slice();
        let vc = w.v_cache[head].as_slice();
        for r in 0..bsz {
            let mut proj = vec![0.0f64; 3 * h];
            for (j, p) in proj.iter_mut().enumerate() {
                for k in 0..d {
                    *p += x(r, k) * wqkv[k * 3 * h + j].as_f64();
                }
            }
            let (q, rest) = proj.split_at(h);
            let (k_new, v_new) = rest.split_at(h);
            let key = |t: usize, c: usize| if t < s { kc[t * h + c].as_f64() } else { k_new[c] };
            let val = |t: usize, c: usize| if t < s { vc[t * h + c].as_f64() } else { v_new[c] };
            let mut scores = vec![0.0f64; s + 1];
            for (t, sc) in scores.iter_mut().enumerate() {
                for c in 0..h {
                    *sc += q[c] * key(t, c);
                }
                *sc /= (h as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = scores.iter().map(|v| (v - m).exp()).sum();
            let mut z = vec![0.0f64; h];
            for (t, sc) in scores.iter().enumerate() {
                let p = (sc - m).exp() / denom;
                for (c, zc) in z.iter_mut().enumerate() {
                    *zc += p * val(t, c);
                }
            }
            for c in 0..d {
                for (k, zk) in z.iter().enumerate() {
                    out[r * d + c] += zk * wo[k * d + c].as_f64();
                }
            }
        }
    }
    Tensor::matrix(bsz, d, out.into_iter().map(T::of).collect())
}

/// Folds the query projection into the latent space: `W_Q x W_Up`.
pub fn absorb_weights<T: Scalar>(w_q: &Tensor<T>, w_up: &Tensor<T>) -> Result<Tensor<T>> {
    if w_q.cols() != w_up.rows() {
        return Err(SimError::ShapeMismatch(format!(
            "absorb_weights: W_Q is {:?}, W_Up is {:?}",
            w_q.shape(),
            w_up.shape()
        )));
    }
    w_q.matmul(w_up)
}

/// Latent attention decode.
///
/// `MlaOriginal` materialises per-head keys `C W_Up^T` and values `C W_Down`
/// from the latent cache `C`. `MlaAbsorbed` attends directly in latent space
/// with the absorbed query, uses the latent key as the value, and projects the
/// result through `W_Down`.
pub fn dense_mla_decode<T: Scalar>(scenario: &DecodeScenario<T>, variant: AttentionVariant) -> Result<Tensor<T>> {
    scenario.validate_shapes()?;
    let w = scenario.mla()?;
    let dims = scenario.dims;
    let scale = head_scale::<T>(dims.head_dim);
    let latent_new = scenario.hidden.matmul(&w.w_kv)?;
    let mut out = Tensor::zeros(&[dims.batch, dims.hidden]);
    for head in 0..dims.n_heads {
        let absorbed = match variant {
            AttentionVariant::MlaAbsorbed => Some(absorb_weights(&w.w_q[head], &w.w_up[head])?),
            AttentionVariant::MlaOriginal => None,
            AttentionVariant::Mha => {
                return Err(SimError::InvalidDims("dense_mla_decode needs an MLA variant".into()));
            }
        };
        let mut z_rows = Vec::with_capacity(dims.batch);
        for r in 0..dims.batch {
            let x = scenario.hidden.slice_rows(r..r + 1)?;
            let latent = Tensor::concat_rows(&[&w.kv_cache, &latent_new.slice_rows(r..r + 1)?])?;
            let z = match &absorbed {
                Some(w_abs) => {
                    let q = x.matmul(w_abs)?;
                    attend_row(&q, &latent, &latent, scale)?.matmul(&w.w_down[head])?
                }
                None => {
                    let q = x.matmul(&w.w_q[head])?;
                    let keys = latent.matmul(&w.w_up[head].transpose())?;
                    let values = latent.matmul(&w.w_down[head])?;
                    attend_row(&q, &keys, &values, scale)?
                }
            };
            z_rows.push(z);
        }
        let z = Tensor::concat_rows(&z_rows.iter().collect::<Vec<_>>())?;
        out = out.add(&z.matmul(&w.w_o[head])?)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Tanh approximation of GELU.
    #[default]
    Gelu,
    Silu,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Gelu => {
                let c = T::of((2.0 / std::f64::consts::PI).sqrt());
                T::of(0.5) * x * (T::one() + (c * (x + T::of(0.044715) * x * x * x)).tanh())
            }
            Activation::Silu => x / (T::one() + (-x).exp()),
            Activation::Relu => x.max(T::zero()),
            Activation::Identity => x,
        }
    }
}

/// Gated feed-forward block `(act(Z W1) * (Z W2)) W3` for row-major `Z: B x D`.
pub fn ffn_reference<T: Scalar>(
    z: &Tensor<T>,
    w1: &Tensor<T>,
    w2: &Tensor<T>,
    w3: &Tensor<T>,
    activation: Activation,
) -> Result<Tensor<T>> {
    if w1.shape() != w2.shape() || w3.rows() != w1.cols() || z.cols() != w1.rows() {
        return Err(SimError::ShapeMismatch(format!(
            "ffn: Z {:?}, W1 {:?}, W2 {:?}, W3 {:?}",
            z.shape(),
            w1.shape(),
            w2.shape(),
            w3.shape()
        )));
    }
    let mut gate = z.matmul(w1)?;
    let up = z.matmul(w2)?;
    gate.map_inplace(|i, g| activation.apply(g) * up.as_slice()[i]);
    gate.matmul(w3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{AttentionWeights, MhaWeights, ModelDims};
    use crate::sim::ClusterConfig;

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::<f64>::from_fn(&[3, 5], |i| (i as f64 * 1.7).sin() * 4.0);
        let p = softmax_rows(&t);
        for r in 0..3 {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_cache_attends_only_the_new_token() {
        let dims = ModelDims::mha(1, 4, 1, 2, 0);
        let sc = DecodeScenario::<f64>::random_mha(dims, ClusterConfig::new(1), 9).unwrap();
        let w = sc.mha().unwrap();
        let v_new = sc.hidden.matmul(&w.w_qkv[0]).unwrap().slice_cols(4..6).unwrap();
        let want = v_new.matmul(&w.w_o[0]).unwrap();
        assert!(dense_mha_decode(&sc).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn saturated_softmax_selects_the_new_token() {
        // D = H = 2, identity projections except scale: q = k_new = 40 * e0,
        // cached keys are along e1, so the new token wins with margin 40^2/sqrt(2).
        let big = 40.0;
        let mut w_qkv = Tensor::<f64>::zeros(&[2, 6]);
        w_qkv.write(0, &[big, 0.0, big, 0.0, 1.0, 0.0]).unwrap();
        w_qkv.write(6, &[0.0, big, 0.0, big, 0.0, 1.0]).unwrap();
        let k_cache = Tensor::matrix(3, 2, vec![0.0, 1.0, 0.0, -1.0, 0.0, 0.5]).unwrap();
        let v_cache = Tensor::matrix(3, 2, vec![9.0, 9.0, -9.0, 9.0, 3.0, 3.0]).unwrap();
        let sc = DecodeScenario {
            dims: ModelDims::mha(1, 2, 1, 2, 3),
            cluster: ClusterConfig::new(1),
            weights: AttentionWeights::Mha(MhaWeights {
                w_qkv: vec![w_qkv],
                w_o: vec![Tensor::identity(2)],
                k_cache: vec![k_cache],
                v_cache: vec![v_cache],
            }),
            hidden: Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(),
            seed: 0,
        };
        let out = dense_mha_decode(&sc).unwrap();
        assert!((out.get(0, 0) - 1.0).abs() < 1e-9);
        assert!(out.get(0, 1).abs() < 1e-9);
    }

    #[test]
    fn naive_and_tensor_mha_agree() {
        let dims = ModelDims::mha(2, 8, 2, 4, 5);
        let sc = DecodeScenario::<f32>::random_mha(dims, ClusterConfig::new(1), 11).unwrap();
        let a = dense_mha_decode(&sc).unwrap();
        let b = dense_mha_decode_naive(&sc).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-6, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn absorb_weights_small_cases() {
        let a = Tensor::<f32>::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let b = Tensor::<f32>::matrix(2, 2, vec![3.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(absorb_weights(&a, &b).unwrap().as_slice(), &[3.0, 1.0, 2.0, 0.0]);
        assert_eq!(absorb_weights(&b, &Tensor::identity(2)).unwrap(), b);
        assert!(absorb_weights(&a, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn mla_forms_agree() {
        let dims = ModelDims::mla(2, 16, 2, 4, 5, 8);
        let sc = DecodeScenario::<f64>::random_mla(dims, ClusterConfig::new(1), 5).unwrap();
        let a = dense_mla_decode(&sc, AttentionVariant::MlaOriginal).unwrap();
        let b = dense_mla_decode(&sc, AttentionVariant::MlaAbsorbed).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert!(dense_mla_decode(&sc, AttentionVariant::Mha).is_err());
    }

    #[test]
    fn ffn_zero_gate_and_scalar_square() {
        let z = Tensor::<f64>::matrix(1, 2, vec![0.3, -0.7]).unwrap();
        let zero = Tensor::zeros(&[2, 3]);
        let w = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1);
        let w3 = Tensor::from_fn(&[3, 2], |i| i as f64);
        let out = ffn_reference(&z, &zero, &w, &w3, Activation::Silu).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));

        let one = Tensor::<f64>::identity(1);
        let z = Tensor::matrix(1, 1, vec![1.5]).unwrap();
        let out = ffn_reference(&z, &one, &one, &one, Activation::Identity).unwrap();
        assert_eq!(out.as_slice(), &[2.25]);
        assert!(ffn_reference(&z, &one, &zero, &one, Activation::Gelu).is_err());
    }
}
