//! Decode scenarios: model dimensions, weights, KV caches and new-token hidden states.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::scalar::Scalar;
use crate::sim::ClusterConfig;
use crate::tensor::{Precision, Tensor};

/// Model dimensions for one decode step.
///
/// `head_dim` is the per-head query/key dimension (`H`). For MLA it is the
/// per-head dimension produced by the query and down projections, and
/// `kv_lora_rank` is the latent width `l` shared by all heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub batch: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
    pub kv_lora_rank: Option<usize>,
}

impl ModelDims {
    pub fn mha(batch: usize, hidden: usize, n_heads: usize, head_dim: usize, seq_len: usize) -> Self {
        Self {
            batch,
            hidden,
            n_heads,
            head_dim,
            seq_len,
            kv_lora_rank: None,
        }
    }

    pub fn mla(batch: usize, hidden: usize, n_heads: usize, head_dim: usize, seq_len: usize, kv_lora_rank: usize) -> Self {
        Self {
            kv_lora_rank: Some(kv_lora_rank),
            ..Self::mha(batch, hidden, n_heads, head_dim, seq_len)
        }
    }

    pub fn with_seq_len(mut self, seq_len: usize) -> Self {
        self.seq_len = seq_len;
        self
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    /// Keys each query attends to: the cached sequence plus its own new token.
    pub fn attended_len(&self) -> usize {
        self.seq_len + 1
    }

    pub fn latent(&self) -> Result<usize> {
        self.kv_lora_rank
            .ok_or_else(|| SimError::InvalidDims("kv_lora_rank is required for MLA".into()))
    }

    fn check_positive(&self) -> Result<()> {
        if self.batch == 0 || self.hidden == 0 || self.n_heads == 0 || self.head_dim == 0 {
            return Err(SimError::InvalidDims(format!("dimensions must be positive: {self:?}")));
        }
        if self.kv_lora_rank == Some(0) {
            return Err(SimError::InvalidDims("kv_lora_rank must be positive".into()));
        }
        Ok(())
    }

    /// Divisibility required to split the head and output dimensions over `n` blocks.
    pub fn validate_mha(&self, n: usize) -> Result<()> {
        self.check_positive()?;
        if !self.head_dim.is_multiple_of(n) {
            return Err(SimError::InvalidDims(format!(
                "head dimension {} is not divisible by cluster size {n}",
                self.head_dim
            )));
        }
        if !self.hidden.is_multiple_of(n) {
            return Err(SimError::InvalidDims(format!(
                "hidden dimension {} is not divisible by cluster size {n}",
                self.hidden
            )));
        }
        Ok(())
    }

    pub fn validate_mla(&self, n: usize) -> Result<()> {
        self.validate_mha(n)?;
        let l = self.latent()?;
        if l % n != 0 {
            return Err(SimError::InvalidDims(format!(
                "kv_lora_rank {l} is not divisible by cluster size {n}"
            )));
        }
        Ok(())
    }
}

/// Contiguous KV-cache segments: `ceil(S / N)` rows each, the last possibly short
/// or empty.
pub fn seq_partition(seq_len: usize, n: usize) -> Vec<std::ops::Range<usize>> {
    let s = seq_len.div_ceil(n);
    (0..n)
        .map(|b| {
            let start = (b * s).min(seq_len);
            let end = ((b + 1) * s).min(seq_len);
            start..end
        })
        .collect()
}

/// Rank that appends the new token's key/value to its cache segment.
pub fn new_token_owner(n: usize) -> usize {
    n - 1
}

/// Multi-head attention weights; every vector is indexed by head.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaWeights<T> {
    /// `D x 3H`, columns ordered `[Q | K | V]`.
    pub w_qkv: Vec<Tensor<T>>,
    /// `H x D`.
    pub w_o: Vec<Tensor<T>>,
    /// `S x H`.
    pub k_cache: Vec<Tensor<T>>,
    /// `S x H`.
    pub v_cache: Vec<Tensor<T>>,
}

/// Latent attention weights. The latent cache and KV down-projection are shared
/// by all heads; `V` is the latent key itself.
#[derive(Debug, Clone, PartialEq)]
pub struct MlaWeights<T> {
    /// `D x H` per head.
    pub w_q: Vec<Tensor<T>>,
    /// `D x l`.
    pub w_kv: Tensor<T>,
    /// `H x l` per head: maps a head's query into the latent space.
    pub w_up: Vec<Tensor<T>>,
    /// `l x H` per head: maps latent attention output back to head space.
    pub w_down: Vec<Tensor<T>>,
    /// `H x D` per head.
    pub w_o: Vec<Tensor<T>>,
    /// `S x l`.
    pub kv_cache: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionWeights<T> {
    Mha(MhaWeights<T>),
    Mla(MlaWeights<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeScenario<T> {
    pub dims: ModelDims,
    pub cluster: ClusterConfig,
    pub weights: AttentionWeights<T>,
    /// `B x D` hidden states of the new tokens, one per batch row.
    pub hidden: Tensor<T>,
    pub seed: u64,
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64, precision: Precision) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound))).rounded(precision)
}

impl<T: Scalar> DecodeScenario<T> {
    /// Random MHA scenario. Weights are scaled by `1/sqrt(fan_in)`; inputs are
    /// rounded to the cluster precision so oracle and simulation see identical values.
    pub fn random_mha(dims: ModelDims, cluster: ClusterConfig, seed: u64) -> Result<Self> {
        dims.check_positive()?;
        let p = cluster.precision;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, s) = (dims.hidden, dims.head_dim, dims.seq_len);
        let hidden = uniform(&mut rng, &[dims.batch, d], 1.0, p);
        let mut w = MhaWeights {
            w_qkv: Vec::new(),
            w_o: Vec::new(),
            k_cache: Vec::new(),
            v_cache: Vec::new(),
        };
        for _ in 0..dims.n_heads {
            w.w_qkv.push(uniform(&mut rng, &[d, 3 * h], 1.0 / (d as f64).sqrt(), p));
            w.w_o.push(uniform(&mut rng, &[h, d], 1.0 / (h as f64).sqrt(), p));
            w.k_cache.push(uniform(&mut rng, &[s, h], 1.0, p));
            w.v_cache.push(uniform(&mut rng, &[s, h], 1.0, p));
        }
        Ok(Self {
            dims,
            cluster,
            weights: AttentionWeights::Mha(w),
            hidden,
            seed,
        })
    }

    pub fn random_mla(dims: ModelDims, cluster: ClusterConfig, seed: u64) -> Result<Self> {
        dims.check_positive()?;
        let l = dims.latent()?;
        let p = cluster.precision;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, s) = (dims.hidden, dims.head_dim, dims.seq_len);
        let hidden = uniform(&mut rng, &[dims.batch, d], 1.0, p);
        let w_kv = uniform(&mut rng, &[d, l], 1.0 / (d as f64).sqrt(), p);
        let kv_cache = uniform(&mut rng, &[s, l], 1.0, p);
        let mut w = MlaWeights {
            w_q: Vec::new(),
            w_kv,
            w_up: Vec::new(),
            w_down: Vec::new(),
            w_o: Vec::new(),
            kv_cache,
        };
        for _ in 0..dims.n_heads {
            w.w_q.push(uniform(&mut rng, &[d, h], 1.0 / (d as f64).sqrt(), p));
            w.w_up.push(uniform(&mut rng, &[h, l], 1.0 / (h as f64).sqrt(), p));
            w.w_down.push(uniform(&mut rng, &[l, h], 1.0 / (l as f64).sqrt(), p));
            w.w_o.push(uniform(&mut rng, &[h, d], 1.0 / (h as f64).sqrt(), p));
        }
        Ok(Self {
            dims,
            cluster,
            weights: AttentionWeights::Mla(w),
            hidden,
            seed,
        })
    }

    pub fn mha(&self) -> Result<&MhaWeights<T>> {
        match &self.weights {
            AttentionWeights::Mha(w) => Ok(w),
            AttentionWeights::Mla(_) => Err(SimError::InvalidDims("expected an MHA scenario".into())),
        }
    }

    pub fn mla(&self) -> Result<&MlaWeights<T>> {
        match &self.weights {
            AttentionWeights::Mla(w) => Ok(w),
            AttentionWeights::Mha(_) => Err(SimError::InvalidDims("expected an MLA scenario".into())),
        }
    }

    /// Same scenario on a different cluster size.
    pub fn with_cluster(&self, cluster: ClusterConfig) -> Self {
        Self {
            cluster,
            ..self.clone()
        }
    }

    /// Checks every tensor shape against `dims`.
    pub fn validate_shapes(&self) -> Result<()> {
        let dm = &self.dims;
        let expect = |t: &Tensor<T>, shape: [usize; 2], what: &str| -> Result<()> {
            if t.shape() != shape {
                return Err(SimError::ShapeMismatch(format!(
                    "{what}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        expect(&self.hidden, [dm.batch, dm.hidden], "hidden")?;
        let per_head = |len: usize, what: &str| -> Result<()> {
            if len != dm.n_heads {
                return Err(SimError::ShapeMismatch(format!("{what}: {len} heads, expected {}", dm.n_heads)));
            }
            Ok(())
        };
        match &self.weights {
            AttentionWeights::Mha(w) => {
                per_head(w.w_qkv.len(), "w_qkv")?;
                per_head(w.w_o.len(), "w_o")?;
                per_head(w.k_cache.len(), "k_cache")?;
                per_head(w.v_cache.len(), "v_cache")?;
                for i in 0..dm.n_heads {
                    expect(&w.w_qkv[i], [dm.hidden, 3 * dm.head_dim], "w_qkv")?;
                    expect(&w.w_o[i], [dm.head_dim, dm.hidden], "w_o")?;
                    expect(&w.k_cache[i], [dm.seq_len, dm.head_dim], "k_cache")?;
                    expect(&w.v_cache[i], [dm.seq_len, dm.head_dim], "v_cache")?;
                }
            }
            AttentionWeights::Mla(w) => {
                let l = dm.latent()?;
                expect(&w.w_kv, [dm.hidden, l], "w_kv")?;
                expect(&w.kv_cache, [dm.seq_len, l], "kv_cache")?;
                per_head(w.w_q.len(), "w_q")?;
                per_head(w.w_up.len(), "w_up")?;
                per_head(w.w_down.len(), "w_down")?;
                per_head(w.w_o.len(), "w_o")?;
                for i in 0..dm.n_heads {
                    expect(&w.w_q[i], [dm.hidden, dm.head_dim], "w_q")?;
                    expect(&w.w_up[i], [dm.head_dim, l], "w_up")?;
                    expect(&w.w_down[i], [l, dm.head_dim], "w_down")?;
                    expect(&w.w_o[i], [dm.head_dim, dm.hidden], "w_o")?;
                }
            }
        }
        Ok(())
    }
}
