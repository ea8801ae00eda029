//! Multi-head attention over `[B, T, C]` tensors with optional rotary
//! position embeddings.

use candle_core::{DType, Device, Tensor, D};

use super::layers::{gelu, LayerNorm, Linear};
use super::params::Scope;
use crate::error::Result;

const MASK_BIAS: f64 = -1e9;

/// Per-item rotary angle tables `(cos, sin)`, each `[B, 1, L, head_dim / 2]`.
#[derive(Debug, Clone)]
pub struct Rotary {
    cos: Tensor,
    sin: Tensor,
}

impl Rotary {
    /// `positions[b][l]` may be fractional.
    pub fn new(
        positions: &[Vec<f64>],
        head_dim: usize,
        base: f64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let half = head_dim / 2;
        let b = positions.len();
        let l = positions.first().map_or(0, |p| p.len());
        let mut cos = Vec::with_capacity(b * l * half);
        let mut sin = Vec::with_capacity(b * l * half);
        for item in positions {
            debug_assert_eq!(item.len(), l);
            for &p in item {
                for i in 0..half {
                    let freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
                    let a = p * freq;
                    cos.push(a.cos());
                    sin.push(a.sin());
                }
            }
        }
        let shape = (b, 1, l, half);
        Ok(Self {
            cos: Tensor::from_vec(cos, shape, device)?.to_dtype(dtype)?,
            sin: Tensor::from_vec(sin, shape, device)?.to_dtype(dtype)?,
        })
    }

    /// Integer positions `0..len` for every item.
    pub fn sequential(
        batch: usize,
        len: usize,
        head_dim: usize,
        base: f64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let pos: Vec<f64> = (0..len).map(|i| i as f64).collect();
        Self::new(&vec![pos; batch], head_dim, base, dtype, device)
    }

    /// Rotates `[B, H, L, D]` by the rotate-half convention.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.dim(D::Minus1)?;
        let half = d / 2;
        let x1 = x.narrow(D::Minus1, 0, half)?;
        let x2 = x.narrow(D::Minus1, half, half)?;
        let r1 = (x1.broadcast_mul(&self.cos)? - x2.broadcast_mul(&self.sin)?)?;
        let r2 = (x2.broadcast_mul(&self.cos)? + x1.broadcast_mul(&self.sin)?)?;
        Ok(Tensor::cat(&[r1, r2], D::Minus1)?)
    }
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, l, c) = x.dims3()?;
    Ok(x.reshape((b, l, heads, c / heads))?
        .transpose(1, 2)?
        .contiguous()?)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, l, d) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, l, h * d))?)
}

/// Scaled dot-product attention on `[B, H, L, D]` tensors.
///
/// `key_mask` is `[B, Lk, 1]` with 1 on valid keys.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, key_mask: Option<&Tensor>) -> Result<Tensor> {
    let d = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?.contiguous()?)? / (d as f64).sqrt())?;
    let scores = match key_mask {
        Some(m) => {
            let (b, lk, _) = m.dims3()?;
            let bias = m.affine(-MASK_BIAS, MASK_BIAS)?.reshape((b, 1, 1, lk))?;
            scores.broadcast_add(&bias)?
        }
        None => scores,
    };
    let w = candle_nn::ops::softmax(&scores, D::Minus1)?;
    Ok(w.matmul(v)?)
}

/// Query, key and value projections followed by multi-head attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Option<Linear>,
    heads: usize,
}

impl MultiHeadAttention {
    /// `out_dim` adds an output projection from `attn_dim`.
    pub fn new(
        vs: &Scope,
        q_dim: usize,
        kv_dim: usize,
        attn_dim: usize,
        heads: usize,
        out_dim: Option<usize>,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(&vs.pp("q"), q_dim, attn_dim)?,
            k: Linear::new(&vs.pp("k"), kv_dim, attn_dim)?,
            v: Linear::new(&vs.pp("v"), kv_dim, attn_dim)?,
            out: match out_dim {
                Some(o) => Some(Linear::new(&vs.pp("out"), attn_dim, o)?),
                None => None,
            },
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.q.out_dim() / self.heads
    }

    pub fn forward(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        key_mask: Option<&Tensor>,
        rotary: Option<(&Rotary, &Rotary)>,
    ) -> Result<Tensor> {
        let mut q = split_heads(&self.q.forward(query)?, self.heads)?;
        let mut k = split_heads(&self.k.forward(key)?, self.heads)?;
        let v = split_heads(&self.v.forward(value)?, self.heads)?;
        if let Some((rq, rk)) = rotary {
            q = rq.apply(&q)?;
            k = rk.apply(&k)?;
        }
        let y = merge_heads(&attend(&q, &k, &v, key_mask)?)?;
        match &self.out {
            Some(o) => o.forward(&y),
            None => Ok(y),
        }
    }
}

/// Post-norm transformer encoder block with rotary self-attention.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

impl SelfAttentionBlock {
    pub fn new(vs: &Scope, dim: usize, filter: usize, heads: usize, ln_eps: f64) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&vs.pp("attn"), dim, dim, dim, heads, Some(dim))?,
            norm1: LayerNorm::new(&vs.pp("norm1"), dim, ln_eps)?,
            ff1: Linear::new(&vs.pp("ff1"), dim, filter)?,
            ff2: Linear::new(&vs.pp("ff2"), filter, dim)?,
            norm2: LayerNorm::new(&vs.pp("norm2"), dim, ln_eps)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.attn.head_dim()
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>, rotary: &Rotary) -> Result<Tensor> {
        let a = self.attn.forward(x, x, x, mask, Some((rotary, rotary)))?;
        let h = self.norm1.forward(&(x + a)?)?;
        let f = self.ff2.forward(&gelu(&self.ff1.forward(&h)?)?)?;
        let y = self.norm2.forward(&(h + f)?)?;
        match mask {
            Some(m) => Ok(y.broadcast_mul(m)?),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn rotary_preserves_norm_and_relative_scores() {
        let q = randn(&[1, 1, 1, 8], 0);
        let k = randn(&[1, 1, 1, 8], 1);
        let score = |pq: f64, pk: f64| {
            let rq = Rotary::new(&[vec![pq]], 8, 10_000.0, DType::F64, &Device::Cpu).unwrap();
            let rk = Rotary::new(&[vec![pk]], 8, 10_000.0, DType::F64, &Device::Cpu).unwrap();
            let a = flat(&rq.apply(&q).unwrap());
            let b = flat(&rk.apply(&k).unwrap());
            let n: f64 = a.iter().map(|x| x * x).sum();
            (a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>(), n)
        };
        let (s1, n1) = score(3.0, 1.0);
        let (s2, _) = score(7.5, 5.5);
        let qn: f64 = flat(&q).iter().map(|x| x * x).sum();
        assert!((s1 - s2).abs() < 1e-10);
        assert!((n1 - qn).abs() < 1e-10);
    }

    #[test]
    fn masked_keys_get_no_weight() {
        let q = randn(&[1, 1, 2, 4], 2);
        let k = randn(&[1, 1, 3, 4], 3);
        let v = randn(&[1, 1, 3, 4], 4);
        let mask = Tensor::new(&[1.0f64, 1.0, 0.0], &Device::Cpu)
            .unwrap()
            .reshape((1, 3, 1))
            .unwrap();
        let masked = flat(&attend(&q, &k, &v, Some(&mask)).unwrap());
        let trimmed = flat(
            &attend(
                &q,
                &k.narrow(2, 0, 2).unwrap(),
                &v.narrow(2, 0, 2).unwrap(),
                None,
            )
            .unwrap(),
        );
        for (a, b) in masked.iter().zip(&trimmed) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_shapes() {
        let s = ParamStore::new(DType::F64, 0);
        let mha = MultiHeadAttention::new(&s.root(), 6, 5, 8, 2, None).unwrap();
        let y = mha
            .forward(
                &randn(&[2, 7, 6], 0),
                &randn(&[2, 3, 5], 1),
                &randn(&[2, 3, 5], 2),
                None,
                None,
            )
            .unwrap();
        assert_eq!(y.dims(), &[2, 7, 8]);
        assert_eq!(s.num_params(None), 3 * (6 * 8 + 8) - (6 - 5) * 8 * 2);
    }
}
