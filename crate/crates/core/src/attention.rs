//! Multi-head self-attention and a pre-norm transformer block, forward only.
//! Used as the quadratic-cost comparator in the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Eager, Element, MemoryAccountant, Tensor, TensorOps};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnConfig {
    pub dim: usize,
    pub heads: usize,
}

impl AttnConfig {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        Ok(AttnConfig { dim, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Width of the MLP hidden layer.
    pub fn hidden(&self) -> usize {
        4 * self.dim
    }
}

#[derive(Clone, Debug)]
pub struct MhsaWeights<P> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub bo: P,
}

#[derive(Clone, Debug)]
pub struct AttnBlockWeights<P> {
    pub norm1_gain: P,
    pub norm1_bias: P,
    pub attn: MhsaWeights<P>,
    pub norm2_gain: P,
    pub norm2_bias: P,
    pub mlp_in: P,
    pub mlp_in_bias: P,
    pub mlp_out: P,
    pub mlp_out_bias: P,
}

impl<P> MhsaWeights<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> MhsaWeights<Q> {
        MhsaWeights {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
            bo: f(&self.bo),
        }
    }
}

impl<P> AttnBlockWeights<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> AttnBlockWeights<Q> {
        AttnBlockWeights {
            norm1_gain: f(&self.norm1_gain),
            norm1_bias: f(&self.norm1_bias),
            attn: self.attn.map(&mut f),
            norm2_gain: f(&self.norm2_gain),
            norm2_bias: f(&self.norm2_bias),
            mlp_in: f(&self.mlp_in),
            mlp_in_bias: f(&self.mlp_in_bias),
            mlp_out: f(&self.mlp_out),
            mlp_out_bias: f(&self.mlp_out_bias),
        }
    }
}

impl<T: Element> MhsaWeights<Tensor<T>> {
    pub fn init(config: AttnConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let b = 1.0 / (d as f64).sqrt();
        Ok(MhsaWeights {
            wq: Tensor::sample_uniform(&[d, d], -b, b, &mut rng)?,
            wk: Tensor::sample_uniform(&[d, d], -b, b, &mut rng)?,
            wv: Tensor::sample_uniform(&[d, d], -b, b, &mut rng)?,
            wo: Tensor::sample_uniform(&[d, d], -b, b, &mut rng)?,
            bo: Tensor::zeros(&[d])?,
        })
    }
}

impl<T: Element> AttnBlockWeights<Tensor<T>> {
    pub fn init(config: AttnConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let (d, h) = (config.dim, config.hidden());
        let bd = 1.0 / (d as f64).sqrt();
        let bh = 1.0 / (h as f64).sqrt();
        Ok(AttnBlockWeights {
            norm1_gain: Tensor::ones(&[d])?,
            norm1_bias: Tensor::zeros(&[d])?,
            attn: MhsaWeights::init(config, seed)?,
            norm2_gain: Tensor::ones(&[d])?,
            norm2_bias: Tensor::zeros(&[d])?,
            mlp_in: Tensor::sample_uniform(&[d, h], -bd, bd, &mut rng)?,
            mlp_in_bias: Tensor::zeros(&[h])?,
            mlp_out: Tensor::sample_uniform(&[h, d], -bh, bh, &mut rng)?,
            mlp_out_bias: Tensor::zeros(&[d])?,
        })
    }

    /// Zero both residual-branch output projections.
    pub fn zero_outputs(&mut self) {
        for t in [
            &mut self.attn.wo,
            &mut self.attn.bo,
            &mut self.mlp_out,
            &mut self.mlp_out_bias,
        ] {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Scaled dot-product attention per head. All heads' score and probability
/// matrices are materialized before any head's output is formed, as a
/// training-time forward would retain them. Returns the output and each
/// head's `L×L` attention weights.
pub fn mhsa_with<T: Element, O: TensorOps<T>>(
    ops: &mut O,
    x: &O::Value,
    w: &MhsaWeights<O::Value>,
    config: AttnConfig,
) -> Result<(O::Value, Vec<O::Value>)> {
    let hd = config.head_dim();
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let q = ops.matmul(x, &w.wq)?;
    let k = ops.matmul(x, &w.wk)?;
    let v = ops.matmul(x, &w.wv)?;
    let mut scores = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let qh = ops.slice_cols(&q, h * hd, hd)?;
        let kh = ops.slice_cols(&k, h * hd, hd)?;
        let kt = ops.transpose(&kh)?;
        drop(kh);
        let raw = ops.matmul(&qh, &kt)?;
        drop((qh, kt));
        scores.push(ops.scale(&raw, scale)?);
    }
    let mut probs = Vec::with_capacity(config.heads);
    for s in &scores {
        probs.push(ops.softmax(s, 1)?);
    }
    let mut heads = Vec::with_capacity(config.heads);
    for (h, p) in probs.iter().enumerate() {
        let vh = ops.slice_cols(&v, h * hd, hd)?;
        heads.push(ops.matmul(p, &vh)?);
    }
    drop(scores);
    let refs: Vec<&O::Value> = heads.iter().collect();
    let cat = ops.concat_cols(&refs)?;
    drop(heads);
    let out = ops.linear(&cat, &w.wo, &w.bo)?;
    Ok((out, probs))
}

/// `x + MHSA(LN(x))`, then `h + MLP(LN(h))` with a SiLU hidden layer.
pub fn attn_block_with<T: Element, O: TensorOps<T>>(
    ops: &mut O,
    x: &O::Value,
    w: &AttnBlockWeights<O::Value>,
    config: AttnConfig,
) -> Result<O::Value> {
    let n1 = ops.layer_norm(x, &w.norm1_gain, &w.norm1_bias)?;
    let (a, probs) = mhsa_with(ops, &n1, &w.attn, config)?;
    drop((n1, probs));
    let h = ops.add(x, &a)?;
    drop(a);
    let n2 = ops.layer_norm(&h, &w.norm2_gain, &w.norm2_bias)?;
    let pre = ops.linear(&n2, &w.mlp_in, &w.mlp_in_bias)?;
    drop(n2);
    let act = ops.silu(&pre)?;
    drop(pre);
    let m = ops.linear(&act, &w.mlp_out, &w.mlp_out_bias)?;
    drop(act);
    ops.add(&h, &m)
}

pub fn mhsa_forward<T: Element>(x: &Tensor<T>, w: &MhsaWeights<Tensor<T>>, config: AttnConfig) -> Result<Tensor<T>> {
    Ok(attention_with_weights(x, w, config)?.0)
}

/// Output together with every head's attention matrix.
pub fn attention_with_weights<T: Element>(
    x: &Tensor<T>,
    w: &MhsaWeights<Tensor<T>>,
    config: AttnConfig,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let mut ops = Eager::new();
    let wv = w.map(|t| ops.input(t, false));
    let xv = ops.input(x, false);
    let (out, probs) = mhsa_with(&mut ops, &xv, &wv, config)?;
    Ok((out.into_tensor(), probs.into_iter().map(|p| p.into_tensor()).collect()))
}

pub fn attn_block_forward<T: Element>(
    x: &Tensor<T>,
    w: &AttnBlockWeights<Tensor<T>>,
    config: AttnConfig,
) -> Result<Tensor<T>> {
    let mut ops = Eager::new();
    let wv = w.map(|t| ops.input(t, false));
    let xv = ops.input(x, false);
    Ok(attn_block_with(&mut ops, &xv, &wv, config)?.into_tensor())
}

/// Peak bytes of intermediates for one block forward, from the accountant.
pub fn attn_block_peak_bytes<T: Element>(
    x: &Tensor<T>,
    w: &AttnBlockWeights<Tensor<T>>,
    config: AttnConfig,
) -> Result<usize> {
    let acc = MemoryAccountant::new();
    let mut ops = Eager::with_accountant(acc.clone());
    let wv = w.map(|t| ops.input(t, false));
    let xv = ops.input(x, false);
    drop(attn_block_with(&mut ops, &xv, &wv, config)?);
    Ok(acc.peak())
}

/// Closed-form peak for [`attn_block_with`] at sequence length `len`, in
/// bytes for elements of `size` bytes. Inside attention the peak comes while
/// the last head's output is formed: normed input, `q`, `k`, `v`, all heads'
/// scores and probabilities, the finished head outputs, and one value slice.
/// Inside the MLP it comes while the hidden pre-activation is biased.
pub fn attn_block_peak_formula(len: usize, config: AttnConfig, size: usize) -> usize {
    let (l, d, h) = (len, config.dim, config.heads);
    let mhsa = 5 * l * d + l * config.head_dim() + 2 * h * l * l;
    let mlp = 2 * l * d + 2 * l * config.hidden();
    mhsa.max(mlp) * size
}
