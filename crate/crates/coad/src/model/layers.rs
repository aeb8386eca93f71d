//! Transformer building blocks on candle with a deterministic, ordered
//! parameter registry.
//!
//! The registry replaces `candle_nn::VarMap`: parameters are created in a
//! fixed order from a seeded RNG, so equal seeds produce bit-identical
//! initializations and checkpoints serialize in a stable tensor order.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Ordered collection of named trainable parameters.
///
/// Values are always drawn from the RNG in f64 and cast to the registry
/// dtype, so an f32 and an f64 model built from the same seed agree up to
/// rounding.
#[derive(Clone)]
pub(crate) struct ParamRegistry {
    device: Device,
    dtype: DType,
    rng: ChaCha20Rng,
    params: Vec<(String, Var)>,
}

impl ParamRegistry {
    pub fn new(device: &Device, dtype: DType, seed: u64) -> Self {
        Self {
            device: device.clone(),
            dtype,
            rng: ChaCha20Rng::seed_from_u64(seed),
            params: Vec::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn register(&mut self, name: &str, values: Vec<f64>, dims: &[usize]) -> Result<Var> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        let t = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.push((name.to_string(), var.clone()));
        Ok(var)
    }

    /// New parameter initialized from U(-bound, bound).
    pub fn uniform(&mut self, name: &str, dims: &[usize], bound: f64) -> Result<Var> {
        let n: usize = dims.iter().product();
        let values: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.register(name, values, dims)
    }

    /// New parameter filled with a constant.
    pub fn constant(&mut self, name: &str, dims: &[usize], value: f64) -> Result<Var> {
        let n: usize = dims.iter().product();
        self.register(name, vec![value; n], dims)
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Clones of every variable (storage is shared, the clones are handles).
    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }
}

/// Dense affine map `y = x Wᵀ + b`, applied over the last axis.
#[derive(Clone)]
pub(crate) struct Linear {
    w: Var,
    b: Var,
}

impl Linear {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = reg.uniform(&format!("{prefix}.weight"), &[out_dim, in_dim], bound)?;
        let b = reg.uniform(&format!("{prefix}.bias"), &[out_dim], bound)?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x
            .broadcast_matmul(&self.w.as_tensor().t()?)?
            .broadcast_add(self.b.as_tensor())?;
        Ok(y)
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Clone)]
pub(crate) struct LayerNorm {
    gamma: Var,
    beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, dim: usize) -> Result<Self> {
        let gamma = reg.constant(&format!("{prefix}.gamma"), &[dim], 1.0)?;
        let beta = reg.constant(&format!("{prefix}.beta"), &[dim], 0.0)?;
        Ok(Self { gamma, beta, eps: 1e-5 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let std = var.affine(1.0, self.eps)?.sqrt()?;
        let y = centered
            .broadcast_div(&std)?
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?;
        Ok(y)
    }
}

/// Standard multi-head scaled dot-product self-attention.
#[derive(Clone)]
pub(crate) struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(reg, &format!("{prefix}.q"), dim, dim)?,
            k: Linear::new(reg, &format!("{prefix}.k"), dim, dim)?,
            v: Linear::new(reg, &format!("{prefix}.v"), dim, dim)?,
            o: Linear::new(reg, &format!("{prefix}.o"), dim, dim)?,
            heads,
            head_dim: dim / heads,
        })
    }

    fn split_heads(&self, t: &Tensor, b: usize, n: usize) -> Result<Tensor> {
        let t = t
            .reshape((b, n, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()?;
        Ok(t)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let q = self.split_heads(&self.q.forward(x)?, b, n)?;
        let k = self.split_heads(&self.k.forward(x)?, b, n)?;
        let v = self.split_heads(&self.v.forward(x)?, b, n)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let att = q.matmul(&k.transpose(2, 3)?.contiguous()?)?.affine(scale, 0.0)?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let ctx = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
        self.o.forward(&ctx)
    }
}

/// Post-norm transformer encoder layer:
/// `x = LN1(x + MHA(x)); x = LN2(x + FF(x))` with a GELU feed-forward.
#[derive(Clone)]
pub(crate) struct EncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        dim: usize,
        heads: usize,
        ff_width: usize,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(reg, &format!("{prefix}.attn"), dim, heads)?,
            ln1: LayerNorm::new(reg, &format!("{prefix}.ln1"), dim)?,
            ff1: Linear::new(reg, &format!("{prefix}.ff1"), dim, ff_width)?,
            ff2: Linear::new(reg, &format!("{prefix}.ff2"), ff_width, dim)?,
            ln2: LayerNorm::new(reg, &format!("{prefix}.ln2"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.attn.forward(x)?;
        let x = self.ln1.forward(&x.add(&h)?)?;
        let f = self.ff2.forward(&self.ff1.forward(&x)?.gelu_erf()?)?;
        self.ln2.forward(&x.add(&f)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn registry() -> ParamRegistry {
        ParamRegistry::new(&Device::Cpu, DType::F64, 7)
    }

    #[test]
    fn linear_matches_manual_matmul() {
        let mut reg = registry();
        let lin = Linear::new(&mut reg, "l", 3, 2).unwrap();
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0], (1, 1, 3), &Device::Cpu).unwrap();
        let y = lin.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let w = lin.w.as_tensor().to_vec2::<f64>().unwrap();
        let b = lin.b.as_tensor().to_vec1::<f64>().unwrap();
        for o in 0..2 {
            let expect = w[o][0] + 2.0 * w[o][1] + 3.0 * w[o][2] + b[o];
            assert!((y[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_normalizes_last_axis() {
        let mut reg = registry();
        let ln = LayerNorm::new(&mut reg, "ln", 4).unwrap();
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], (1, 1, 4), &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn attention_preserves_shape_and_is_deterministic() {
        let mut reg_a = registry();
        let mha_a = MultiHeadAttention::new(&mut reg_a, "a", 8, 2).unwrap();
        let mut reg_b = registry();
        let mha_b = MultiHeadAttention::new(&mut reg_b, "a", 8, 2).unwrap();
        let x = Tensor::rand(0.0f64, 1.0, (2, 5, 8), &Device::Cpu).unwrap();
        let ya = mha_a.forward(&x).unwrap();
        let yb = mha_b.forward(&x).unwrap();
        assert_eq!(ya.dims(), &[2, 5, 8]);
        let va = ya.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let vb = yb.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut reg = registry();
        assert!(MultiHeadAttention::new(&mut reg, "a", 10, 3).is_err());
    }

    #[test]
    fn encoder_layer_shape_closure() {
        let mut reg = registry();
        let enc = EncoderLayer::new(&mut reg, "e", 8, 2, 16).unwrap();
        let x = Tensor::rand(0.0f64, 1.0, (3, 4, 8), &Device::Cpu).unwrap();
        assert_eq!(enc.forward(&x).unwrap().dims(), &[3, 4, 8]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut reg = registry();
        reg.constant("x", &[1], 0.0).unwrap();
        assert!(reg.constant("x", &[1], 0.0).is_err());
    }
}
