//! Small neural-network toolkit on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] that initializes them from a seeded
//! generator, so two stores built with the same seed and the same sequence of
//! calls hold bit-identical weights.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

/// Named, seeded trainable parameters.
pub struct ParamStore {
    entries: Vec<(String, Var)>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { entries: Vec::new(), index: HashMap::new(), rng: ChaCha8Rng::seed_from_u64(seed), dtype }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut self.rng); std * z }).collect(),
            Init::Uniform(a) => (0..n).map(|_| self.rng.random_range(-a..=a)).collect(),
        };
        self.var_from(name, shape, data)
    }

    /// Declares a parameter with explicit initial values.
    pub fn var_from(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(format!("parameter {name} declared twice")));
        }
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        let out = v.as_tensor().clone();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), v));
        Ok(out)
    }

    /// Affine layer with uniform fan-in initialization.
    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = self.var(&format!("{name}.weight"), &[d_in, d_out], Init::Uniform(bound))?;
        let bias = self.var(&format!("{name}.bias"), &[d_out], Init::Uniform(bound))?;
        Ok(Linear { weight, bias: Some(bias) })
    }

    /// Affine layer with all weights and bias zero.
    pub fn linear_zeros(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        let weight = self.var(&format!("{name}.weight"), &[d_in, d_out], Init::Zeros)?;
        let bias = self.var(&format!("{name}.bias"), &[d_out], Init::Zeros)?;
        Ok(Linear { weight, bias: Some(bias) })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        let gamma = self.var(&format!("{name}.gamma"), &[dim], Init::Ones)?;
        let beta = self.var(&format!("{name}.beta"), &[dim], Init::Zeros)?;
        Ok(LayerNorm { affine: Some((gamma, beta)) })
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Name, shape and f32 values of every parameter, in declaration order.
    pub fn snapshot(&self) -> Result<Vec<NamedTensor>> {
        self.entries
            .iter()
            .map(|(n, v)| {
                Ok(NamedTensor {
                    name: n.clone(),
                    shape: v.dims().to_vec(),
                    data: v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
                })
            })
            .collect()
    }

    /// Overwrites parameters from `tensors`. Every parameter must be present
    /// with a matching shape.
    pub fn load(&self, tensors: &[NamedTensor], prefix: &str) -> Result<()> {
        let by_name: HashMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for (name, var) in &self.entries {
            let key = format!("{prefix}{name}");
            let t = by_name.get(key.as_str()).ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
            if t.shape != var.dims() {
                return Err(Error::Shape(format!("tensor {key}: stored {:?}, expected {:?}", t.shape, var.dims())));
            }
            let src = Tensor::from_slice(&t.data, t.shape.as_slice(), &Device::Cpu)?.to_dtype(self.dtype)?;
            var.set(&src)?;
        }
        Ok(())
    }
}

/// A flat f32 tensor with a name.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// `y = x W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        let d_out = self.weight.dim(1)?;
        let rows = x.elem_count() / d_in.max(1);
        let mut y = x.reshape((rows, d_in))?.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = d_out;
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last axis, optionally with a learned affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub affine: Option<(Tensor, Tensor)>,
}

impl LayerNorm {
    pub fn plain() -> Self {
        Self { affine: None }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = layer_norm(x, 1e-6)?;
        if let Some((g, b)) = &self.affine {
            y = y.broadcast_mul(g)?.broadcast_add(b)?;
        }
        Ok(y)
    }
}

pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Group normalization for channel-last input `(N, positions, C)`:
/// statistics per sample and channel group over all positions.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, groups: usize, channels: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::Invalid(format!("{channels} channels not divisible into {groups} groups")));
        }
        Ok(Self {
            groups,
            gamma: ps.var(&format!("{name}.gamma"), &[channels], Init::Ones)?,
            beta: ps.var(&format!("{name}.beta"), &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, p, c) = x.dims3()?;
        let g = self.groups;
        let xg = x.reshape((n, p, g, c / g))?;
        let mean = xg.mean_keepdim(1)?.mean_keepdim(3)?;
        let xc = xg.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(1)?.mean_keepdim(3)?;
        let y = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((n, p, c))?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Softmax over the last axis as one fused kernel with an analytic backward
/// pass `y ⊙ (g − Σ g ⊙ y)`.
struct SoftmaxLast;

fn softmax_rows<T: num_traits::Float>(src: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for row in src.chunks_exact(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - m).exp();
            sum = sum + e;
            out.push(e);
        }
        let inv = T::one() / sum;
        for v in &mut out[start..] {
            *v = *v * inv;
        }
    }
    out
}

impl candle_core::CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("softmax-last needs a contiguous input".into()))?;
        let n = *layout.dims().last().unwrap_or(&1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(&v[start..end], n)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(&v[start..end], n)),
            _ => return Err(candle_core::Error::Msg("softmax-last supports f32 and f64".into())),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dot = (grad_res * res)?.sum_keepdim(D::Minus1)?;
        Ok(Some(grad_res.broadcast_sub(&dot)?.mul(res)?))
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}

/// Multi-head scaled dot-product attention.
///
/// `q: (B, Lq, W)`, `k, v: (B, Lk, W)`; returns `(B, Lq, W)`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, lq, w) = q.dims3()?;
    let lk = k.dim(1)?;
    if w % heads != 0 {
        return Err(Error::Invalid(format!("width {w} not divisible by {heads} heads")));
    }
    let dh = w / heads;
    let split = |t: &Tensor, l: usize| -> Result<Tensor> {
        Ok(t.reshape((b, l, heads, dh))?.transpose(1, 2)?.contiguous()?.reshape((b * heads, l, dh))?)
    };
    let (qh, kh, vh) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
    let scores = (qh.matmul(&kh.transpose(1, 2)?.contiguous()?)? / (dh as f64).sqrt())?;
    let attn = softmax_last(&scores)?;
    let out = attn.matmul(&vh)?;
    Ok(out.reshape((b, heads, lq, dh))?.transpose(1, 2)?.contiguous()?.reshape((b, lq, w))?)
}

/// [`attention`] with an additive key bias `(B, Lk)`, zero for visible keys
/// and a large negative value for hidden ones.
pub fn attention_biased(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, key_bias: &Tensor) -> Result<Tensor> {
    let (b, lq, w) = q.dims3()?;
    let lk = k.dim(1)?;
    if w % heads != 0 {
        return Err(Error::Invalid(format!("width {w} not divisible by {heads} heads")));
    }
    let dh = w / heads;
    let split = |t: &Tensor, l: usize| -> Result<Tensor> {
        Ok(t.reshape((b, l, heads, dh))?.transpose(1, 2)?.contiguous()?.reshape((b * heads, l, dh))?)
    };
    let (qh, kh, vh) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
    let scores = (qh.matmul(&kh.transpose(1, 2)?.contiguous()?)? / (dh as f64).sqrt())?;
    let scores = scores.reshape((b, heads, lq, lk))?.broadcast_add(&key_bias.reshape((b, 1, 1, lk))?)?;
    let attn = softmax_last(&scores)?.reshape((b * heads, lq, lk))?;
    let out = attn.matmul(&vh)?;
    Ok(out.reshape((b, heads, lq, dh))?.transpose(1, 2)?.contiguous()?.reshape((b, lq, w))?)
}

/// Single-query multi-head attention written with broadcasts, which avoids
/// many tiny batched matrix products when the batch is large.
///
/// `q: (B, W)`, `k, v: (B, L, W)`; returns `(B, W)`. Equal to
/// [`attention`] with a length-one query.
pub fn pool_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, l, w) = k.dims3()?;
    if w % heads != 0 {
        return Err(Error::Invalid(format!("width {w} not divisible by {heads} heads")));
    }
    let dh = w / heads;
    let scores = k.broadcast_mul(&q.reshape((b, 1, w))?)?.reshape((b, l, heads, dh))?.sum(3)?;
    let attn = candle_nn::ops::softmax(&(scores / (dh as f64).sqrt())?, 1)?;
    let out = v.reshape((b, l, heads, dh))?.broadcast_mul(&attn.reshape((b, l, heads, 1))?)?.sum(1)?;
    Ok(out.reshape((b, w))?)
}

/// Inverted dropout with masks drawn from `rng`.
pub fn dropout(x: &Tensor, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let mask: Vec<f32> =
        (0..x.elem_count()).map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

/// Sinusoidal embedding of scalar positions, `(N,) -> (N, dim)` as `[cos | sin]`.
pub fn timestep_embedding(t: &[f64], dim: usize, max_period: f64, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
            data.push((ti * freq).cos());
        }
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
            data.push((ti * freq).sin());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// AdamW over every parameter of a store.
pub struct Trainer {
    opt: AdamW,
    vars: Vec<Var>,
}

impl Trainer {
    pub fn new(ps: &ParamStore, lr: f64, weight_decay: f64) -> Result<Self> {
        let vars = ps.vars();
        let params = ParamsAdamW { lr, weight_decay, ..Default::default() };
        Ok(Self { opt: AdamW::new(vars.clone(), params)?, vars })
    }

    pub fn learning_rate(&self) -> f64 {
        self.opt.learning_rate()
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.opt.set_learning_rate(lr)
    }

    /// Backpropagates `loss` and applies one update. A zero learning rate
    /// leaves parameters bit-identical.
    pub fn step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        if self.opt.learning_rate() == 0.0 {
            return Ok(());
        }
        self.opt.step(&grads)?;
        Ok(())
    }

    /// Applies an externally clipped gradient set.
    pub fn step_with(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        if self.opt.learning_rate() == 0.0 {
            return Ok(());
        }
        self.opt.step(grads)?;
        Ok(())
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Exponential moving average of a parameter store.
pub struct Ema {
    decay: f64,
    shadow: Vec<Tensor>,
}

impl Ema {
    pub fn new(ps: &ParamStore, decay: f64) -> Result<Self> {
        let shadow = ps.vars().iter().map(|v| Ok(v.as_tensor().copy()?.detach())).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { decay, shadow })
    }

    pub fn update(&mut self, ps: &ParamStore) -> Result<()> {
        self.update_with(ps, self.decay)
    }

    /// Update with an explicit decay for this step.
    pub fn update_with(&mut self, ps: &ParamStore, decay: f64) -> Result<()> {
        for (s, v) in self.shadow.iter_mut().zip(ps.vars()) {
            let cur = v.as_tensor().detach();
            // Detached so each step does not pin the previous average through the op graph.
            *s = ((&*s * decay)? + (cur * (1.0 - decay))?)?.detach();
        }
        Ok(())
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    /// Copies the averaged weights into `ps`.
    pub fn copy_to(&self, ps: &ParamStore) -> Result<()> {
        for (s, v) in self.shadow.iter().zip(ps.vars()) {
            v.set(s)?;
        }
        Ok(())
    }

    pub fn snapshot(&self, ps: &ParamStore) -> Result<Vec<NamedTensor>> {
        ps.named()
            .zip(&self.shadow)
            .map(|((n, _), t)| {
                Ok(NamedTensor {
                    name: n.to_string(),
                    shape: t.dims().to_vec(),
                    data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
                })
            })
            .collect()
    }

    pub fn load(&mut self, tensors: &[NamedTensor], ps: &ParamStore, prefix: &str) -> Result<()> {
        let by_name: HashMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for ((name, var), s) in ps.named().zip(self.shadow.iter_mut()) {
            let key = format!("{prefix}{name}");
            let t = by_name.get(key.as_str()).ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
            if t.shape != var.dims() {
                return Err(Error::Shape(format!("tensor {key}: stored {:?}, expected {:?}", t.shape, var.dims())));
            }
            *s = Tensor::from_slice(&t.data, t.shape.as_slice(), &Device::Cpu)?.to_dtype(ps.dtype())?;
        }
        Ok(())
    }
}

/// Keeps freed buffers of up to 32 MiB in the process heap instead of
/// returning them to the kernel. Training allocates and frees many
/// same-sized temporaries per step; without this every one of them is
/// page-faulted in afresh. Idempotent; a no-op off glibc.
pub fn tune_allocator() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator thresholds.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        }
    });
}

/// Flattens a tensor into f32 values.
pub fn to_f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
}

/// Scalar value of a one-element tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}
