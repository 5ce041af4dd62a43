use candle_core::{DType, Device, Tensor};

use super::Tokenizer;
use crate::conditioning::{CondEncoders, ConditionBundle, Context};
use crate::error::{Error, Result};
use crate::hexplane::PlaneDims;
use crate::nn::{attention, attention_biased, layer_norm, timestep_embedding, Linear, NamedTensor, ParamStore};

/// Width of the sinusoidal timestep features fed to the timestep MLP.
pub const FREQ_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct DitConfig {
    /// Latent geometry of the HexPlanes being generated.
    pub dims: PlaneDims,
    /// Frames per sequence, the trajectory length.
    pub frames: usize,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl DitConfig {
    /// Width 192, 8 blocks, 4 heads.
    pub fn desk(dims: PlaneDims, frames: usize) -> Self {
        Self { dims, frames, patch: 2, width: 192, depth: 8, heads: 4, mlp_ratio: 4 }
    }

    /// Width 384, 16 blocks, 8 heads.
    pub fn full(dims: PlaneDims, frames: usize) -> Self {
        Self { dims, frames, patch: 2, width: 384, depth: 16, heads: 8, mlp_ratio: 4 }
    }

    /// Width 64, 4 blocks, 4 heads; sized for single-core toy runs.
    pub fn toy(dims: PlaneDims, frames: usize) -> Self {
        Self { dims, frames, patch: 2, width: 64, depth: 4, heads: 4, mlp_ratio: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.require_square()?;
        if self.width == 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!("DiT width {} must be a positive multiple of 4", self.width)));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("DiT width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.mlp_ratio == 0 || self.frames == 0 {
            return Err(Error::Config("DiT needs a positive MLP ratio and frame count".into()));
        }
        Ok(())
    }
}

/// `x·(1 + scale) + shift` with per-sample `(B, 1, W)` modulation.
fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
}

/// Splits `(B, n·W)` into `n` tensors of shape `(B, 1, W)`.
fn chunks(m: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    let (b, nw) = m.dims2()?;
    let w = nw / n;
    (0..n).map(|i| Ok(m.narrow(1, i * w, w)?.reshape((b, 1, w))?)).collect()
}

struct Block {
    heads: usize,
    ada: Linear,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ca_q: Linear,
    ca_k: Linear,
    ca_v: Linear,
    ca_o: Linear,
    mlp1: Linear,
    mlp2: Linear,
}

impl Block {
    fn new(ps: &mut ParamStore, name: &str, cfg: &DitConfig) -> Result<Self> {
        let w = cfg.width;
        let l = |ps: &mut ParamStore, n: &str, i, o| ps.linear(&format!("{name}.{n}"), i, o);
        Ok(Self {
            heads: cfg.heads,
            ada: ps.linear_zeros(&format!("{name}.ada"), w, 9 * w)?,
            wq: l(ps, "wq", w, w)?,
            wk: l(ps, "wk", w, w)?,
            wv: l(ps, "wv", w, w)?,
            wo: l(ps, "wo", w, w)?,
            ca_q: l(ps, "ca_q", w, w)?,
            ca_k: l(ps, "ca_k", w, w)?,
            ca_v: l(ps, "ca_v", w, w)?,
            ca_o: l(ps, "ca_o", w, w)?,
            mlp1: l(ps, "mlp1", w, cfg.mlp_ratio * w)?,
            mlp2: l(ps, "mlp2", cfg.mlp_ratio * w, w)?,
        })
    }

    /// `c_act` is `SiLU(c)`, `(B, W)`.
    fn forward(&self, x: &Tensor, c_act: &Tensor, ctx: Option<&Context>) -> Result<Tensor> {
        let m = chunks(&self.ada.forward(c_act)?, 9)?;
        let h = modulate(&layer_norm(x, 1e-6)?, &m[0], &m[1])?;
        let a = attention(&self.wq.forward(&h)?, &self.wk.forward(&h)?, &self.wv.forward(&h)?, self.heads)?;
        let mut x = (x + self.wo.forward(&a)?.broadcast_mul(&m[2])?)?;
        if let Some(ctx) = ctx {
            let h = modulate(&layer_norm(&x, 1e-6)?, &m[3], &m[4])?;
            let a = attention_biased(
                &self.ca_q.forward(&h)?,
                &self.ca_k.forward(&ctx.tokens)?,
                &self.ca_v.forward(&ctx.tokens)?,
                self.heads,
                &ctx.key_bias,
            )?;
            let a = self.ca_o.forward(&a)?.broadcast_mul(&ctx.present)?;
            x = (x + a.broadcast_mul(&m[5])?)?;
        }
        let h = modulate(&layer_norm(&x, 1e-6)?, &m[6], &m[7])?;
        let f = self.mlp2.forward(&self.mlp1.forward(&h)?.gelu_erf()?)?;
        Ok((x + f.broadcast_mul(&m[8])?)?)
    }
}

/// Diffusion transformer over padded-rollout tokens.
pub struct Dit {
    pub config: DitConfig,
    pub params: ParamStore,
    pub tokenizer: Tokenizer,
    pub cond: CondEncoders,
    x_embed: Linear,
    active_pos: Tensor,
    t_fc1: Linear,
    t_fc2: Linear,
    final_ada: Linear,
    head: Linear,
    blocks: Vec<Block>,
}

impl Dit {
    pub fn new(config: DitConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: DitConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let tokenizer = Tokenizer::new(config.dims, config.patch, config.width, dtype)?;
        let mut ps = ParamStore::new(seed, dtype);
        let (w, p, c) = (config.width, config.patch, config.dims.channels);
        // Blocks are declared last, so models differing only in depth share every other weight.
        let x_embed = ps.linear("dit.x_embed", p * p * c, w)?;
        let t_fc1 = ps.linear("dit.t_fc1", FREQ_DIM, w)?;
        let t_fc2 = ps.linear("dit.t_fc2", w, w)?;
        let cond = CondEncoders::new(&mut ps, &tokenizer, config.frames, w)?;
        let final_ada = ps.linear_zeros("dit.final_ada", w, 2 * w)?;
        let head = ps.linear("dit.head", w, p * p * c)?;
        let blocks = (0..config.depth).map(|i| Block::new(&mut ps, &format!("dit.block{i}"), &config)).collect::<Result<_>>()?;
        let active_pos = tokenizer.pos_at(tokenizer.active())?;
        Ok(Self { config, params: ps, tokenizer, cond, x_embed, active_pos, t_fc1, t_fc2, final_ada, head, blocks })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn dims(&self) -> PlaneDims {
        self.config.dims
    }

    /// Embedded content tokens `(B, N_active, W)` with positions added.
    pub fn embed_tokens(&self, x: &Tensor) -> Result<Tensor> {
        let patches = self.tokenizer.select_active(&self.tokenizer.patchify(x)?)?;
        Ok(self.x_embed.forward(&patches)?.broadcast_add(&self.active_pos)?)
    }

    /// Condition vector `c = t_emb + Σ present vector conditions`, `(B, W)`.
    pub fn condition_vector(&self, t: &[usize], conds: &[&ConditionBundle]) -> Result<Tensor> {
        let tf: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let te = timestep_embedding(&tf, FREQ_DIM, 10000.0, self.dtype())?;
        let c = self.t_fc2.forward(&self.t_fc1.forward(&te)?.silu()?)?;
        Ok(match self.cond.vector(conds)? {
            Some(v) => (c + v)?,
            None => c,
        })
    }

    /// Predicted noise for `x_t` of shape `(B, S, S, C)`; padding cells of
    /// the output are exactly zero. Conditioning HexPlanes must be in the
    /// same normalized space as `x_t`.
    pub fn forward(&self, x_t: &Tensor, t: &[usize], conds: &[&ConditionBundle]) -> Result<Tensor> {
        let b = x_t.dim(0)?;
        if t.len() != b || conds.len() != b {
            return Err(Error::Shape(format!("batch of {b} maps with {} steps and {} conditions", t.len(), conds.len())));
        }
        let mut x = self.embed_tokens(x_t)?;
        let c_act = self.condition_vector(t, conds)?.silu()?;
        let ctx = self.cond.context(conds, &self.tokenizer)?;
        let ctx = match ctx {
            Some(mut c) => {
                c.tokens = layer_norm(&c.tokens, 1e-6)?;
                Some(c)
            }
            None => None,
        };
        for blk in &self.blocks {
            x = blk.forward(&x, &c_act, ctx.as_ref())?;
        }
        let m = chunks(&self.final_ada.forward(&c_act)?, 2)?;
        let h = modulate(&layer_norm(&x, 1e-6)?, &m[0], &m[1])?;
        self.tokenizer.unpatchify(&self.head.forward(&h)?, self.config.dims.channels)
    }

    /// Output of the head applied to normalized patch embeddings, which is
    /// what [`Dit::forward`] computes while every modulation is zero.
    pub fn identity_path(&self, x_t: &Tensor) -> Result<Tensor> {
        let h = layer_norm(&self.embed_tokens(x_t)?, 1e-6)?;
        self.tokenizer.unpatchify(&self.head.forward(&h)?, self.config.dims.channels)
    }

    /// Names of all adaLN modulation weights and biases.
    pub fn modulation_params(&self) -> Vec<String> {
        self.params.named().filter(|(n, _)| n.ends_with("ada.weight") || n.ends_with("ada.bias")).map(|(n, _)| n.to_string()).collect()
    }

    pub fn snapshot(&self) -> Result<Vec<NamedTensor>> {
        self.params.snapshot()
    }

    pub fn load(&self, tensors: &[NamedTensor], prefix: &str) -> Result<()> {
        self.params.load(tensors, prefix)
    }

    /// Host rolled-map data `(B·S·S·C)` to a tensor.
    pub fn map_tensor(&self, data: Vec<f32>, batch: usize) -> Result<Tensor> {
        let s = self.tokenizer.side;
        Ok(Tensor::from_vec(data, (batch, s, s, self.config.dims.channels), &Device::Cpu)?.to_dtype(self.dtype())?)
    }
}
