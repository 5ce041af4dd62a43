use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;

use super::{PlaneTensors, VaeConfig};
use crate::error::{Error, Result};
use crate::nn::{dropout, layer_norm, pool_attention, GroupNorm, Init, LayerNorm, Linear, ParamStore};
use crate::occgrid::SemanticGrid;

/// One-hot encodes each frame and gathers non-overlapping `dx×dy×dz` patches.
///
/// Returns `(B·T, X'·Y'·Z', dx·dy·dz·K)` with patch entries ordered
/// `(ix, iy, iz, class)`. Multiplying by a weight matrix is a strided 3D
/// convolution whose kernel equals its stride.
pub fn one_hot_patches(grids: &[&SemanticGrid], rates: (usize, usize, usize), num_classes: usize) -> Result<Tensor> {
    let first = grids.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let d = first.dims();
    let (rx, ry, rz) = rates;
    if d.x % rx != 0 || d.y % ry != 0 || d.z % rz != 0 {
        return Err(Error::Dims(format!("grid {}×{}×{} not divisible by rates {rx}×{ry}×{rz}", d.x, d.y, d.z)));
    }
    let (xp, yp, zp) = (d.x / rx, d.y / ry, d.z / rz);
    let patch = rx * ry * rz * num_classes;
    let per_frame = xp * yp * zp * patch;
    let mut data = vec![0f32; grids.len() * d.t * per_frame];
    for (b, g) in grids.iter().enumerate() {
        if g.dims() != d {
            return Err(Error::Dims("grids of different dims in one batch".into()));
        }
        let labels = g.labels();
        for t in 0..d.t {
            let base = (b * d.t + t) * per_frame;
            for x in 0..d.x {
                for y in 0..d.y {
                    for z in 0..d.z {
                        let cls = labels[d.index(t, x, y, z)] as usize;
                        let pos = ((x / rx) * yp + y / ry) * zp + z / rz;
                        let sub = ((x % rx) * ry + y % ry) * rz + z % rz;
                        data[base + pos * patch + sub * num_classes + cls] = 1.0;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (grids.len() * d.t, xp * yp * zp, patch), &Device::Cpu)?)
}

/// Attention-pooling transformer that collapses a token axis to one vector.
///
/// A learned query token cross-attends over the reduced tokens (with learned
/// positional embeddings) through a stack of pre-norm layers; only the query
/// stream is updated between layers.
pub struct Projector {
    heads: usize,
    dropout: f64,
    in_proj: Linear,
    pos: Tensor,
    query: Tensor,
    layers: Vec<ProjLayer>,
    out_norm: LayerNorm,
    out_proj: Linear,
}

struct ProjLayer {
    q_norm: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ff_norm: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl Projector {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &VaeConfig, reduced_len: usize) -> Result<Self> {
        let c = cfg.feat_channels;
        let w = cfg.proj_width();
        let mut layers = Vec::with_capacity(cfg.proj_layers);
        for l in 0..cfg.proj_layers {
            let n = format!("{name}.layer{l}");
            layers.push(ProjLayer {
                q_norm: ps.layer_norm(&format!("{n}.q_norm"), w)?,
                wq: ps.linear(&format!("{n}.wq"), w, w)?,
                wk: ps.linear(&format!("{n}.wk"), w, w)?,
                wv: ps.linear(&format!("{n}.wv"), w, w)?,
                wo: ps.linear(&format!("{n}.wo"), w, w)?,
                ff_norm: ps.layer_norm(&format!("{n}.ff_norm"), w)?,
                ff1: ps.linear(&format!("{n}.ff1"), w, 2 * w)?,
                ff2: ps.linear(&format!("{n}.ff2"), 2 * w, w)?,
            });
        }
        Ok(Self {
            heads: cfg.proj_heads,
            dropout: cfg.dropout,
            in_proj: ps.linear(&format!("{name}.in_proj"), c, w)?,
            pos: ps.var(&format!("{name}.pos"), &[reduced_len, w], Init::Normal(0.02))?,
            query: ps.var(&format!("{name}.query"), &[w], Init::Normal(0.02))?,
            layers,
            out_norm: ps.layer_norm(&format!("{name}.out_norm"), w)?,
            out_proj: ps.linear(&format!("{name}.out_proj"), w, c)?,
        })
    }

    pub fn reduced_len(&self) -> usize {
        self.pos.dim(0).unwrap_or(0)
    }

    /// `(N, S_r, C) -> (N, C)`.
    pub fn forward(&self, x: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let (n, sr, _) = x.dims3()?;
        if sr != self.reduced_len() {
            return Err(Error::Shape(format!("projector built for {} tokens, got {sr}", self.reduced_len())));
        }
        let w = self.pos.dim(1)?;
        // Keys and values read one shared normalization of the tokens; a
        // per-layer affine would be absorbed by the key and value maps.
        let kv = layer_norm(&self.in_proj.forward(x)?.broadcast_add(&self.pos)?, 1e-6)?;
        let mut q = self.query.reshape((1, w))?.broadcast_as((n, w))?.contiguous()?;
        for layer in &self.layers {
            let qn = layer.q_norm.forward(&q)?;
            let a = pool_attention(&layer.wq.forward(&qn)?, &layer.wk.forward(&kv)?, &layer.wv.forward(&kv)?, self.heads)?;
            let mut a = layer.wo.forward(&a)?;
            if let Some(r) = rng.as_deref_mut() {
                a = dropout(&a, self.dropout, r)?;
            }
            q = (q + a)?;
            let mut f = layer.ff2.forward(&layer.ff1.forward(&layer.ff_norm.forward(&q)?)?.silu()?)?;
            if let Some(r) = rng.as_deref_mut() {
                f = dropout(&f, self.dropout, r)?;
            }
            q = (q + f)?;
        }
        self.out_proj.forward(&self.out_norm.forward(&q)?)
    }
}

/// Reduces the axes `reduce` of a channel-last tensor with `h`.
///
/// `x` has shape `(B, a_1, .., a_n, C)`; axis numbers in `keep` and `reduce`
/// index `a_1..a_n` (1-based, since 0 is the batch) and must partition them.
/// The result is `(B, keep.., C)` in the listed `keep` order.
pub fn project(
    x: &Tensor,
    keep: &[usize],
    reduce: &[usize],
    h: &Projector,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let rank = dims.len();
    if rank < 3 {
        return Err(Error::Shape(format!("project needs batch, feature and channel axes, got rank {rank}")));
    }
    let mut seen = vec![false; rank];
    for &a in keep.iter().chain(reduce) {
        if a == 0 || a >= rank - 1 || seen[a] {
            return Err(Error::Invalid(format!("axes {keep:?} / {reduce:?} do not partition 1..{}", rank - 1)));
        }
        seen[a] = true;
    }
    if seen[1..rank - 1].iter().any(|s| !s) || reduce.is_empty() {
        return Err(Error::Invalid(format!("axes {keep:?} / {reduce:?} do not partition 1..{}", rank - 1)));
    }
    let mut order = vec![0];
    order.extend_from_slice(keep);
    order.extend_from_slice(reduce);
    order.push(rank - 1);
    let c = dims[rank - 1];
    let sk: usize = keep.iter().map(|&a| dims[a]).product();
    let sr: usize = reduce.iter().map(|&a| dims[a]).product();
    let flat = x.permute(order)?.contiguous()?.reshape((dims[0] * sk, sr, c))?;
    let y = h.forward(&flat, rng)?;
    let mut out_dims = vec![dims[0]];
    out_dims.extend(keep.iter().map(|&a| dims[a]));
    out_dims.push(y.dim(1)?);
    Ok(y.reshape(out_dims)?)
}

/// Strided temporal convolution (kernel 3, padding 1) along axis 1 of `(B, T, S, C)`.
struct TemporalDown {
    stride: usize,
    lin: Linear,
}

impl TemporalDown {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.dim(1)?;
        let tl = t / self.stride;
        let p = x.pad_with_zeros(1, 1, 1)?;
        let mut taps = Vec::with_capacity(3);
        for j in 0..3u32 {
            let idx: Vec<u32> = (0..tl as u32).map(|i| i * self.stride as u32 + j).collect();
            let idx = Tensor::from_vec(idx, tl, x.device())?;
            taps.push(p.index_select(&idx, 1)?);
        }
        self.lin.forward(&Tensor::cat(&taps, 3)?)
    }
}

/// 1×1 head emitting `[mu | logvar]`; the logvar bias starts at `logvar_init`.
fn posterior_head(ps: &mut ParamStore, name: &str, d_in: usize, latent: usize, logvar_init: f64) -> Result<Linear> {
    let bound = 1.0 / (d_in as f64).sqrt();
    let weight = ps.var(&format!("{name}.weight"), &[d_in, 2 * latent], Init::Uniform(bound))?;
    let mut b = vec![0.0; 2 * latent];
    b[latent..].fill(logvar_init);
    let bias = ps.var_from(&format!("{name}.bias"), &[2 * latent], b)?;
    Ok(Linear { weight, bias: Some(bias) })
}

/// Feature extractor, projection module, temporal downsampling and posterior heads.
pub struct Encoder {
    rates: (usize, usize, usize),
    num_classes: usize,
    latent: usize,
    /// Strided convolution with kernel = stride over one-hot patches.
    patch: Linear,
    patch_norm: GroupNorm,
    /// Pointwise convolution.
    conv: Linear,
    conv_norm: GroupNorm,
    h_t: Projector,
    /// Spatial planes: reduce z, y, x of the time-pooled volume.
    h_spatial: [Projector; 3],
    /// Temporal planes: reduce yz, xz, xy of the full sequence volume.
    h_temporal: [Projector; 3],
    t_down: [TemporalDown; 3],
    heads: [Linear; 6],
}

impl Encoder {
    pub fn new(cfg: &VaeConfig, ps: &mut ParamStore) -> Result<Self> {
        let r = cfg.rates;
        let c = cfg.feat_channels;
        let (xp, yp, zp) = cfg.feature_dims();
        let t = cfg.grid.t;
        let patch_in = r.x * r.y * r.z * cfg.num_classes;
        let down = |ps: &mut ParamStore, name: &str| -> Result<TemporalDown> {
            Ok(TemporalDown { stride: r.t, lin: ps.linear(name, 3 * c, c)? })
        };
        Ok(Self {
            rates: (r.x, r.y, r.z),
            num_classes: cfg.num_classes,
            latent: cfg.latent_channels,
            patch: ps.linear("enc.patch", patch_in, c)?,
            patch_norm: GroupNorm::new(ps, "enc.patch_norm", cfg.norm_groups, c)?,
            conv: ps.linear("enc.conv", c, c)?,
            conv_norm: GroupNorm::new(ps, "enc.conv_norm", cfg.norm_groups, c)?,
            h_t: Projector::new(ps, "enc.h_t", cfg, t)?,
            h_spatial: [
                Projector::new(ps, "enc.h_z", cfg, zp)?,
                Projector::new(ps, "enc.h_y", cfg, yp)?,
                Projector::new(ps, "enc.h_x", cfg, xp)?,
            ],
            h_temporal: [
                Projector::new(ps, "enc.h_zy", cfg, yp * zp)?,
                Projector::new(ps, "enc.h_xz", cfg, xp * zp)?,
                Projector::new(ps, "enc.h_xy", cfg, xp * yp)?,
            ],
            t_down: [down(ps, "enc.down_tx")?, down(ps, "enc.down_ty")?, down(ps, "enc.down_tz")?],
            heads: [
                posterior_head(ps, "enc.head_xy", c, cfg.latent_channels, cfg.logvar_init)?,
                posterior_head(ps, "enc.head_xz", c, cfg.latent_channels, cfg.logvar_init)?,
                posterior_head(ps, "enc.head_yz", c, cfg.latent_channels, cfg.logvar_init)?,
                posterior_head(ps, "enc.head_tx", c, cfg.latent_channels, cfg.logvar_init)?,
                posterior_head(ps, "enc.head_ty", c, cfg.latent_channels, cfg.logvar_init)?,
                posterior_head(ps, "enc.head_tz", c, cfg.latent_channels, cfg.logvar_init)?,
            ],
        })
    }

    /// `(B, T, X', Y', Z', C_feat)`; frames share all weights.
    pub fn extract_features(&self, grids: &[&SemanticGrid], _rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let d = grids[0].dims();
        let (rx, ry, rz) = self.rates;
        let (xp, yp, zp) = (d.x / rx, d.y / ry, d.z / rz);
        let dtype = self.patch.weight.dtype();
        let oh = one_hot_patches(grids, self.rates, self.num_classes)?.to_dtype(dtype)?;
        let f = self.patch_norm.forward(&self.patch.forward(&oh)?)?.silu()?;
        let f = self.conv_norm.forward(&self.conv.forward(&f)?)?.silu()?;
        let c = f.dim(2)?;
        Ok(f.reshape(vec![grids.len(), d.t, xp, yp, zp, c])?)
    }

    /// Pre-head plane features in [`crate::hexplane::PlaneKind`] order, temporal planes at full T.
    pub fn plane_features(&self, feats: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<PlaneTensors> {
        // feats axes: 0 batch, 1 t, 2 x, 3 y, 4 z, 5 channel
        let xyz = project(feats, &[2, 3, 4], &[1], &self.h_t, rng.as_deref_mut())?;
        // xyz axes: 0 batch, 1 x, 2 y, 3 z, 4 channel
        let p_xy = project(&xyz, &[1, 2], &[3], &self.h_spatial[0], rng.as_deref_mut())?;
        let p_xz = project(&xyz, &[1, 3], &[2], &self.h_spatial[1], rng.as_deref_mut())?;
        let p_yz = project(&xyz, &[2, 3], &[1], &self.h_spatial[2], rng.as_deref_mut())?;
        let p_tx = project(feats, &[1, 2], &[3, 4], &self.h_temporal[0], rng.as_deref_mut())?;
        let p_ty = project(feats, &[1, 3], &[2, 4], &self.h_temporal[1], rng.as_deref_mut())?;
        let p_tz = project(feats, &[1, 4], &[2, 3], &self.h_temporal[2], rng.as_deref_mut())?;
        Ok([p_xy, p_xz, p_yz, p_tx, p_ty, p_tz])
    }

    /// Posterior `(mu, logvar)` planes, each `(B, rows, cols, C)`.
    pub fn forward(&self, grids: &[&SemanticGrid], mut rng: Option<&mut ChaCha8Rng>) -> Result<(PlaneTensors, PlaneTensors)> {
        let feats = self.extract_features(grids, rng.as_deref_mut())?;
        let planes = self.plane_features(&feats, rng)?;
        let mut mu = Vec::with_capacity(6);
        let mut logvar = Vec::with_capacity(6);
        for (i, p) in planes.iter().enumerate() {
            let p = if i >= 3 { self.t_down[i - 3].forward(p)? } else { p.clone() };
            let out = self.heads[i].forward(&p)?;
            mu.push(out.narrow(3, 0, self.latent)?);
            logvar.push(out.narrow(3, self.latent, self.latent)?);
        }
        for t in mu.iter().chain(&logvar) {
            let s = t.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if !s.is_finite() {
                return Err(Error::NonFinite("encoder posterior".into()));
            }
        }
        Ok((mu.try_into().expect("six planes"), logvar.try_into().expect("six planes")))
    }

    pub fn heads(&self) -> &[Linear; 6] {
        &self.heads
    }
}
