//! HexPlane variational autoencoder.
//!
//! Encoding runs a per-frame strided convolutional extractor, then a set of
//! attention-pooling projection networks that collapse the feature volume
//! sequence onto six planes, halves the temporal planes with strided
//! convolutions and emits a diagonal Gaussian per plane. Decoding restores the
//! temporal resolution, multiplies the six broadcast planes into a feature
//! volume, appends a positional encoding and upsamples to per-voxel logits.

mod decoder;
mod encoder;
pub mod loss;
mod train;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use decoder::{positional_encoding, Decoder};
pub use encoder::{one_hot_patches, project, Encoder, Projector};
pub use loss::{cross_entropy, kl_planes, lovasz_softmax, vae_loss, LossTerms};
pub use train::{LossReport, VaeTrainer};

use crate::error::{Error, Result};
use crate::hexplane::{HexPlane, Plane, PlaneDims, PlaneKind, Rates};
use crate::nn::{NamedTensor, ParamStore};
use crate::occgrid::{GridDims, SemanticGrid};

/// Architecture and input geometry of the VAE.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub grid: GridDims,
    pub num_classes: usize,
    pub rates: Rates,
    /// Latent channels per plane.
    pub latent_channels: usize,
    /// Channels of the per-frame feature extractor output.
    pub feat_channels: usize,
    pub proj_heads: usize,
    pub proj_head_dim: usize,
    pub proj_layers: usize,
    pub dropout: f64,
    /// Frequencies per axis in the decoder positional encoding; each adds a sin and a cos channel.
    pub pe_freqs: usize,
    pub dec_hidden: usize,
    pub dec_up_channels: usize,
    pub norm_groups: usize,
    /// Initial bias of the logvar heads.
    pub logvar_init: f64,
}

impl VaeConfig {
    /// Defaults for the 8×32×32×8, six-class toy scenes.
    pub fn toy() -> Self {
        Self {
            grid: GridDims::new(8, 32, 32, 8),
            num_classes: 6,
            rates: Rates::uniform(2),
            latent_channels: 16,
            feat_channels: 32,
            proj_heads: 2,
            proj_head_dim: 16,
            proj_layers: 2,
            dropout: 0.1,
            pe_freqs: 2,
            dec_hidden: 64,
            dec_up_channels: 16,
            norm_groups: 8,
            logvar_init: -5.0,
        }
    }

    pub fn latent_dims(&self) -> Result<PlaneDims> {
        PlaneDims::from_grid(self.grid, self.rates, self.latent_channels)
    }

    /// Spatially downsampled sizes `(X', Y', Z')`.
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        (self.grid.x / self.rates.x, self.grid.y / self.rates.y, self.grid.z / self.rates.z)
    }

    pub fn proj_width(&self) -> usize {
        self.proj_heads * self.proj_head_dim
    }

    pub fn pe_channels(&self) -> usize {
        4 * 2 * self.pe_freqs
    }

    pub fn validate(&self) -> Result<()> {
        self.latent_dims()?;
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Config(format!("num_classes {} outside 2..=256", self.num_classes)));
        }
        if self.feat_channels % self.norm_groups != 0 {
            return Err(Error::Config(format!(
                "feat_channels {} not divisible by {} groups",
                self.feat_channels, self.norm_groups
            )));
        }
        if self.proj_layers == 0 || self.proj_heads == 0 || self.proj_head_dim == 0 {
            return Err(Error::Config("projection transformer needs layers, heads and head dim".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Per-plane tensors `(B, rows, cols, C)` in [`PlaneKind`] order.
pub type PlaneTensors = [Tensor; 6];

/// Encoder posterior and a reparameterized sample.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub h: PlaneTensors,
    pub mu: PlaneTensors,
    pub logvar: PlaneTensors,
}

/// Encoder, decoder and their parameters.
pub struct VaeModel {
    pub config: VaeConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl VaeModel {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: VaeConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed, dtype);
        let encoder = Encoder::new(&config, &mut params)?;
        let decoder = Decoder::new(&config, &mut params)?;
        Ok(Self { config, params, encoder, decoder })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn latent_dims(&self) -> PlaneDims {
        self.config.latent_dims().expect("validated at construction")
    }

    fn check_grids(&self, grids: &[&SemanticGrid]) -> Result<()> {
        if grids.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        for g in grids {
            if g.dims() != self.config.grid {
                return Err(Error::Dims(format!("grid {:?} does not match VAE input {:?}", g.dims(), self.config.grid)));
            }
            if g.num_classes() as usize != self.config.num_classes {
                return Err(Error::Dims(format!(
                    "grid has {} classes, VAE expects {}",
                    g.num_classes(),
                    self.config.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Feature volume sequence `(B, T, X', Y', Z', C_feat)`.
    pub fn extract_features(&self, grids: &[&SemanticGrid]) -> Result<Tensor> {
        self.check_grids(grids)?;
        self.encoder.extract_features(grids, None)
    }

    /// Posterior and sample. `seed` drives the reparameterization noise;
    /// dropout is active only when `train_rng` is given.
    pub fn encode(&self, grids: &[&SemanticGrid], seed: u64, train_rng: Option<&mut ChaCha8Rng>) -> Result<Encoded> {
        self.check_grids(grids)?;
        let (mu, logvar) = self.encoder.forward(grids, train_rng)?;
        let h = reparameterize(&mu, &logvar, seed)?;
        Ok(Encoded { h, mu, logvar })
    }

    /// Posterior means as HexPlanes (deterministic, no dropout).
    pub fn encode_mean(&self, grids: &[&SemanticGrid]) -> Result<Vec<HexPlane>> {
        self.check_grids(grids)?;
        let (mu, _) = self.encoder.forward(grids, None)?;
        tensors_to_hexplanes(&mu, self.latent_dims())
    }

    /// `(h, mu, logvar)` as HexPlanes for a single sequence.
    pub fn encode_hexplanes(&self, grid: &SemanticGrid, seed: u64) -> Result<(HexPlane, HexPlane, HexPlane)> {
        let enc = self.encode(&[grid], seed, None)?;
        let d = self.latent_dims();
        let take = |t: &PlaneTensors| -> Result<HexPlane> { Ok(tensors_to_hexplanes(t, d)?.remove(0)) };
        Ok((take(&enc.h)?, take(&enc.mu)?, take(&enc.logvar)?))
    }

    /// Logits `(B, T, X, Y, Z, K)`.
    pub fn decode_logits(&self, planes: &PlaneTensors) -> Result<Tensor> {
        self.decoder.decode(planes)
    }

    /// Arg-max reconstruction of each HexPlane.
    pub fn decode(&self, hexplanes: &[HexPlane]) -> Result<Vec<SemanticGrid>> {
        let mut out = Vec::with_capacity(hexplanes.len());
        // Bounded chunks keep the full-resolution logits small.
        for chunk in hexplanes.chunks(4) {
            let planes = hexplanes_to_tensors(chunk, self.dtype())?;
            let logits = self.decoder.decode(&planes)?;
            out.extend(logits_to_grids(&logits, self.config.grid, self.config.num_classes as u16)?);
        }
        Ok(out)
    }

    /// Mean-path encode followed by decode.
    pub fn reconstruct(&self, grids: &[&SemanticGrid]) -> Result<Vec<SemanticGrid>> {
        let mut out = Vec::with_capacity(grids.len());
        for chunk in grids.chunks(4) {
            self.check_grids(chunk)?;
            let (mu, _) = self.encoder.forward(chunk, None)?;
            let logits = self.decoder.decode(&mu)?;
            out.extend(logits_to_grids(&logits, self.config.grid, self.config.num_classes as u16)?);
        }
        Ok(out)
    }

    pub fn snapshot(&self) -> Result<Vec<NamedTensor>> {
        self.params.snapshot()
    }

    pub fn load(&self, tensors: &[NamedTensor], prefix: &str) -> Result<()> {
        self.params.load(tensors, prefix)
    }
}

/// `mu + exp(logvar / 2) · ε` with `ε ~ N(0, I)` drawn from `seed`.
pub fn reparameterize(mu: &PlaneTensors, logvar: &PlaneTensors, seed: u64) -> Result<PlaneTensors> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(6);
    for (m, lv) in mu.iter().zip(logvar.iter()) {
        let eps: Vec<f64> = (0..m.elem_count()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let eps = Tensor::from_vec(eps, m.shape(), m.device())?.to_dtype(m.dtype())?;
        let std = (lv * 0.5)?.exp()?;
        out.push((m + std.mul(&eps)?)?);
    }
    Ok(out.try_into().expect("six planes"))
}

/// Splits batched plane tensors into HexPlanes.
pub fn tensors_to_hexplanes(planes: &PlaneTensors, dims: PlaneDims) -> Result<Vec<HexPlane>> {
    let b = planes[0].dim(0)?;
    let data: Vec<Vec<f32>> = planes.iter().map(crate::nn::to_f32_vec).collect::<Result<_>>()?;
    (0..b)
        .map(|i| {
            HexPlane::from_fn(dims, |k| {
                let (r, c) = dims.plane_shape(k);
                let n = r * c * dims.channels;
                Plane { rows: r, cols: c, channels: dims.channels, data: data[k.index()][i * n..(i + 1) * n].to_vec() }
            })
        })
        .collect()
}

/// Stacks HexPlanes into batched `(B, rows, cols, C)` tensors.
pub fn hexplanes_to_tensors(hs: &[HexPlane], dtype: DType) -> Result<PlaneTensors> {
    let first = hs.first().ok_or_else(|| Error::Invalid("no HexPlanes".into()))?;
    let dims = first.dims();
    let mut out = Vec::with_capacity(6);
    for k in PlaneKind::ALL {
        let (r, c) = dims.plane_shape(k);
        let mut data = Vec::with_capacity(hs.len() * r * c * dims.channels);
        for h in hs {
            if h.dims() != dims {
                return Err(Error::Shape("HexPlanes with different dims in one batch".into()));
            }
            data.extend_from_slice(&h.plane(k).data);
        }
        out.push(Tensor::from_vec(data, (hs.len(), r, c, dims.channels), &Device::Cpu)?.to_dtype(dtype)?);
    }
    Ok(out.try_into().expect("six planes"))
}

/// Arg-max over the class axis of `(B, T, X, Y, Z, K)` logits.
pub fn logits_to_grids(logits: &Tensor, grid: GridDims, num_classes: u16) -> Result<Vec<SemanticGrid>> {
    let b = logits.dim(0)?;
    let idx: Vec<u32> = logits.argmax(candle_core::D::Minus1)?.flatten_all()?.to_vec1()?;
    let n = grid.voxels();
    (0..b)
        .map(|i| SemanticGrid::new(grid, num_classes, idx[i * n..(i + 1) * n].iter().map(|&v| v as u8).collect()))
        .collect()
}

#[cfg(test)]
mod tests;
