use candle_core::{DType, Device, Tensor};

use super::{PlaneTensors, VaeConfig};
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};

/// Sinusoidal encoding of every point of a `t×x×y×z` lattice.
///
/// Per axis of length `n` and frequency `ω_k = 2^k·π/n`, `k < freqs`, the
/// channels are `sin(ω_k p), cos(ω_k p)`; axes are concatenated in
/// `(t, x, y, z)` order. Shape `(t, x, y, z, 4·2·freqs)`.
pub fn positional_encoding(dims: [usize; 4], freqs: usize, dtype: DType) -> Result<Tensor> {
    let per_axis = 2 * freqs;
    let ch = 4 * per_axis;
    let axis_codes: Vec<Vec<f64>> = dims
        .iter()
        .map(|&n| {
            let mut v = Vec::with_capacity(n * per_axis);
            for p in 0..n {
                for k in 0..freqs {
                    let w = (1u64 << k) as f64 * std::f64::consts::PI / n as f64;
                    v.push((w * p as f64).sin());
                    v.push((w * p as f64).cos());
                }
            }
            v
        })
        .collect();
    let [nt, nx, ny, nz] = dims;
    let mut data = Vec::with_capacity(nt * nx * ny * nz * ch);
    for t in 0..nt {
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    for (a, p) in [t, x, y, z].into_iter().enumerate() {
                        data.extend_from_slice(&axis_codes[a][p * per_axis..(p + 1) * per_axis]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (nt, nx, ny, nz, ch), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Temporal restoration, Hadamard fusion and the upsampling head.
pub struct Decoder {
    t_rate: usize,
    rates: (usize, usize, usize),
    pe_freqs: usize,
    up_channels: usize,
    /// Transposed temporal convolutions (kernel = stride = `d_T`) for P_tx, P_ty, P_tz.
    t_up: [Linear; 3],
    fuse: Linear,
    up: Linear,
    logits: Linear,
}

impl Decoder {
    pub fn new(cfg: &VaeConfig, ps: &mut ParamStore) -> Result<Self> {
        let c = cfg.latent_channels;
        let r = cfg.rates;
        Ok(Self {
            t_rate: r.t,
            rates: (r.x, r.y, r.z),
            pe_freqs: cfg.pe_freqs,
            up_channels: cfg.dec_up_channels,
            t_up: [
                ps.linear("dec.t_up_tx", c, r.t * c)?,
                ps.linear("dec.t_up_ty", c, r.t * c)?,
                ps.linear("dec.t_up_tz", c, r.t * c)?,
            ],
            fuse: ps.linear("dec.fuse", c + cfg.pe_channels(), cfg.dec_hidden)?,
            up: ps.linear("dec.up", cfg.dec_hidden, r.x * r.y * r.z * cfg.dec_up_channels)?,
            logits: ps.linear("dec.logits", cfg.dec_up_channels, cfg.num_classes)?,
        })
    }

    /// Upsamples a temporal plane `(B, Tl, S, C)` to `(B, Tl·d_T, S, C)`.
    fn restore_t(&self, p: &Tensor, lin: &Linear) -> Result<Tensor> {
        let (b, tl, s, c) = p.dims4()?;
        let y = lin.forward(p)?.reshape((b, tl, s, self.t_rate, c))?;
        Ok(y.permute((0, 1, 3, 2, 4))?.contiguous()?.reshape((b, tl * self.t_rate, s, c))?)
    }

    /// Planes with P_tx, P_ty, P_tz restored to full temporal length.
    pub fn restore(&self, planes: &PlaneTensors) -> Result<PlaneTensors> {
        let mut out = planes.clone();
        for i in 0..3 {
            out[3 + i] = self.restore_t(&planes[3 + i], &self.t_up[i])?;
        }
        Ok(out)
    }

    /// Fused volume `(B, T, X, Y, Z, C)` of planes already at full temporal length.
    pub fn squeeze(planes: &PlaneTensors) -> Result<Tensor> {
        let (b, x, y, c) = planes[0].dims4()?;
        let z = planes[1].dim(2)?;
        let t = planes[3].dim(1)?;
        if planes[2].dims() != [b, y, z, c]
            || planes[3].dims() != [b, t, x, c]
            || planes[4].dims() != [b, t, y, c]
            || planes[5].dims() != [b, t, z, c]
        {
            return Err(Error::Shape("planes do not share a common lattice".into()));
        }
        let views = [
            planes[0].reshape(vec![b, 1, x, y, 1, c])?,
            planes[1].reshape(vec![b, 1, x, 1, z, c])?,
            planes[2].reshape(vec![b, 1, 1, y, z, c])?,
            planes[3].reshape(vec![b, t, x, 1, 1, c])?,
            planes[4].reshape(vec![b, t, 1, y, 1, c])?,
            planes[5].reshape(vec![b, t, 1, 1, z, c])?,
        ];
        // Left fold in plane order, so every voxel sees the same product order as a point query.
        let mut acc = views[0].clone();
        for v in &views[1..] {
            acc = acc.broadcast_mul(v)?;
        }
        Ok(acc.broadcast_as(vec![b, t, x, y, z, c])?.contiguous()?)
    }

    /// Temporal restoration followed by the Hadamard squeeze.
    pub fn expand_squeeze(&self, planes: &PlaneTensors) -> Result<Tensor> {
        Self::squeeze(&self.restore(planes)?)
    }

    /// Logits `(B, T, X, Y, Z, K)` at full spatial resolution.
    pub fn decode(&self, planes: &PlaneTensors) -> Result<Tensor> {
        let vol = self.expand_squeeze(planes)?;
        let (b, t, x, y, z) = match *vol.dims() {
            [b, t, x, y, z, _] => (b, t, x, y, z),
            _ => return Err(Error::Shape("fused volume must have rank 6".into())),
        };
        let pe = positional_encoding([t, x, y, z], self.pe_freqs, vol.dtype())?;
        let pe = pe.unsqueeze(0)?.broadcast_as(vec![b, t, x, y, z, pe.dim(4)?])?;
        let h = self.fuse.forward(&Tensor::cat(&[&vol, &pe], 5)?)?.silu()?;
        let (rx, ry, rz) = self.rates;
        let hu = self.up_channels;
        // Transposed convolution with kernel = stride: each latent cell emits its own sub-block.
        let u = self.up.forward(&h)?.reshape(vec![b * t, x, y, z, rx, ry, rz, hu])?;
        let u = u.permute(vec![0, 1, 4, 2, 5, 3, 6, 7])?.contiguous()?;
        let u = u.reshape(vec![b, t, x * rx, y * ry, z * rz, hu])?.silu()?;
        self.logits.forward(&u)
    }
}
