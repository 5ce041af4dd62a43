use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{extend_mask, ConditionBundle, InpaintMask};
use crate::diffusion::{q_sample_values, Generator};
use crate::error::{Error, Result};
use crate::hexplane::{HexPlane, PlaneKind};
use crate::occgrid::SemanticGrid;
use crate::vae::VaeModel;

/// Stream offset for the noise that re-noises the preserved region, so the
/// sampler's own draws are the same with or without a mask.
const KNOWN_STREAM: u64 = 0x1a9a_1e75_0c0f_fee5;

/// Samples the masked region while clamping everything else to `h_in`.
///
/// After each reverse update the preserved cells are set to `h_in` noised to
/// the current step, and to `h_in` itself after the last one. The result
/// equals `h_in` bit for bit on every unmasked plane cell.
pub fn inpaint(
    gen: &Generator,
    h_in: &HexPlane,
    m: &InpaintMask,
    cond: Option<&ConditionBundle>,
    w: f64,
    seed: u64,
) -> Result<HexPlane> {
    let dims = gen.dims();
    let masks = extend_mask(m, &dims)?;
    let known = gen.to_model_space(h_in)?;
    let regen = masks.rolled();
    let ch = dims.channels;
    let keep: Vec<bool> = known.pad_mask.iter().zip(&regen).map(|(&p, &r)| !p && !r).collect();
    let keep_none: Vec<bool> = keep.iter().map(|&k| !k).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ KNOWN_STREAM);
    let x = gen.sample_with(cond, w, seed, |t, x| {
        if !keep.iter().any(|&k| k) {
            return Ok(());
        }
        if t == 0 {
            for (i, v) in x.iter_mut().enumerate() {
                if keep[i / ch] {
                    *v = known.data[i];
                }
            }
            return Ok(());
        }
        let eps: Vec<f32> =
            (0..x.len()).map(|i| if keep[i / ch] { StandardNormal.sample(&mut rng) } else { 0.0 }).collect();
        let noised = q_sample_values(&known.data, t, &eps, &gen.schedule, &keep_none, ch)?;
        for (i, v) in x.iter_mut().enumerate() {
            if keep[i / ch] {
                *v = noised[i];
            }
        }
        Ok(())
    })?;
    let mut out = gen.from_model_space(x)?;
    for k in PlaneKind::ALL {
        let src = h_in.plane(k);
        let dst = out.plane_mut(k);
        for (i, &marked) in masks.masks[k.index()].iter().enumerate() {
            if !marked {
                dst.data[i * ch..(i + 1) * ch].copy_from_slice(&src.data[i * ch..(i + 1) * ch]);
            }
        }
    }
    Ok(out)
}

/// Moves content `s` latent cells toward −x in every plane with an x axis;
/// the vacated high-x cells become zero.
pub fn shift_x(h: &HexPlane, s: usize) -> Result<HexPlane> {
    let dims = h.dims();
    if s == 0 || s >= dims.x {
        return Err(Error::Invalid(format!("shift {s} outside 1..{}", dims.x)));
    }
    let mut out = h.clone();
    for k in [PlaneKind::Xy, PlaneKind::Xz, PlaneKind::Tx] {
        let src = h.plane(k);
        let dst = out.plane_mut(k);
        for a in 0..src.rows {
            for b in 0..src.cols {
                let (x, from) = if k == PlaneKind::Tx { (b, (a, b + s)) } else { (a, (a + s, b)) };
                let cell = dst.cell_mut(a, b);
                if x + s < dims.x {
                    cell.copy_from_slice(src.cell(from.0, from.1));
                } else {
                    cell.fill(0.0);
                }
            }
        }
    }
    Ok(out)
}

/// Outpainting along +x: shift by `shift_cells`, regenerate the vacated band.
pub fn outpaint(
    gen: &Generator,
    h_in: &HexPlane,
    shift_cells: usize,
    cond: Option<&ConditionBundle>,
    w: f64,
    seed: u64,
) -> Result<HexPlane> {
    let dims = gen.dims();
    if h_in.dims() != dims {
        return Err(Error::Dims(format!("HexPlane {:?} does not match generator {:?}", h_in.dims(), dims)));
    }
    let shifted = shift_x(h_in, shift_cells)?;
    let mut m = InpaintMask::empty(dims.x, dims.y);
    for x in dims.x - shift_cells..dims.x {
        for y in 0..dims.y {
            m.set(x, y, true);
        }
    }
    inpaint(gen, &shifted, &m, cond, w, seed)
}

/// World-x bookkeeping of a window that is repeatedly outpainted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coverage {
    /// World x of the window's first latent column.
    pub origin: i64,
    pub width: i64,
    /// Covered world range `[start, end)`.
    pub start: i64,
    pub end: i64,
}

impl Coverage {
    pub fn new(width: usize) -> Self {
        Self { origin: 0, width: width as i64, start: 0, end: width as i64 }
    }

    pub fn after_outpaint(self, shift_cells: usize) -> Self {
        let origin = self.origin + shift_cells as i64;
        Self { origin, end: self.end.max(origin + self.width), ..self }
    }

    pub fn extent(&self) -> i64 {
        self.end - self.start
    }
}

/// Autoregressive chain: each new HexPlane is conditioned on the previous one.
pub fn extend_sequence(gen: &Generator, h_prev: &HexPlane, n_chunks: usize, w: f64, seed: u64) -> Result<Vec<HexPlane>> {
    if n_chunks < 1 {
        return Err(Error::Invalid("extend_sequence needs at least one chunk".into()));
    }
    if h_prev.dims() != gen.dims() {
        return Err(Error::Dims(format!("HexPlane {:?} does not match generator {:?}", h_prev.dims(), gen.dims())));
    }
    let mut out: Vec<HexPlane> = Vec::with_capacity(n_chunks);
    for i in 0..n_chunks {
        let prev = out.last().unwrap_or(h_prev).clone();
        let cond = ConditionBundle::none().with_hexplane(prev);
        out.push(gen.sample(Some(&cond), w, seed.wrapping_add(i as u64))?);
    }
    Ok(out)
}

/// Predicts the sequence that follows `context`.
pub fn forecast(gen: &Generator, vae: &VaeModel, context: &SemanticGrid, w: f64, seed: u64) -> Result<SemanticGrid> {
    if context.dims() != vae.config.grid {
        return Err(Error::Dims(format!("context {:?} does not match VAE input {:?}", context.dims(), vae.config.grid)));
    }
    let h = vae.encode_mean(&[context])?.remove(0);
    let next = extend_sequence(gen, &h, 1, w, seed)?.remove(0);
    Ok(vae.decode(&[next])?.remove(0))
}
