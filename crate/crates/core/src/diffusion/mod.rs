//! DDPM over padded-rollout HexPlanes.
//!
//! The six planes are rolled into one square map, patchified, and denoised
//! by a transformer that never sees padding tokens. Timestep and vector
//! conditions drive adaLN-Zero modulation; layout and HexPlane conditions
//! are cross-attention context. Sampling is ancestral DDPM with optional
//! classifier-free guidance.

mod dit;
mod sample;
mod schedule;
mod tokens;
mod train;

pub use dit::{Dit, DitConfig, FREQ_DIM};
pub use sample::Generator;
pub use schedule::{make_schedule, DiffusionSchedule, ScheduleKind, BETA_END, BETA_START};
pub use tokens::{sincos_2d, Tokenizer};
pub use train::{DitReport, DitTrainConfig, DitTrainer};

use crate::error::{Error, Result};
use crate::hexplane::RolledMap;

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps` on raw cell values; cells flagged in `pad`
/// (one flag per `channels` values) are set to zero.
pub fn q_sample_values(
    x0: &[f32],
    t: usize,
    eps: &[f32],
    schedule: &DiffusionSchedule,
    pad: &[bool],
    channels: usize,
) -> Result<Vec<f32>> {
    schedule.check_t(t)?;
    if x0.len() != eps.len() || x0.len() != pad.len() * channels {
        return Err(Error::Shape(format!("x0 has {} values, eps {}, mask covers {}", x0.len(), eps.len(), pad.len() * channels)));
    }
    let ab = schedule.alpha_bar_t(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0
        .iter()
        .zip(eps)
        .enumerate()
        .map(|(i, (&x, &e))| if pad[i / channels] { 0.0 } else { (a * x as f64 + b * e as f64) as f32 })
        .collect())
}

/// Forward noising of a rolled map at step `t` (1-based).
pub fn q_sample(x0: &RolledMap, t: usize, eps: &RolledMap, schedule: &DiffusionSchedule) -> Result<RolledMap> {
    if x0.side != eps.side || x0.channels != eps.channels {
        return Err(Error::Shape(format!(
            "x0 is {}x{}x{}, eps is {}x{}x{}",
            x0.side, x0.side, x0.channels, eps.side, eps.side, eps.channels
        )));
    }
    let data = q_sample_values(&x0.data, t, &eps.data, schedule, &x0.pad_mask, x0.channels)?;
    Ok(RolledMap { side: x0.side, channels: x0.channels, data, pad_mask: x0.pad_mask.clone() })
}

/// Classifier-free guidance `(1 + w)·eps_c − w·eps_u`.
pub fn guided_eps(eps_c: &[f32], eps_u: &[f32], w: f64) -> Result<Vec<f32>> {
    if eps_c.len() != eps_u.len() {
        return Err(Error::Shape(format!("conditional eps has {} values, unconditional {}", eps_c.len(), eps_u.len())));
    }
    Ok(eps_c.iter().zip(eps_u).map(|(&c, &u)| ((1.0 + w) * c as f64 - w * u as f64) as f32).collect())
}
