use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{guided_eps, DiffusionSchedule, Dit};
use crate::conditioning::ConditionBundle;
use crate::error::{Error, Result};
use crate::hexplane::{rollout, unrollout, HexPlane, PlaneDims, PlaneStats, RolledMap};
use crate::nn::to_f32_vec;

/// A denoiser with its schedule and latent normalization, ready to sample.
pub struct Generator {
    pub dit: Dit,
    pub schedule: DiffusionSchedule,
    pub stats: PlaneStats,
    /// Use the noiseless reverse formula `x_{t−1} = (x_t − √(1−α_t)·ε̂) / √α_t`
    /// instead of ancestral sampling.
    pub deterministic: bool,
}

impl Generator {
    pub fn new(dit: Dit, schedule: DiffusionSchedule, stats: PlaneStats) -> Result<Self> {
        if stats.channels != dit.dims().channels {
            return Err(Error::Shape(format!(
                "statistics cover {} channels, the denoiser {}",
                stats.channels,
                dit.dims().channels
            )));
        }
        Ok(Self { dit, schedule, stats, deterministic: false })
    }

    pub fn dims(&self) -> PlaneDims {
        self.dit.dims()
    }

    pub fn pad_mask(&self) -> Vec<bool> {
        RolledMap::zeros(&self.dims()).pad_mask
    }

    /// Rolled, normalized values of a raw HexPlane.
    pub fn to_model_space(&self, h: &HexPlane) -> Result<RolledMap> {
        if h.dims() != self.dims() {
            return Err(Error::Dims(format!("HexPlane {:?} does not match generator {:?}", h.dims(), self.dims())));
        }
        rollout(&self.stats.normalize(h))
    }

    /// Inverse of [`Generator::to_model_space`].
    pub fn from_model_space(&self, data: Vec<f32>) -> Result<HexPlane> {
        let mut m = RolledMap::zeros(&self.dims());
        if data.len() != m.data.len() {
            return Err(Error::Shape(format!("{} values for a rolled map of {}", data.len(), m.data.len())));
        }
        m.data = data;
        Ok(self.stats.denormalize(&unrollout(&m, &self.dims(), false)?))
    }

    /// Validates a bundle and moves its HexPlane into model space. Empty
    /// bundles become `None`.
    pub fn prepare(&self, cond: Option<&ConditionBundle>) -> Result<Option<ConditionBundle>> {
        let Some(c) = cond else { return Ok(None) };
        c.validate(&self.dims(), self.dit.config.frames)?;
        if c.is_empty() {
            return Ok(None);
        }
        let mut c = c.clone();
        if let Some(h) = &c.cond_hexplane {
            c.cond_hexplane = Some(self.stats.normalize(h));
        }
        Ok(Some(c))
    }

    /// Predicted noise for one rolled map; `cond` must come from [`Generator::prepare`].
    pub fn eps(&self, x: &[f32], t: usize, cond: Option<&ConditionBundle>) -> Result<Vec<f32>> {
        let none = ConditionBundle::none();
        let c = cond.unwrap_or(&none);
        let out = self.dit.forward(&self.dit.map_tensor(x.to_vec(), 1)?, &[t], &[c])?;
        to_f32_vec(&out)
    }

    /// Guided prediction. Without a condition, or at `w = 0` and `w = −1`,
    /// only the single pass that the guidance formula keeps is evaluated.
    pub fn guided(&self, x: &[f32], t: usize, cond: Option<&ConditionBundle>, w: f64) -> Result<Vec<f32>> {
        match cond {
            None => self.eps(x, t, None),
            Some(_) if w == 0.0 => self.eps(x, t, cond),
            Some(_) if w == -1.0 => self.eps(x, t, None),
            Some(_) => guided_eps(&self.eps(x, t, cond)?, &self.eps(x, t, None)?, w),
        }
    }

    /// One reverse update from `x_t` to `x_{t−1}`, in place.
    pub fn reverse_step(&self, x: &mut [f32], eps_hat: &[f32], t: usize, pad: &[bool], rng: &mut ChaCha8Rng) -> Result<()> {
        self.schedule.check_t(t)?;
        let c = self.dims().channels;
        let s = &self.schedule;
        let alpha = s.alpha_t(t);
        let inv_sqrt_a = 1.0 / alpha.sqrt();
        let eps_coef = if self.deterministic { (1.0 - alpha).sqrt() } else { s.beta_t(t) / (1.0 - s.alpha_bar_t(t)).sqrt() };
        let sigma = if self.deterministic || t == 1 { 0.0 } else { s.posterior_variance(t).sqrt() };
        for (i, (v, &e)) in x.iter_mut().zip(eps_hat).enumerate() {
            if pad[i / c] {
                *v = 0.0;
                continue;
            }
            let mut nv = inv_sqrt_a * (*v as f64 - eps_coef * e as f64);
            if sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                nv += sigma * z;
            }
            *v = nv as f32;
        }
        Ok(())
    }

    pub(crate) fn check_w(w: f64) -> Result<()> {
        if !w.is_finite() || w < -1.0 {
            return Err(Error::Config(format!("guidance weight {w} must be finite and at least -1")));
        }
        Ok(())
    }

    /// Full reverse chain in model space. `after_step(t_prev, x)` runs after
    /// every update with the step the map now sits at (`0` after the last).
    pub fn sample_with(
        &self,
        cond: Option<&ConditionBundle>,
        w: f64,
        seed: u64,
        mut after_step: impl FnMut(usize, &mut [f32]) -> Result<()>,
    ) -> Result<Vec<f32>> {
        Self::check_w(w)?;
        let cond = self.prepare(cond)?;
        let pad = self.pad_mask();
        let c = self.dims().channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<f32> = (0..pad.len() * c)
            .map(|i| if pad[i / c] { 0.0 } else { StandardNormal.sample(&mut rng) })
            .collect();
        let n = self.schedule.n_steps;
        after_step(n, &mut x)?;
        for t in (1..=n).rev() {
            let eps = self.guided(&x, t, cond.as_ref(), w)?;
            self.reverse_step(&mut x, &eps, t, &pad, &mut rng)?;
            after_step(t - 1, &mut x)?;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sampled latent".into()));
        }
        Ok(x)
    }

    /// A denormalized HexPlane drawn with guidance weight `w`.
    pub fn sample(&self, cond: Option<&ConditionBundle>, w: f64, seed: u64) -> Result<HexPlane> {
        let x = self.sample_with(cond, w, seed, |_, _| Ok(()))?;
        self.from_model_space(x)
    }
}
