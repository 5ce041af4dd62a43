use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{q_sample_values, Generator};
use crate::conditioning::ConditionBundle;
use crate::error::{Error, Result};
use crate::hexplane::HexPlane;
use crate::nn::{scalar, Ema, Trainer};

#[derive(Debug, Clone, PartialEq)]
pub struct DitTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Probability of dropping each condition field independently.
    pub cond_dropout: f64,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for DitTrainConfig {
    fn default() -> Self {
        Self { lr: 1e-4, weight_decay: 0.0, cond_dropout: 0.1, ema_decay: 0.9999, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DitReport {
    pub step: u64,
    /// Mean squared noise error over non-padding cells.
    pub mse: f64,
    pub skipped: bool,
}

/// Optimizer and EMA state around a [`Generator`].
pub struct DitTrainer {
    pub gen: Generator,
    pub config: DitTrainConfig,
    opt: Trainer,
    pub ema: Ema,
    rng: ChaCha8Rng,
    step: u64,
}

impl DitTrainer {
    pub fn new(gen: Generator, config: DitTrainConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.cond_dropout) || !(0.0..=1.0).contains(&config.ema_decay) {
            return Err(Error::Config("condition dropout and EMA decay must lie in [0, 1]".into()));
        }
        let opt = Trainer::new(&gen.dit.params, config.lr, config.weight_decay)?;
        let ema = Ema::new(&gen.dit.params, config.ema_decay)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d17);
        Ok(Self { gen, config, opt, ema, rng, step: 0 })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.opt.set_learning_rate(lr);
    }

    /// Decay used for the next EMA update: the configured decay, capped by
    /// `(1 + n) / (10 + n)` during the first updates.
    pub fn ema_decay_at(&self, n: u64) -> f64 {
        self.config.ema_decay.min((1.0 + n as f64) / (10.0 + n as f64))
    }

    fn drop_fields(&mut self, c: &ConditionBundle) -> ConditionBundle {
        let p = self.config.cond_dropout;
        let mut keep = || self.rng.random::<f64>() >= p;
        ConditionBundle {
            command: c.command.filter(|_| keep()),
            trajectory: c.trajectory.clone().filter(|_| keep()),
            layout: c.layout.clone().filter(|_| keep()),
            cond_hexplane: c.cond_hexplane.clone().filter(|_| keep()),
        }
    }

    /// One step on raw (denormalized) HexPlanes. `conds` is either empty or
    /// one bundle per sample.
    pub fn train_step(&mut self, batch: &[HexPlane], conds: &[ConditionBundle]) -> Result<DitReport> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty training batch".into()));
        }
        if !conds.is_empty() && conds.len() != batch.len() {
            return Err(Error::Shape(format!("{} conditions for {} samples", conds.len(), batch.len())));
        }
        let gen = &self.gen;
        let pad = gen.pad_mask();
        let ch = gen.dims().channels;
        let n = gen.schedule.n_steps;
        let mut xt = Vec::with_capacity(batch.len() * pad.len() * ch);
        let mut eps_all = Vec::with_capacity(xt.capacity());
        let mut ts = Vec::with_capacity(batch.len());
        for h in batch {
            let x0 = gen.to_model_space(h)?;
            let t = self.rng.random_range(1..=n);
            let eps: Vec<f32> = (0..x0.data.len())
                .map(|i| if pad[i / ch] { 0.0 } else { StandardNormal.sample(&mut self.rng) })
                .collect();
            xt.extend(q_sample_values(&x0.data, t, &eps, &gen.schedule, &pad, ch)?);
            eps_all.extend(eps);
            ts.push(t);
        }
        let dropped: Vec<ConditionBundle> = if conds.is_empty() {
            vec![ConditionBundle::none(); batch.len()]
        } else {
            let mut out = Vec::with_capacity(conds.len());
            for c in conds {
                let c = self.gen.prepare(Some(c))?.unwrap_or_default();
                out.push(self.drop_fields(&c));
            }
            out
        };
        let gen = &self.gen;
        let refs: Vec<&ConditionBundle> = dropped.iter().collect();
        let b = batch.len();
        let x = gen.dit.map_tensor(xt, b)?;
        let target = gen.dit.map_tensor(eps_all, b)?;
        let pred = gen.dit.forward(&x, &ts, &refs)?;
        // Padding cells are zero in both tensors, so they add nothing to the sum.
        let cells = pad.iter().filter(|&&p| !p).count() * ch * b;
        let loss = ((pred - target)?.sqr()?.sum_all()? / cells as f64)?;
        self.step += 1;
        let mse = scalar(&loss)?;
        if !mse.is_finite() {
            log::warn!("step {}: non-finite DiT loss, update skipped", self.step);
            return Ok(DitReport { step: self.step, mse, skipped: true });
        }
        self.opt.step(&loss)?;
        if self.opt.learning_rate() != 0.0 {
            let d = self.ema_decay_at(self.step - 1);
            self.ema.update_with(&self.gen.dit.params, d)?;
        }
        Ok(DitReport { step: self.step, mse, skipped: false })
    }

    /// Consumes the trainer, returning a generator that carries the EMA weights.
    pub fn into_ema_generator(self) -> Result<Generator> {
        self.ema.copy_to(&self.gen.dit.params)?;
        Ok(self.gen)
    }
}
