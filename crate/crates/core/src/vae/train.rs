use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{vae_loss, VaeModel};
use crate::error::{Error, Result};
use crate::nn::{scalar, Trainer};
use crate::occgrid::SemanticGrid;

/// Scalar losses of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub total: f64,
    pub ce: f64,
    pub lovasz: f64,
    pub kl: f64,
    /// Set when the loss was non-finite and no update was applied.
    pub skipped: bool,
}

/// Optimizer state and loss weights around a [`VaeModel`].
pub struct VaeTrainer {
    pub model: VaeModel,
    opt: Trainer,
    pub alpha: f64,
    pub beta: f64,
    seed: u64,
    step: u64,
    dropout_rng: ChaCha8Rng,
}

impl VaeTrainer {
    pub const DEFAULT_LR: f64 = 1e-3;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;

    pub fn new(model: VaeModel, lr: f64, alpha: f64, beta: f64, seed: u64) -> Result<Self> {
        if alpha < 0.0 || beta < 0.0 {
            return Err(Error::Config(format!("loss weights must be non-negative, got {alpha}, {beta}")));
        }
        let opt = Trainer::new(&model.params, lr, Self::DEFAULT_WEIGHT_DECAY)?;
        Ok(Self { model, opt, alpha, beta, seed, step: 0, dropout_rng: ChaCha8Rng::seed_from_u64(seed ^ 0xd20f) })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Continues the step counter after loading weights.
    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.opt.set_learning_rate(lr)
    }

    pub fn learning_rate(&self) -> f64 {
        self.opt.learning_rate()
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[&SemanticGrid]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty training batch".into()));
        }
        let eps_seed = self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(self.step);
        let enc = self.model.encode(batch, eps_seed, Some(&mut self.dropout_rng))?;
        let logits = self.model.decode_logits(&enc.h)?;
        let mut labels = Vec::with_capacity(batch.len() * self.model.config.grid.voxels());
        for g in batch {
            labels.extend_from_slice(g.labels());
        }
        let terms = vae_loss(&logits, &labels, &enc.mu, &enc.logvar, self.alpha, self.beta)?;
        self.step += 1;
        let mut report = LossReport {
            step: self.step,
            total: scalar(&terms.total)?,
            ce: scalar(&terms.ce)?,
            lovasz: scalar(&terms.lovasz)?,
            kl: scalar(&terms.kl)?,
            skipped: false,
        };
        if !report.total.is_finite() {
            report.skipped = true;
            log::warn!("step {}: non-finite loss, update skipped", self.step);
            return Ok(report);
        }
        self.opt.step(&terms.total)?;
        Ok(report)
    }
}
