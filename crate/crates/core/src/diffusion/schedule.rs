use std::str::FromStr;

use crate::error::{Error, Result};

/// Shape of the β sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::Config(format!("unknown noise schedule {other:?}"))),
        }
    }
}

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Per-step variances and the derived coefficients, indexed by `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub n_steps: usize,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(n_steps: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if n_steps < 1 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear if n_steps == 1 => vec![BETA_START],
        ScheduleKind::Linear => (0..n_steps)
            .map(|i| BETA_START + (BETA_END - BETA_START) * i as f64 / (n_steps - 1) as f64)
            .collect(),
    };
    let mut alpha_bar = Vec::with_capacity(n_steps);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(DiffusionSchedule { kind, n_steps, beta, alpha_bar })
}

impl DiffusionSchedule {
    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.n_steps {
            return Err(Error::Invalid(format!("step {t} outside 1..={}", self.n_steps)));
        }
        Ok(())
    }

    pub fn beta_t(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_t(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_t(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior variance `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta_t(t) * (1.0 - self.alpha_bar_t(t - 1)) / (1.0 - self.alpha_bar_t(t))
    }

    /// Coefficients `(c0, ct)` of the posterior mean `c0·x0 + ct·x_t`.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar_t(t);
        let ab_prev = self.alpha_bar_t(t - 1);
        let c0 = ab_prev.sqrt() * self.beta_t(t) / (1.0 - ab);
        let ct = self.alpha_t(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c0, ct)
    }
}
