use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::diffusion::{make_schedule, DitConfig, DitTrainConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::hexplane::{token_grid, PlaneDims, Rates};
use crate::occgrid::{GridDims, ToySpec};
use crate::vae::VaeConfig;

/// What the denoiser is trained to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DitTask {
    /// Unconditional generation.
    Uncond,
    /// Archive entries taken in pairs: entry `2k` conditions entry `2k+1`.
    Forecast,
}

impl FromStr for DitTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncond" => Ok(DitTask::Uncond),
            "forecast" => Ok(DitTask::Forecast),
            _ => Err(Error::Config(format!("unknown DiT task {s:?}; expected uncond or forecast"))),
        }
    }
}

impl DitTask {
    pub fn name(self) -> &'static str {
        match self {
            DitTask::Uncond => "uncond",
            DitTask::Forecast => "forecast",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeHyper {
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub log_every: u64,
    pub feat_channels: usize,
    pub dec_hidden: usize,
    pub dropout: f64,
    pub logvar_init: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DitHyper {
    pub lr: f64,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub steps: u64,
    pub batch: usize,
    pub cond_dropout: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub task: DitTask,
    pub log_every: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleHyper {
    pub w: f64,
    pub seed: u64,
    /// Noiseless reverse formula instead of ancestral sampling.
    pub deterministic: bool,
}

/// Every tunable of a run. Text form is one `key = value` per line; see
/// [`RunConfig::KEYS`] for the accepted keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    /// OCG1 dataset directory; `None` means generated toy scenes.
    pub data_dir: Option<PathBuf>,
    pub grid: GridDims,
    pub classes: usize,
    pub toy_sequences: usize,
    pub toy_seed: u64,
    pub toy_vehicles: usize,
    pub toy_pedestrians: usize,
    pub rates: Rates,
    pub latent_channels: usize,
    pub vae: VaeHyper,
    pub dit: DitHyper,
    pub sample: SampleHyper,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub const PRESETS: [&'static str; 3] = ["toy", "desk", "full"];

    pub const KEYS: [&'static str; 45] = [
        "preset",
        "data.dir",
        "grid.t",
        "grid.x",
        "grid.y",
        "grid.z",
        "grid.classes",
        "toy.sequences",
        "toy.seed",
        "toy.vehicles",
        "toy.pedestrians",
        "rate.t",
        "rate.x",
        "rate.y",
        "rate.z",
        "latent.channels",
        "vae.lr",
        "vae.alpha",
        "vae.beta",
        "vae.batch",
        "vae.steps",
        "vae.seed",
        "vae.log_every",
        "vae.feat_channels",
        "vae.dec_hidden",
        "vae.dropout",
        "vae.logvar_init",
        "dit.lr",
        "dit.width",
        "dit.depth",
        "dit.heads",
        "dit.patch",
        "dit.mlp_ratio",
        "dit.diffusion_steps",
        "dit.schedule",
        "dit.steps",
        "dit.batch",
        "dit.cond_dropout",
        "dit.ema_decay",
        "dit.seed",
        "dit.task",
        "dit.log_every",
        "sample.w",
        "sample.seed",
        "sample.deterministic",
    ];

    /// Desk scale: toy-sized scenes, width-192 denoiser, 200 diffusion steps.
    pub fn desk() -> Self {
        let vae = VaeConfig::toy();
        let spec = ToySpec::default();
        Self {
            preset: "desk".into(),
            data_dir: None,
            grid: spec.dims(),
            classes: vae.num_classes,
            toy_sequences: 64,
            toy_seed: 0,
            toy_vehicles: spec.n_vehicles,
            toy_pedestrians: spec.n_pedestrians,
            rates: Rates::uniform(2),
            latent_channels: 16,
            vae: VaeHyper {
                lr: 1e-3,
                alpha: 1.0,
                beta: 0.005,
                batch: 4,
                steps: 2000,
                seed: 0,
                log_every: 100,
                feat_channels: vae.feat_channels,
                dec_hidden: vae.dec_hidden,
                dropout: vae.dropout,
                logvar_init: vae.logvar_init,
            },
            dit: DitHyper {
                lr: 1e-4,
                width: 192,
                depth: 8,
                heads: 4,
                patch: 2,
                mlp_ratio: 4,
                diffusion_steps: 200,
                schedule: ScheduleKind::Linear,
                steps: 5000,
                batch: 16,
                cond_dropout: 0.1,
                ema_decay: 0.9999,
                seed: 0,
                task: DitTask::Uncond,
                log_every: 100,
            },
            sample: SampleHyper { w: 1.0, seed: 0, deterministic: false },
        }
    }

    /// Single-core toy run; the small β avoids the posterior collapse that
    /// 0.005 causes on toy scenes.
    pub fn toy() -> Self {
        let mut c = Self::desk();
        c.preset = "toy".into();
        c.vae.beta = 1e-6;
        c.dit.width = 64;
        c.dit.depth = 4;
        c.dit.heads = 4;
        c
    }

    /// Full-size denoiser, 1000 diffusion steps, large batches.
    pub fn full() -> Self {
        let mut c = Self::desk();
        c.preset = "full".into();
        c.dit.width = 384;
        c.dit.depth = 16;
        c.dit.heads = 8;
        c.dit.diffusion_steps = 1000;
        c.vae.batch = 8;
        c.dit.batch = 128;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            _ => Err(Error::Config(format!("unknown preset {name:?}; expected toy, desk or full"))),
        }
    }

    /// Parses `key = value` lines on top of the preset named by the `preset`
    /// key (desk when absent). `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
            pairs.push((k.to_string(), v.to_string()));
        }
        let base = pairs.iter().find(|(k, _)| k == "preset").map_or("desk", |(_, v)| v.as_str());
        let mut cfg = Self::preset(base)?;
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Self::parse(&text)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
            }
        }
        let v = value;
        match key {
            "preset" => {
                Self::preset(v)?;
                if v != self.preset {
                    return Err(Error::Config(format!(
                        "preset {v:?} must be chosen before other keys; this config is built on {:?}",
                        self.preset
                    )));
                }
            }
            "data.dir" => self.data_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "grid.t" => self.grid.t = num(key, v)?,
            "grid.x" => self.grid.x = num(key, v)?,
            "grid.y" => self.grid.y = num(key, v)?,
            "grid.z" => self.grid.z = num(key, v)?,
            "grid.classes" => self.classes = num(key, v)?,
            "toy.sequences" => self.toy_sequences = num(key, v)?,
            "toy.seed" => self.toy_seed = num(key, v)?,
            "toy.vehicles" => self.toy_vehicles = num(key, v)?,
            "toy.pedestrians" => self.toy_pedestrians = num(key, v)?,
            "rate.t" => self.rates.t = num(key, v)?,
            "rate.x" => self.rates.x = num(key, v)?,
            "rate.y" => self.rates.y = num(key, v)?,
            "rate.z" => self.rates.z = num(key, v)?,
            "latent.channels" => self.latent_channels = num(key, v)?,
            "vae.lr" => self.vae.lr = num(key, v)?,
            "vae.alpha" => self.vae.alpha = num(key, v)?,
            "vae.beta" => self.vae.beta = num(key, v)?,
            "vae.batch" => self.vae.batch = num(key, v)?,
            "vae.steps" => self.vae.steps = num(key, v)?,
            "vae.seed" => self.vae.seed = num(key, v)?,
            "vae.log_every" => self.vae.log_every = num(key, v)?,
            "vae.feat_channels" => self.vae.feat_channels = num(key, v)?,
            "vae.dec_hidden" => self.vae.dec_hidden = num(key, v)?,
            "vae.dropout" => self.vae.dropout = num(key, v)?,
            "vae.logvar_init" => self.vae.logvar_init = num(key, v)?,
            "dit.lr" => self.dit.lr = num(key, v)?,
            "dit.width" => self.dit.width = num(key, v)?,
            "dit.depth" => self.dit.depth = num(key, v)?,
            "dit.heads" => self.dit.heads = num(key, v)?,
            "dit.patch" => self.dit.patch = num(key, v)?,
            "dit.mlp_ratio" => self.dit.mlp_ratio = num(key, v)?,
            "dit.diffusion_steps" => self.dit.diffusion_steps = num(key, v)?,
            "dit.schedule" => self.dit.schedule = v.parse()?,
            "dit.steps" => self.dit.steps = num(key, v)?,
            "dit.batch" => self.dit.batch = num(key, v)?,
            "dit.cond_dropout" => self.dit.cond_dropout = num(key, v)?,
            "dit.ema_decay" => self.dit.ema_decay = num(key, v)?,
            "dit.seed" => self.dit.seed = num(key, v)?,
            "dit.task" => self.dit.task = v.parse()?,
            "dit.log_every" => self.dit.log_every = num(key, v)?,
            "sample.w" => self.sample.w = num(key, v)?,
            "sample.seed" => self.sample.seed = num(key, v)?,
            "sample.deterministic" => self.sample.deterministic = flag(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let (v, d, s) = (&self.vae, &self.dit, &self.sample);
        let entries: Vec<(&str, String)> = vec![
            ("preset", self.preset.clone()),
            ("data.dir", self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("grid.t", self.grid.t.to_string()),
            ("grid.x", self.grid.x.to_string()),
            ("grid.y", self.grid.y.to_string()),
            ("grid.z", self.grid.z.to_string()),
            ("grid.classes", self.classes.to_string()),
            ("toy.sequences", self.toy_sequences.to_string()),
            ("toy.seed", self.toy_seed.to_string()),
            ("toy.vehicles", self.toy_vehicles.to_string()),
            ("toy.pedestrians", self.toy_pedestrians.to_string()),
            ("rate.t", self.rates.t.to_string()),
            ("rate.x", self.rates.x.to_string()),
            ("rate.y", self.rates.y.to_string()),
            ("rate.z", self.rates.z.to_string()),
            ("latent.channels", self.latent_channels.to_string()),
            ("vae.lr", v.lr.to_string()),
            ("vae.alpha", v.alpha.to_string()),
            ("vae.beta", v.beta.to_string()),
            ("vae.batch", v.batch.to_string()),
            ("vae.steps", v.steps.to_string()),
            ("vae.seed", v.seed.to_string()),
            ("vae.log_every", v.log_every.to_string()),
            ("vae.feat_channels", v.feat_channels.to_string()),
            ("vae.dec_hidden", v.dec_hidden.to_string()),
            ("vae.dropout", v.dropout.to_string()),
            ("vae.logvar_init", v.logvar_init.to_string()),
            ("dit.lr", d.lr.to_string()),
            ("dit.width", d.width.to_string()),
            ("dit.depth", d.depth.to_string()),
            ("dit.heads", d.heads.to_string()),
            ("dit.patch", d.patch.to_string()),
            ("dit.mlp_ratio", d.mlp_ratio.to_string()),
            ("dit.diffusion_steps", d.diffusion_steps.to_string()),
            ("dit.schedule", d.schedule.name().to_string()),
            ("dit.steps", d.steps.to_string()),
            ("dit.batch", d.batch.to_string()),
            ("dit.cond_dropout", d.cond_dropout.to_string()),
            ("dit.ema_decay", d.ema_decay.to_string()),
            ("dit.seed", d.seed.to_string()),
            ("dit.task", d.task.name().to_string()),
            ("dit.log_every", d.log_every.to_string()),
            ("sample.w", s.w.to_string()),
            ("sample.seed", s.seed.to_string()),
            ("sample.deterministic", s.deterministic.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn toy_spec(&self) -> ToySpec {
        ToySpec {
            t: self.grid.t,
            x: self.grid.x,
            y: self.grid.y,
            z: self.grid.z,
            n_vehicles: self.toy_vehicles,
            n_pedestrians: self.toy_pedestrians,
        }
    }

    /// VAE architecture for sequences of `frames` frames.
    pub fn vae_config_for(&self, frames: usize) -> VaeConfig {
        let base = VaeConfig::toy();
        VaeConfig {
            grid: GridDims::new(frames, self.grid.x, self.grid.y, self.grid.z),
            num_classes: self.classes,
            rates: self.rates,
            latent_channels: self.latent_channels,
            feat_channels: self.vae.feat_channels,
            dec_hidden: self.vae.dec_hidden,
            dropout: self.vae.dropout,
            logvar_init: self.vae.logvar_init,
            ..base
        }
    }

    pub fn vae_config(&self) -> VaeConfig {
        self.vae_config_for(self.grid.t)
    }

    pub fn latent_dims(&self) -> Result<PlaneDims> {
        PlaneDims::from_grid(self.grid, self.rates, self.latent_channels).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn dit_config(&self) -> Result<DitConfig> {
        let d = &self.dit;
        Ok(DitConfig {
            dims: self.latent_dims()?,
            frames: self.grid.t,
            patch: d.patch,
            width: d.width,
            depth: d.depth,
            heads: d.heads,
            mlp_ratio: d.mlp_ratio,
        })
    }

    pub fn dit_train_config(&self) -> DitTrainConfig {
        DitTrainConfig {
            lr: self.dit.lr,
            cond_dropout: self.dit.cond_dropout,
            ema_decay: self.dit.ema_decay,
            seed: self.dit.seed,
            ..Default::default()
        }
    }

    /// Checks every cross-module precondition; all failures are config errors.
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        let as_config = |e: Error| if e.is_config() { e } else { Error::Config(e.to_string()) };
        if self.data_dir.is_none() && self.classes != 6 {
            return cfg(format!("generated toy scenes have 6 classes, grid.classes is {}", self.classes));
        }
        if !(2..=256).contains(&self.classes) {
            return cfg(format!("grid.classes {} outside [2, 256]", self.classes));
        }
        self.vae_config().validate().map_err(as_config)?;
        let dims = self.latent_dims()?;
        if dims.x != dims.y {
            return cfg(format!("latent X {} and Y {} must be equal", dims.x, dims.y));
        }
        self.dit_config()?.validate().map_err(as_config)?;
        token_grid(&dims, self.dit.patch).map_err(as_config)?;
        make_schedule(self.dit.diffusion_steps, self.dit.schedule)?;
        let (v, d) = (&self.vae, &self.dit);
        if v.batch == 0 || d.batch == 0 {
            return cfg("batch sizes must be positive".into());
        }
        if v.lr < 0.0 || d.lr < 0.0 || v.alpha < 0.0 || v.beta < 0.0 {
            return cfg("learning rates and loss weights must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&d.cond_dropout) || !(0.0..=1.0).contains(&d.ema_decay) {
            return cfg("dit.cond_dropout and dit.ema_decay must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&v.dropout) {
            return cfg(format!("vae.dropout {} outside [0, 1)", v.dropout));
        }
        if !self.sample.w.is_finite() || self.sample.w < -1.0 {
            return cfg(format!("sample.w {} must be finite and at least -1", self.sample.w));
        }
        if v.log_every == 0 || d.log_every == 0 {
            return cfg("log intervals must be positive".into());
        }
        Ok(())
    }
}
