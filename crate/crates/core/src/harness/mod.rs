//! Configuration, checkpoint containers, file formats and the end-to-end
//! recipes behind the command-line tool.
//!
//! File formats:
//! - checkpoints and HexPlane archives are safetensors files of named f32
//!   tensors with string metadata `format = hexocc`, `format_version = 1`
//!   and `kind` (`vae`, `dit` or `hexplanes`). Checkpoints carry the canonical
//!   config text and the step counter; denoiser checkpoints store averaged
//!   weights under an `ema.` prefix. Normalization statistics, when present,
//!   are the `(6, C)` tensors `stats.mean` and `stats.std`. Archive entry `i`
//!   is the six tensors `{i:06}.p_xy` … `{i:06}.p_tz`, each `(rows, cols, C)`.
//! - masks (`x, y`) and layouts (`t, x, y`) are [`BoolRaster`] files.
//! - trajectories are CSV rows `t,x,y` with an optional header.

mod commands;
mod config;
mod files;

use std::path::{Path, PathBuf};

pub use commands::{
    batch_indices, build_generator, build_vae, cmd_decode, cmd_encode, cmd_eval, cmd_forecast, cmd_gen_toy, cmd_inpaint,
    cmd_outpaint, cmd_sample, cmd_train_dit, cmd_train_vae, encode_all, reconstruction_miou, vae_features, Budget,
    DitLogRecord, EvalReport, GenToyReport, VaeLogRecord, PROBE_SEQUENCES,
};
pub use config::{DitHyper, DitTask, RunConfig, SampleHyper, VaeHyper};
pub use files::{
    list_dataset, parse_trajectory, read_dataset, trajectory_csv, BoolRaster, Checkpoint, CheckpointKind, HexPlaneArchive,
    FORMAT_VERSION,
};

use crate::error::{Error, Result};

/// Environment variable naming the directory that relative paths resolve against.
pub const RUN_DIR_ENV: &str = "HEXOCC_RUN_DIR";

/// Base directory for relative inputs, outputs and run records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    /// `$HEXOCC_RUN_DIR`, or the working directory when unset.
    pub fn from_env() -> Self {
        Self(std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from))
    }

    pub fn resolve(&self, p: impl AsRef<Path>) -> PathBuf {
        let p = p.as_ref();
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.0.join(p)
        }
    }
}

/// What a run needs to be repeated: command line, config, seeds and versions.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub command: String,
    pub args: Vec<String>,
    pub config: RunConfig,
    pub seeds: Vec<(String, u64)>,
    pub deterministic: bool,
}

impl RunRecord {
    pub fn to_json(&self) -> serde_json::Value {
        let seeds: serde_json::Map<String, serde_json::Value> =
            self.seeds.iter().map(|(k, v)| (k.clone(), serde_json::Value::from(*v))).collect();
        serde_json::json!({
            "command": self.command,
            "args": self.args,
            "config_hash": self.config.hash(),
            "config": self.config.to_text(),
            "seeds": seeds,
            "deterministic": self.deterministic,
            "versions": {
                "hexocc": env!("CARGO_PKG_VERSION"),
                "format": FORMAT_VERSION,
            },
        })
    }

    /// Writes `records/<command>-<hash prefix>.json` under `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let rec_dir = dir.join("records");
        std::fs::create_dir_all(&rec_dir).map_err(|e| Error::io(&rec_dir, e))?;
        let path = rec_dir.join(format!("{}-{}.json", self.command, &self.config.hash()[..12]));
        let text = serde_json::to_string_pretty(&self.to_json()).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests;
