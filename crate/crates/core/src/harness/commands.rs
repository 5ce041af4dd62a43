use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DitTask, RunConfig};
use super::files::{Checkpoint, CheckpointKind, HexPlaneArchive};
use crate::conditioning::{forecast, inpaint, outpaint, ConditionBundle, InpaintMask};
use crate::diffusion::{make_schedule, Dit, DitTrainer, Generator};
use crate::error::{Error, Result};
use crate::hexplane::{HexPlane, PlaneKind, PlaneStats};
use crate::metrics::{fid, kid, precision_recall, FeatureSet, FeatureSource, IoUAccumulator};
use crate::nn::NamedTensor;
use crate::occgrid::{generate_toy_scene, write_grid, SemanticGrid};
use crate::vae::{VaeModel, VaeTrainer};

/// Sequences reconstructed for the mIoU probe during VAE training.
pub const PROBE_SEQUENCES: usize = 4;

/// Stopping rule of a training loop: a target step and an optional wall-clock deadline.
#[derive(Debug, Clone, Copy)]
pub struct Budget {
    pub until_step: u64,
    pub deadline: Option<Instant>,
}

impl Budget {
    pub fn steps(until_step: u64) -> Self {
        Self { until_step, deadline: None }
    }

    fn done(&self, step: u64) -> bool {
        step >= self.until_step || self.deadline.is_some_and(|d| Instant::now() >= d)
    }
}

/// Sample indices of step `step` (0-based): consecutive slices of per-epoch
/// permutations, so the order depends only on the step and resumes exactly.
pub fn batch_indices(n: usize, batch: usize, step: u64, seed: u64, cache: &mut HashMap<u64, Vec<usize>>) -> Vec<usize> {
    (0..batch)
        .map(|j| {
            let g = step as usize * batch + j;
            let epoch = (g / n) as u64;
            let perm = cache.entry(epoch).or_insert_with(|| {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
                p
            });
            perm[g % n]
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GenToyReport {
    pub files: Vec<PathBuf>,
    pub manifest: PathBuf,
    pub warning: Option<String>,
}

/// Writes `toy.sequences` toy scenes as `seq_NNNN.ocg` plus `manifest.txt`
/// (`file<TAB>seed` per line). Sequence `i` uses seed `toy.seed + i`.
pub fn cmd_gen_toy(cfg: &RunConfig, out: &Path, force: bool) -> Result<GenToyReport> {
    if out.exists() {
        let occupied = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if occupied && !force {
            return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", out.display())));
        }
        if occupied {
            for e in fs::read_dir(out).map_err(|e| Error::io(out, e))?.flatten() {
                let p = e.path();
                if p.extension().is_some_and(|x| x == "ocg") || p.file_name().is_some_and(|n| n == "manifest.txt") {
                    fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let spec = cfg.toy_spec();
    let mut files = Vec::with_capacity(cfg.toy_sequences);
    let mut manifest = String::new();
    for i in 0..cfg.toy_sequences {
        let seed = cfg.toy_seed.wrapping_add(i as u64);
        let name = format!("seq_{i:04}.ocg");
        let path = out.join(&name);
        write_grid(&generate_toy_scene(seed, &spec)?, &path)?;
        manifest.push_str(&format!("{name}\t{seed}\n"));
        files.push(path);
    }
    let mpath = out.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let warning = (cfg.toy_sequences == 0).then(|| "toy.sequences = 0: wrote an empty manifest".to_string());
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(GenToyReport { files, manifest: mpath, warning })
}

fn check_dataset(grids: &[SemanticGrid], cfg: &RunConfig, frames_multiple: bool) -> Result<()> {
    let want = cfg.vae_config().grid;
    for (i, g) in grids.iter().enumerate() {
        let d = g.dims();
        let ok_t = if frames_multiple { d.t % want.t == 0 && d.t > 0 } else { d.t == want.t };
        if !ok_t || (d.x, d.y, d.z) != (want.x, want.y, want.z) {
            return Err(Error::Dims(format!("sequence {i} is {d:?}, model expects {want:?}")));
        }
        if g.num_classes() as usize != cfg.classes {
            return Err(Error::Dims(format!("sequence {i} has {} classes, model expects {}", g.num_classes(), cfg.classes)));
        }
    }
    Ok(())
}

/// One line of the VAE loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLogRecord {
    pub step: u64,
    pub total: f64,
    pub ce: f64,
    pub lovasz: f64,
    pub kl: f64,
    pub probe_miou: Option<f64>,
}

impl VaeLogRecord {
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "step": self.step, "total": self.total, "ce": self.ce,
            "lovasz": self.lovasz, "kl": self.kl, "probe_miou": self.probe_miou,
        })
        .to_string()
    }
}

/// Mean mIoU of mean-path reconstructions.
pub fn reconstruction_miou(vae: &VaeModel, grids: &[SemanticGrid], ignore_free: bool) -> Result<f64> {
    if grids.is_empty() {
        return Err(Error::Invalid("no sequences to reconstruct".into()));
    }
    let refs: Vec<&SemanticGrid> = grids.iter().collect();
    let rec = vae.reconstruct(&refs)?;
    let mut sum = 0.0;
    for (r, g) in rec.iter().zip(grids) {
        sum += crate::metrics::miou(r, g, ignore_free)?.miou;
    }
    Ok(sum / grids.len() as f64)
}

/// Posterior means of every grid, in chunks of four.
pub fn encode_all(vae: &VaeModel, grids: &[&SemanticGrid]) -> Result<Vec<HexPlane>> {
    let mut out = Vec::with_capacity(grids.len());
    for chunk in grids.chunks(4) {
        out.extend(vae.encode_mean(chunk)?);
    }
    Ok(out)
}

pub fn build_vae(ckpt: &Checkpoint) -> Result<VaeModel> {
    if ckpt.kind != CheckpointKind::Vae {
        return Err(Error::Format("expected a VAE checkpoint".into()));
    }
    let vae = VaeModel::new(ckpt.config.vae_config(), ckpt.config.vae.seed)?;
    vae.load(&ckpt.tensors, "")?;
    Ok(vae)
}

/// Trains a VAE with the schedule of `cfg`; continues from `resume` when given.
///
/// `on_log` sees one record every `vae.log_every` steps and after the last step.
pub fn cmd_train_vae(
    cfg: &RunConfig,
    grids: &[SemanticGrid],
    resume: Option<&Checkpoint>,
    budget: Budget,
    mut on_log: impl FnMut(&VaeLogRecord),
) -> Result<(Checkpoint, Vec<VaeLogRecord>)> {
    if grids.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    check_dataset(grids, cfg, false)?;
    let model = VaeModel::new(cfg.vae_config(), cfg.vae.seed)?;
    let v = &cfg.vae;
    let mut tr = VaeTrainer::new(model, v.lr, v.alpha, v.beta, v.seed)?;
    if let Some(ck) = resume {
        if ck.config.vae_config() != cfg.vae_config() {
            return Err(Error::Config("resume checkpoint was trained with a different VAE architecture".into()));
        }
        tr.model.load(&ck.tensors, "")?;
        tr.set_step(ck.step);
    }
    let probe = &grids[..grids.len().min(PROBE_SEQUENCES)];
    let mut cache = HashMap::new();
    let mut log = Vec::new();
    while !budget.done(tr.step()) {
        let idx = batch_indices(grids.len(), v.batch, tr.step(), v.seed, &mut cache);
        let batch: Vec<&SemanticGrid> = idx.iter().map(|&i| &grids[i]).collect();
        let r = tr.train_step(&batch)?;
        let last = budget.done(tr.step());
        if r.step % v.log_every == 0 || last {
            let rec = VaeLogRecord {
                step: r.step,
                total: r.total,
                ce: r.ce,
                lovasz: r.lovasz,
                kl: r.kl,
                probe_miou: Some(reconstruction_miou(&tr.model, probe, false)?),
            };
            on_log(&rec);
            log.push(rec);
        }
    }
    let refs: Vec<&SemanticGrid> = grids.iter().collect();
    let stats = PlaneStats::fit(&encode_all(&tr.model, &refs)?)?;
    let ckpt = Checkpoint {
        kind: CheckpointKind::Vae,
        config: cfg.clone(),
        step: tr.step(),
        stats: Some(stats),
        tensors: tr.model.snapshot()?,
    };
    Ok((ckpt, log))
}

/// Mean-path HexPlanes of a dataset. With `split`, every sequence is cut into
/// consecutive windows of the VAE's frame count, named `stem#k`.
pub fn cmd_encode(vae_ckpt: &Checkpoint, data: &[(String, SemanticGrid)], split: bool) -> Result<HexPlaneArchive> {
    let vae = build_vae(vae_ckpt)?;
    let grids: Vec<SemanticGrid> = data.iter().map(|(_, g)| g.clone()).collect();
    check_dataset(&grids, &vae_ckpt.config, split)?;
    let frames = vae.config.grid.t;
    let mut names = Vec::new();
    let mut windows = Vec::new();
    for (stem, g) in data {
        if split {
            for k in 0..g.dims().t / frames {
                names.push(format!("{stem}#{k}"));
                windows.push(g.frames(k * frames, frames)?);
            }
        } else {
            names.push(stem.clone());
            windows.push(g.clone());
        }
    }
    let refs: Vec<&SemanticGrid> = windows.iter().collect();
    let mut archive = HexPlaneArchive::new(vae.latent_dims(), vae_ckpt.stats.clone());
    for (n, h) in names.into_iter().zip(encode_all(&vae, &refs)?) {
        archive.push(n, h)?;
    }
    Ok(archive)
}

pub fn cmd_decode(vae_ckpt: &Checkpoint, archive: &HexPlaneArchive) -> Result<Vec<SemanticGrid>> {
    let vae = build_vae(vae_ckpt)?;
    if archive.dims != vae.latent_dims() {
        return Err(Error::Dims(format!("archive {:?} vs VAE latent {:?}", archive.dims, vae.latent_dims())));
    }
    vae.decode(&archive.items)
}

/// One line of the denoiser loss log; `mse` averages the steps since the previous record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DitLogRecord {
    pub step: u64,
    pub mse: f64,
}

impl DitLogRecord {
    pub fn to_json(&self) -> String {
        serde_json::json!({ "step": self.step, "mse": self.mse }).to_string()
    }
}

/// Generator with the denoiser weights of a checkpoint; `ema` selects the averaged copy.
pub fn build_generator(ckpt: &Checkpoint, ema: bool) -> Result<Generator> {
    if ckpt.kind != CheckpointKind::Dit {
        return Err(Error::Format("expected a DiT checkpoint".into()));
    }
    let cfg = &ckpt.config;
    let stats = ckpt.stats.clone().ok_or_else(|| Error::Format("DiT checkpoint without statistics".into()))?;
    let dit = Dit::new(cfg.dit_config()?, cfg.dit.seed)?;
    dit.load(&ckpt.tensors, if ema { "ema." } else { "" })?;
    let mut gen = Generator::new(dit, make_schedule(cfg.dit.diffusion_steps, cfg.dit.schedule)?, stats)?;
    gen.deterministic = cfg.sample.deterministic;
    Ok(gen)
}

/// Trains the denoiser on an archive. For the forecast task, entry `2k`
/// conditions entry `2k+1`.
pub fn cmd_train_dit(
    cfg: &RunConfig,
    archive: &HexPlaneArchive,
    resume: Option<&Checkpoint>,
    budget: Budget,
    mut on_log: impl FnMut(&DitLogRecord),
) -> Result<(Checkpoint, Vec<DitLogRecord>)> {
    let dims = cfg.latent_dims()?;
    if archive.dims != dims {
        return Err(Error::Dims(format!("archive {:?} vs configured latent {:?}", archive.dims, dims)));
    }
    if archive.is_empty() {
        return Err(Error::Invalid("empty archive".into()));
    }
    let stats = match &archive.stats {
        Some(s) => s.clone(),
        None => PlaneStats::fit(&archive.items)?,
    };
    let (targets, contexts): (Vec<&HexPlane>, Vec<Option<&HexPlane>>) = match cfg.dit.task {
        DitTask::Uncond => (archive.items.iter().collect(), vec![None; archive.len()]),
        DitTask::Forecast => {
            if archive.len() < 2 || archive.len() % 2 != 0 {
                return Err(Error::Invalid(format!("forecast training needs pairs, archive has {} entries", archive.len())));
            }
            archive.items.chunks(2).map(|p| (&p[1], Some(&p[0]))).unzip()
        }
    };
    let gen = Generator::new(Dit::new(cfg.dit_config()?, cfg.dit.seed)?, make_schedule(cfg.dit.diffusion_steps, cfg.dit.schedule)?, stats)?;
    let mut tr = DitTrainer::new(gen, cfg.dit_train_config())?;
    if let Some(ck) = resume {
        if ck.config.dit_config()? != cfg.dit_config()? {
            return Err(Error::Config("resume checkpoint was trained with a different DiT architecture".into()));
        }
        tr.gen.dit.load(&ck.tensors, "")?;
        tr.ema.load(&ck.tensors, &tr.gen.dit.params, "ema.")?;
        tr.set_step(ck.step);
    }
    let mut cache = HashMap::new();
    let mut log = Vec::new();
    let (mut acc, mut n_acc) = (0.0, 0usize);
    while !budget.done(tr.step()) {
        let idx = batch_indices(targets.len(), cfg.dit.batch, tr.step(), cfg.dit.seed, &mut cache);
        let batch: Vec<HexPlane> = idx.iter().map(|&i| targets[i].clone()).collect();
        let conds: Vec<ConditionBundle> = match cfg.dit.task {
            DitTask::Uncond => Vec::new(),
            DitTask::Forecast => idx.iter().map(|&i| ConditionBundle::none().with_hexplane(contexts[i].unwrap().clone())).collect(),
        };
        let r = tr.train_step(&batch, &conds)?;
        if !r.skipped {
            acc += r.mse;
            n_acc += 1;
        }
        if r.step % cfg.dit.log_every == 0 || budget.done(tr.step()) {
            let rec = DitLogRecord { step: r.step, mse: if n_acc > 0 { acc / n_acc as f64 } else { f64::NAN } };
            on_log(&rec);
            log.push(rec);
            (acc, n_acc) = (0.0, 0);
        }
    }
    let mut tensors = tr.gen.dit.snapshot()?;
    tensors.extend(tr.ema.snapshot(&tr.gen.dit.params)?.into_iter().map(|t| NamedTensor { name: format!("ema.{}", t.name), ..t }));
    let ckpt = Checkpoint { kind: CheckpointKind::Dit, config: cfg.clone(), step: tr.step(), stats: Some(tr.gen.stats.clone()), tensors };
    Ok((ckpt, log))
}

fn check_pair(vae: &VaeModel, gen: &Generator) -> Result<()> {
    if vae.latent_dims() != gen.dims() {
        return Err(Error::Dims(format!("VAE latent {:?} vs denoiser {:?}", vae.latent_dims(), gen.dims())));
    }
    Ok(())
}

/// `n` decoded samples with seeds `seed, seed+1, …`.
pub fn cmd_sample(vae: &VaeModel, gen: &Generator, cond: Option<&ConditionBundle>, w: f64, seed: u64, n: usize) -> Result<Vec<SemanticGrid>> {
    check_pair(vae, gen)?;
    let hs = (0..n).map(|i| gen.sample(cond, w, seed.wrapping_add(i as u64))).collect::<Result<Vec<_>>>()?;
    vae.decode(&hs)
}

/// Encodes `input`, regenerates the masked region and decodes.
pub fn cmd_inpaint(
    vae: &VaeModel,
    gen: &Generator,
    input: &SemanticGrid,
    mask: &InpaintMask,
    cond: Option<&ConditionBundle>,
    w: f64,
    seed: u64,
) -> Result<SemanticGrid> {
    check_pair(vae, gen)?;
    let h = vae.encode_mean(&[input])?.remove(0);
    Ok(vae.decode(&[inpaint(gen, &h, mask, cond, w, seed)?])?.remove(0))
}

pub fn cmd_outpaint(
    vae: &VaeModel,
    gen: &Generator,
    input: &SemanticGrid,
    shift_cells: usize,
    cond: Option<&ConditionBundle>,
    w: f64,
    seed: u64,
) -> Result<SemanticGrid> {
    check_pair(vae, gen)?;
    let h = vae.encode_mean(&[input])?.remove(0);
    Ok(vae.decode(&[outpaint(gen, &h, shift_cells, cond, w, seed)?])?.remove(0))
}

pub fn cmd_forecast(vae: &VaeModel, gen: &Generator, context: &SemanticGrid, w: f64, seed: u64) -> Result<SemanticGrid> {
    check_pair(vae, gen)?;
    forecast(gen, vae, context, w, seed)
}

/// Encoder features pooled per plane and channel: `6·C` values per sequence.
pub fn vae_features(vae: &VaeModel, grids: &[&SemanticGrid], source: FeatureSource) -> Result<FeatureSet> {
    let hs = encode_all(vae, grids)?;
    let rows: Vec<Vec<f64>> = hs
        .iter()
        .map(|h| {
            let c = h.dims().channels;
            let mut row = Vec::with_capacity(6 * c);
            for k in PlaneKind::ALL {
                let p = h.plane(k);
                let cells = (p.rows * p.cols) as f64;
                let mut sums = vec![0.0f64; c];
                for cell in p.data.chunks_exact(c) {
                    for (s, &v) in sums.iter_mut().zip(cell) {
                        *s += v as f64;
                    }
                }
                row.extend(sums.into_iter().map(|s| s / cells));
            }
            row
        })
        .collect();
    FeatureSet::from_rows(&rows, source)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pairs: usize,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub fid: Option<f64>,
    pub kid: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl EvalReport {
    /// `key = value` lines; absent values print as `n/a`.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
        let mut s = format!("pairs = {}\nmiou = {:.6}\n", self.pairs, self.miou);
        for (c, v) in self.per_class.iter().enumerate() {
            s.push_str(&format!("iou.{c} = {}\n", opt(*v)));
        }
        s.push_str(&format!(
            "fid = {}\nkid = {}\nprecision = {}\nrecall = {}\n",
            opt(self.fid),
            opt(self.kid),
            opt(self.precision),
            opt(self.recall)
        ));
        s
    }
}

/// mIoU over paired sequences, plus distribution metrics on pooled VAE
/// features when a VAE is given and there are enough sequences.
pub fn cmd_eval(pred: &[SemanticGrid], truth: &[SemanticGrid], vae: Option<&VaeModel>, ignore_free: bool) -> Result<EvalReport> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} references", pred.len(), truth.len())));
    }
    let mut acc = IoUAccumulator::new(truth[0].num_classes() as usize, ignore_free);
    for (p, t) in pred.iter().zip(truth) {
        acc.add(p, t)?;
    }
    let iou = acc.report();
    let mut report =
        EvalReport { pairs: pred.len(), miou: iou.miou, per_class: iou.per_class, fid: None, kid: None, precision: None, recall: None };
    if let Some(vae) = vae {
        if pred.len() >= 2 {
            let fr = vae_features(vae, &truth.iter().collect::<Vec<_>>(), FeatureSource::Real)?;
            let fg = vae_features(vae, &pred.iter().collect::<Vec<_>>(), FeatureSource::Generated)?;
            report.fid = Some(fid(&fr, &fg)?);
            report.kid = Some(kid(&fr, &fg, 1.0, 3)?);
            if pred.len() > fr.d {
                let (p, r) = precision_recall(&fr, &fg, 0.95)?;
                report.precision = Some(p);
                report.recall = Some(r);
            }
        }
    }
    Ok(report)
}
