//! `hexocc` command-line tool.
//!
//! Exit codes: 0 on success, 2 on configuration or usage errors, 3 on data errors.
//! Relative paths resolve against `$HEXOCC_RUN_DIR` (default: the working
//! directory), and every successful run writes a record under `records/` there.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use hexocc::conditioning::{extract_layout, Command, ConditionBundle, InpaintMask, Layout};
use hexocc::diffusion::Generator;
use hexocc::harness::{
    build_generator, build_vae, cmd_decode, cmd_encode, cmd_eval, cmd_forecast, cmd_gen_toy, cmd_inpaint, cmd_outpaint,
    cmd_sample, cmd_train_dit, cmd_train_vae, parse_trajectory, read_dataset, BoolRaster, Budget, Checkpoint,
    CheckpointKind, HexPlaneArchive, RunConfig, RunDir, RunRecord,
};
use hexocc::occgrid::{read_grid, render_bev, render_bev_strip, toy_class, write_grid, ClassMap, SemanticGrid};
use hexocc::vae::VaeModel;
use hexocc::{Error, Result};

#[derive(Parser)]
#[command(name = "hexocc", version, about = "4D semantic occupancy generation with HexPlane latents")]
struct Cli {
    /// Config file of `key = value` lines; defaults to the desk preset.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key; repeatable and applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Single-threaded numerics so that reruns are bit-identical.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic driving dataset.
    GenToy(GenToyArgs),
    /// Train the HexPlane VAE.
    TrainVae(TrainVaeArgs),
    /// Encode a dataset into a HexPlane archive.
    Encode(EncodeArgs),
    /// Decode a HexPlane archive back to occupancy sequences.
    Decode(DecodeArgs),
    /// Train the diffusion transformer on a HexPlane archive.
    TrainDit(TrainDitArgs),
    /// Sample new sequences.
    Sample(SampleArgs),
    /// Regenerate a masked XY region of a sequence.
    Inpaint(InpaintArgs),
    /// Shift a sequence along X and generate the uncovered strip.
    Outpaint(OutpaintArgs),
    /// Predict the sequence that follows an observed one.
    Forecast(ForecastArgs),
    /// Compare predictions to references.
    Eval(EvalArgs),
    /// Render a sequence as a bird's-eye PNG.
    RenderBev(RenderArgs),
}

#[derive(Args)]
struct GenToyArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of sequences (overrides toy.sequences).
    #[arg(long)]
    n: Option<usize>,
    /// Seed of the first sequence (overrides toy.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop at this step (overrides the configured step count).
    #[arg(long)]
    steps: Option<u64>,
    /// Wall-clock limit; the checkpoint is written when it runs out.
    #[arg(long)]
    minutes: Option<f64>,
    /// JSON-lines loss log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainVaeArgs {
    /// Dataset directory of .ocg files (overrides data.dir).
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    vae: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Cut each sequence into consecutive windows of the VAE length.
    #[arg(long)]
    split: bool,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    vae: PathBuf,
    #[arg(long)]
    archive: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write a BEV strip per sequence.
    #[arg(long)]
    png: bool,
}

#[derive(Args)]
struct TrainDitArgs {
    #[arg(long)]
    archive: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    vae: PathBuf,
    #[arg(long)]
    dit: PathBuf,
    /// Guidance scale (overrides sample.w).
    #[arg(long, allow_hyphen_values = true)]
    w: Option<f64>,
    /// Sampling seed (overrides sample.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Use the raw weights instead of their moving average.
    #[arg(long)]
    no_ema: bool,
    /// Also write a BEV strip next to each output.
    #[arg(long)]
    png: bool,
}

#[derive(Args)]
struct CondArgs {
    /// Driving command: STATIC, FORWARD, TURN_LEFT or TURN_RIGHT.
    #[arg(long = "command")]
    command: Option<String>,
    /// CSV of `t,x,y` ego positions, one row per frame.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Layout raster `(t, x, y)` at latent resolution.
    #[arg(long, conflicts_with = "layout_from")]
    layout: Option<PathBuf>,
    /// Extract the layout from the vehicles of this sequence.
    #[arg(long)]
    layout_from: Option<PathBuf>,
    /// Class id treated as vehicle by --layout-from.
    #[arg(long, default_value_t = toy_class::VEHICLE)]
    vehicle_class: u8,
    /// Condition on the encoding of this sequence.
    #[arg(long)]
    cond_grid: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    gen: GenArgs,
    #[command(flatten)]
    cond: CondArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    n: usize,
}

#[derive(Args)]
struct InpaintArgs {
    #[command(flatten)]
    gen: GenArgs,
    #[command(flatten)]
    cond: CondArgs,
    #[arg(long)]
    input: PathBuf,
    /// Mask raster `(x, y)` at latent resolution.
    #[arg(long, conflicts_with = "rect", required_unless_present = "rect")]
    mask: Option<PathBuf>,
    /// Rectangular mask `x0..x1,y0..y1` in latent cells, half-open.
    #[arg(long)]
    rect: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OutpaintArgs {
    #[command(flatten)]
    gen: GenArgs,
    #[command(flatten)]
    cond: CondArgs,
    #[arg(long)]
    input: PathBuf,
    /// Shift along X in latent cells.
    #[arg(long)]
    shift: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ForecastArgs {
    #[command(flatten)]
    gen: GenArgs,
    /// Observed sequence.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted sequences, paired with --truth in name order.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// VAE whose features feed FID, KID, precision and recall.
    #[arg(long)]
    vae: Option<PathBuf>,
    /// Leave the free class out of the mIoU.
    #[arg(long)]
    ignore_free: bool,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Render one frame instead of the whole strip.
    #[arg(long)]
    frame: Option<usize>,
}

struct Ctx {
    run: RunDir,
    cfg: RunConfig,
    seeds: Vec<(String, u64)>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.run.resolve(p)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if cli.deterministic {
        // Read by the matrix kernels on first use.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    hexocc::nn::tune_allocator();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

/// Config file text with the `--set` overrides replacing its keys, parsed in one
/// pass so that an overridden `preset` selects the base values.
fn load_config(run: &RunDir, cli: &Cli) -> Result<RunConfig> {
    let text = match &cli.config {
        Some(p) => {
            let p = run.resolve(p);
            fs::read_to_string(&p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?
        }
        None => String::new(),
    };
    let mut overrides = Vec::new();
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let key_of = |line: &str| line.split('#').next().unwrap_or("").split('=').next().unwrap_or("").trim().to_string();
    let mut merged: Vec<String> =
        text.lines().filter(|l| !overrides.iter().any(|(k, _)| *k == key_of(l))).map(str::to_string).collect();
    merged.extend(overrides.iter().map(|(k, v)| format!("{k} = {v}")));
    RunConfig::parse(&merged.join("\n"))
}

fn run(cli: Cli) -> Result<()> {
    let run = RunDir::from_env();
    let cfg = load_config(&run, &cli)?;
    let mut ctx = Ctx { run, cfg, seeds: Vec::new() };
    let command = match &cli.cmd {
        Cmd::GenToy(a) => gen_toy(&mut ctx, a).map(|_| "gen-toy"),
        Cmd::TrainVae(a) => train_vae(&mut ctx, a).map(|_| "train-vae"),
        Cmd::Encode(a) => encode(&mut ctx, a).map(|_| "encode"),
        Cmd::Decode(a) => decode(&mut ctx, a).map(|_| "decode"),
        Cmd::TrainDit(a) => train_dit(&mut ctx, a).map(|_| "train-dit"),
        Cmd::Sample(a) => sample(&mut ctx, a).map(|_| "sample"),
        Cmd::Inpaint(a) => inpaint_cmd(&mut ctx, a).map(|_| "inpaint"),
        Cmd::Outpaint(a) => outpaint_cmd(&mut ctx, a).map(|_| "outpaint"),
        Cmd::Forecast(a) => forecast_cmd(&mut ctx, a).map(|_| "forecast"),
        Cmd::Eval(a) => eval(&mut ctx, a).map(|_| "eval"),
        Cmd::RenderBev(a) => render(&mut ctx, a).map(|_| "render-bev"),
    }?;
    let record = RunRecord {
        command: command.to_string(),
        args: std::env::args().skip(1).collect(),
        config: ctx.cfg.clone(),
        seeds: ctx.seeds,
        deterministic: cli.deterministic,
    };
    let path = record.write(&ctx.run.0)?;
    log::info!("run record: {}", path.display());
    Ok(())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

fn dataset(ctx: &Ctx, arg: &Option<PathBuf>) -> Result<Vec<(String, SemanticGrid)>> {
    let dir = arg
        .clone()
        .or_else(|| ctx.cfg.data_dir.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data or set data.dir".into()))?;
    let data = read_dataset(ctx.path(&dir))?;
    if data.is_empty() {
        return Err(Error::Invalid(format!("no .ocg files in {}", dir.display())));
    }
    Ok(data)
}

fn budget(a: &TrainArgs, configured: u64) -> Budget {
    Budget {
        until_step: a.steps.unwrap_or(configured),
        deadline: a.minutes.map(|m| Instant::now() + Duration::from_secs_f64(m.max(0.0) * 60.0)),
    }
}

fn resume(ctx: &Ctx, a: &TrainArgs, kind: CheckpointKind) -> Result<Option<Checkpoint>> {
    a.resume.as_ref().map(|p| Checkpoint::load(ctx.path(p), kind)).transpose()
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_output(grid: &SemanticGrid, path: &Path, png: bool) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    write_grid(grid, path)?;
    if png {
        let png_path = path.with_extension("png");
        render_bev_strip(grid, &ClassMap::toy())?.save(&png_path).map_err(|e| io_err(&png_path, e))?;
    }
    Ok(())
}

fn gen_toy(ctx: &mut Ctx, a: &GenToyArgs) -> Result<()> {
    if let Some(n) = a.n {
        ctx.cfg.toy_sequences = n;
    }
    if let Some(s) = a.seed {
        ctx.cfg.toy_seed = s;
    }
    ctx.cfg.validate()?;
    ctx.seeds.push(("toy".into(), ctx.cfg.toy_seed));
    let rep = cmd_gen_toy(&ctx.cfg, &ctx.path(&a.out), a.force)?;
    if let Some(w) = &rep.warning {
        log::warn!("{w}");
    }
    println!("wrote {} sequences, manifest {}", rep.files.len(), rep.manifest.display());
    Ok(())
}

fn train_vae(ctx: &mut Ctx, a: &TrainVaeArgs) -> Result<()> {
    let data = dataset(ctx, &a.data)?;
    let grids: Vec<SemanticGrid> = data.into_iter().map(|(_, g)| g).collect();
    let prior = resume(ctx, &a.train, CheckpointKind::Vae)?;
    let b = budget(&a.train, ctx.cfg.vae.steps);
    ctx.cfg.vae.steps = b.until_step;
    ctx.seeds.push(("vae".into(), ctx.cfg.vae.seed));
    let (ck, log) = cmd_train_vae(&ctx.cfg, &grids, prior.as_ref(), b, |r| log::info!("{}", r.to_json()))?;
    ck.save(ctx.path(&a.train.out))?;
    if let Some(p) = &a.train.log {
        write_lines(&ctx.path(p), &log.iter().map(|r| r.to_json()).collect::<Vec<_>>())?;
    }
    println!("vae checkpoint at step {}", ck.step);
    Ok(())
}

fn encode(ctx: &mut Ctx, a: &EncodeArgs) -> Result<()> {
    let ck = Checkpoint::load(ctx.path(&a.vae), CheckpointKind::Vae)?;
    let data = dataset(ctx, &a.data)?;
    let arch = cmd_encode(&ck, &data, a.split)?;
    arch.save(ctx.path(&a.out))?;
    println!("encoded {} HexPlanes", arch.len());
    Ok(())
}

fn decode(ctx: &mut Ctx, a: &DecodeArgs) -> Result<()> {
    let ck = Checkpoint::load(ctx.path(&a.vae), CheckpointKind::Vae)?;
    let arch = HexPlaneArchive::load(ctx.path(&a.archive))?;
    let grids = cmd_decode(&ck, &arch)?;
    let out = ctx.path(&a.out);
    for (name, g) in arch.names.iter().zip(&grids) {
        write_output(g, &out.join(format!("{name}.ocg")), a.png)?;
    }
    println!("decoded {} sequences", grids.len());
    Ok(())
}

fn train_dit(ctx: &mut Ctx, a: &TrainDitArgs) -> Result<()> {
    let arch = HexPlaneArchive::load(ctx.path(&a.archive))?;
    let prior = resume(ctx, &a.train, CheckpointKind::Dit)?;
    let b = budget(&a.train, ctx.cfg.dit.steps);
    ctx.cfg.dit.steps = b.until_step;
    ctx.seeds.push(("dit".into(), ctx.cfg.dit.seed));
    let (ck, log) = cmd_train_dit(&ctx.cfg, &arch, prior.as_ref(), b, |r| log::info!("{}", r.to_json()))?;
    ck.save(ctx.path(&a.train.out))?;
    if let Some(p) = &a.train.log {
        write_lines(&ctx.path(p), &log.iter().map(|r| r.to_json()).collect::<Vec<_>>())?;
    }
    println!("dit checkpoint at step {}", ck.step);
    Ok(())
}

/// Loads both models and folds the sampling overrides into the config.
fn models(ctx: &mut Ctx, a: &GenArgs) -> Result<(VaeModel, Generator)> {
    let vae = build_vae(&Checkpoint::load(ctx.path(&a.vae), CheckpointKind::Vae)?)?;
    let mut gen = build_generator(&Checkpoint::load(ctx.path(&a.dit), CheckpointKind::Dit)?, !a.no_ema)?;
    if let Some(w) = a.w {
        ctx.cfg.set("sample.w", &w.to_string())?;
    }
    if let Some(s) = a.seed {
        ctx.cfg.sample.seed = s;
    }
    gen.deterministic = ctx.cfg.sample.deterministic;
    ctx.seeds.push(("sample".into(), ctx.cfg.sample.seed));
    Ok((vae, gen))
}

fn conditions(ctx: &Ctx, a: &CondArgs, vae: &VaeModel) -> Result<Option<ConditionBundle>> {
    let mut b = ConditionBundle::none();
    if let Some(c) = &a.command {
        b = b.with_command(c.parse::<Command>().map_err(|e| Error::Config(e.to_string()))?);
    }
    if let Some(p) = &a.trajectory {
        let p = ctx.path(p);
        let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        b = b.with_trajectory(parse_trajectory(&text)?);
    }
    let dims = vae.latent_dims();
    if let Some(p) = &a.layout {
        let r = BoolRaster::read(ctx.path(p))?;
        if r.shape.len() != 3 {
            return Err(Error::Shape(format!("layout raster has rank {}, expected 3", r.shape.len())));
        }
        let l = Layout { t: r.shape[0], x: r.shape[1], y: r.shape[2], cells: r.cells };
        l.check(&dims)?;
        b = b.with_layout(l);
    }
    if let Some(p) = &a.layout_from {
        b = b.with_layout(extract_layout(&read_grid(ctx.path(p))?, a.vehicle_class, &dims)?);
    }
    if let Some(p) = &a.cond_grid {
        let g = read_grid(ctx.path(p))?;
        b = b.with_hexplane(vae.encode_mean(&[&g])?.remove(0));
    }
    Ok((!b.is_empty()).then_some(b))
}

fn sample(ctx: &mut Ctx, a: &SampleArgs) -> Result<()> {
    let (vae, gen) = models(ctx, &a.gen)?;
    let cond = conditions(ctx, &a.cond, &vae)?;
    let s = &ctx.cfg.sample;
    let grids = cmd_sample(&vae, &gen, cond.as_ref(), s.w, s.seed, a.n)?;
    let out = ctx.path(&a.out);
    for (i, g) in grids.iter().enumerate() {
        write_output(g, &out.join(format!("sample_{i:04}.ocg")), a.gen.png)?;
    }
    println!("wrote {} samples to {}", grids.len(), out.display());
    Ok(())
}

fn parse_rect(s: &str, x: usize, y: usize) -> Result<InpaintMask> {
    let bad = || Error::Config(format!("--rect expects x0..x1,y0..y1, got {s:?}"));
    let range = |r: &str| -> Result<(usize, usize)> {
        let (lo, hi) = r.trim().split_once("..").ok_or_else(bad)?;
        Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
    };
    let (rx, ry) = s.split_once(',').ok_or_else(bad)?;
    let ((x0, x1), (y0, y1)) = (range(rx)?, range(ry)?);
    if x0 > x1 || y0 > y1 || x1 > x || y1 > y {
        return Err(Error::Config(format!("--rect {s:?} outside the {x}x{y} latent grid")));
    }
    let mut m = InpaintMask::empty(x, y);
    for i in x0..x1 {
        for j in y0..y1 {
            m.cells[i * y + j] = true;
        }
    }
    Ok(m)
}

fn inpaint_cmd(ctx: &mut Ctx, a: &InpaintArgs) -> Result<()> {
    let (vae, gen) = models(ctx, &a.gen)?;
    let cond = conditions(ctx, &a.cond, &vae)?;
    let d = vae.latent_dims();
    let mask = match (&a.mask, &a.rect) {
        (Some(p), _) => {
            let r = BoolRaster::read(ctx.path(p))?;
            if r.shape.len() != 2 {
                return Err(Error::Shape(format!("mask raster has rank {}, expected 2", r.shape.len())));
            }
            InpaintMask::new(r.shape[0], r.shape[1], r.cells)?
        }
        (None, Some(s)) => parse_rect(s, d.x, d.y)?,
        (None, None) => return Err(Error::Config("pass --mask or --rect".into())),
    };
    let input = read_grid(ctx.path(&a.input))?;
    let s = &ctx.cfg.sample;
    let out = cmd_inpaint(&vae, &gen, &input, &mask, cond.as_ref(), s.w, s.seed)?;
    write_output(&out, &ctx.path(&a.out), a.gen.png)
}

fn outpaint_cmd(ctx: &mut Ctx, a: &OutpaintArgs) -> Result<()> {
    let (vae, gen) = models(ctx, &a.gen)?;
    let cond = conditions(ctx, &a.cond, &vae)?;
    let input = read_grid(ctx.path(&a.input))?;
    let s = &ctx.cfg.sample;
    let out = cmd_outpaint(&vae, &gen, &input, a.shift, cond.as_ref(), s.w, s.seed)?;
    write_output(&out, &ctx.path(&a.out), a.gen.png)
}

fn forecast_cmd(ctx: &mut Ctx, a: &ForecastArgs) -> Result<()> {
    let (vae, gen) = models(ctx, &a.gen)?;
    let input = read_grid(ctx.path(&a.input))?;
    let s = &ctx.cfg.sample;
    let out = cmd_forecast(&vae, &gen, &input, s.w, s.seed)?;
    write_output(&out, &ctx.path(&a.out), a.gen.png)
}

fn eval(ctx: &mut Ctx, a: &EvalArgs) -> Result<()> {
    let load = |p: &Path| -> Result<Vec<SemanticGrid>> {
        Ok(read_dataset(ctx.path(p))?.into_iter().map(|(_, g)| g).collect())
    };
    let (pred, truth) = (load(&a.pred)?, load(&a.truth)?);
    let vae = a.vae.as_ref().map(|p| build_vae(&Checkpoint::load(ctx.path(p), CheckpointKind::Vae)?)).transpose()?;
    let rep = cmd_eval(&pred, &truth, vae.as_ref(), a.ignore_free)?;
    let text = rep.to_text();
    print!("{text}");
    if let Some(p) = &a.out {
        let p = ctx.path(p);
        fs::write(&p, &text).map_err(|e| io_err(&p, e))?;
    }
    Ok(())
}

fn render(ctx: &mut Ctx, a: &RenderArgs) -> Result<()> {
    let g = read_grid(ctx.path(&a.input))?;
    let cm = ClassMap::toy();
    let img = match a.frame {
        Some(t) => render_bev(&g, t, &cm)?,
        None => render_bev_strip(&g, &cm)?,
    };
    let out = ctx.path(&a.out);
    img.save(&out).map_err(|e| io_err(&out, e))
}
