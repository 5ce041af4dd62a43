use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::hexplane::{HexPlane, Plane, PlaneDims, PlaneKind, PlaneStats, Rates};
use crate::nn::NamedTensor;
use crate::occgrid::{read_grid, SemanticGrid};

pub const FORMAT_NAME: &str = "hexocc";
pub const FORMAT_VERSION: &str = "1";

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes named f32 tensors plus string metadata as a safetensors file.
fn write_container(path: &Path, kind: &str, tensors: &[NamedTensor], mut meta: HashMap<String, String>) -> Result<()> {
    meta.insert("format".into(), FORMAT_NAME.into());
    meta.insert("format_version".into(), FORMAT_VERSION.into());
    meta.insert("kind".into(), kind.into());
    let bytes: Vec<Vec<u8>> = tensors.iter().map(|t| f32_bytes(&t.data)).collect();
    let views = tensors
        .iter()
        .zip(&bytes)
        .map(|(t, b)| Ok((t.name.clone(), TensorView::new(Dtype::F32, t.shape.clone(), b).map_err(fmt_err)?)))
        .collect::<Result<Vec<_>>>()?;
    let out = safetensors::serialize(views, Some(meta)).map_err(fmt_err)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn fmt_err(e: safetensors::SafeTensorError) -> Error {
    Error::Format(e.to_string())
}

/// Reads a container of `kind`. Anything that is not a readable container of
/// the current format version is a version error.
fn read_container(path: &Path, kind: &str) -> Result<(Vec<NamedTensor>, HashMap<String, String>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let unreadable = |why: String| Error::Version { expected: format!("{FORMAT_NAME} v{FORMAT_VERSION}"), found: why };
    let st = SafeTensors::deserialize(&bytes).map_err(|e| unreadable(format!("unreadable container ({e})")))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| unreadable(e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    if meta.get("format").map(String::as_str) != Some(FORMAT_NAME) {
        return Err(unreadable("no format tag".into()));
    }
    match meta.get("format_version") {
        Some(v) if v == FORMAT_VERSION => {}
        other => return Err(unreadable(format!("version {}", other.map_or("none", |v| v.as_str())))),
    }
    if meta.get("kind").map(String::as_str) != Some(kind) {
        return Err(Error::Format(format!("{} holds {:?}, expected {kind}", path.display(), meta.get("kind"))));
    }
    let mut tensors = Vec::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Format(format!("tensor {name} is {:?}, expected F32", view.dtype())));
        }
        let data = view.data().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(NamedTensor { name, shape: view.shape().to_vec(), data });
    }
    tensors.sort_by(|a, b| a.name.cmp(&b.name));
    Ok((tensors, meta))
}

fn meta_get<'a>(meta: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key).map(String::as_str).ok_or_else(|| Error::Format(format!("missing metadata {key:?}")))
}

fn meta_num<T: std::str::FromStr>(meta: &HashMap<String, String>, key: &str) -> Result<T> {
    let v = meta_get(meta, key)?;
    v.parse().map_err(|_| Error::Format(format!("metadata {key:?}: cannot parse {v:?}")))
}

fn stats_tensors(s: &PlaneStats) -> [NamedTensor; 2] {
    let shape = vec![6, s.channels];
    [
        NamedTensor { name: "stats.mean".into(), shape: shape.clone(), data: s.mean.clone() },
        NamedTensor { name: "stats.std".into(), shape, data: s.std.clone() },
    ]
}

fn take_stats(tensors: &mut Vec<NamedTensor>) -> Result<Option<PlaneStats>> {
    let pos = |ts: &[NamedTensor], n: &str| ts.iter().position(|t| t.name == n);
    match (pos(tensors, "stats.mean"), pos(tensors, "stats.std")) {
        (None, None) => Ok(None),
        (Some(_), Some(_)) => {
            let m = tensors.remove(pos(tensors, "stats.mean").unwrap());
            let s = tensors.remove(pos(tensors, "stats.std").unwrap());
            if m.shape.len() != 2 || m.shape[0] != 6 || m.shape != s.shape {
                return Err(Error::Format(format!("statistics of shape {:?}", m.shape)));
            }
            if s.data.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Format("non-positive standard deviation in statistics".into()));
            }
            Ok(Some(PlaneStats { mean: m.data, std: s.data, channels: m.shape[1] }))
        }
        _ => Err(Error::Format("statistics need both mean and std".into())),
    }
}

/// Which model a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Vae,
    Dit,
}

impl CheckpointKind {
    fn tag(self) -> &'static str {
        match self {
            CheckpointKind::Vae => "vae",
            CheckpointKind::Dit => "dit",
        }
    }
}

/// Model weights with the config that built them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: RunConfig,
    pub step: u64,
    /// HexPlane normalization for diffusion.
    pub stats: Option<PlaneStats>,
    /// Model weights, plus `ema.`-prefixed averages for denoisers.
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors = self.tensors.clone();
        if let Some(s) = &self.stats {
            tensors.extend(stats_tensors(s));
        }
        let meta = HashMap::from([
            ("config".to_string(), self.config.to_text()),
            ("step".to_string(), self.step.to_string()),
        ]);
        write_container(path.as_ref(), self.kind.tag(), &tensors, meta)
    }

    pub fn load(path: impl AsRef<Path>, kind: CheckpointKind) -> Result<Self> {
        let (mut tensors, meta) = read_container(path.as_ref(), kind.tag())?;
        let config = RunConfig::parse(meta_get(&meta, "config")?)
            .map_err(|e| Error::Format(format!("stored config does not validate: {e}")))?;
        let step = meta_num(&meta, "step")?;
        let stats = take_stats(&mut tensors)?;
        Ok(Self { kind, config, step, stats, tensors })
    }
}

/// A list of HexPlanes sharing dims, with the normalization they came with.
#[derive(Debug, Clone, PartialEq)]
pub struct HexPlaneArchive {
    pub dims: PlaneDims,
    pub stats: Option<PlaneStats>,
    /// Source name of each entry, typically the sequence file stem.
    pub names: Vec<String>,
    pub items: Vec<HexPlane>,
}

fn dims_text(d: &PlaneDims) -> String {
    let r = d.rates;
    format!("{},{},{},{},{},{},{},{},{}", d.t, d.x, d.y, d.z, d.channels, r.t, r.x, r.y, r.z)
}

fn parse_dims(s: &str) -> Result<PlaneDims> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Format(format!("bad dims {s:?}"))))
        .collect::<Result<_>>()?;
    if v.len() != 9 || v.iter().any(|&n| n == 0) {
        return Err(Error::Format(format!("bad dims {s:?}")));
    }
    Ok(PlaneDims { t: v[0], x: v[1], y: v[2], z: v[3], channels: v[4], rates: Rates::new(v[5], v[6], v[7], v[8]) })
}

impl HexPlaneArchive {
    pub fn new(dims: PlaneDims, stats: Option<PlaneStats>) -> Self {
        Self { dims, stats, names: Vec::new(), items: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, h: HexPlane) -> Result<()> {
        if h.dims() != self.dims {
            return Err(Error::Dims(format!("HexPlane {:?} in an archive of {:?}", h.dims(), self.dims)));
        }
        self.names.push(name.into());
        self.items.push(h);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors = Vec::with_capacity(6 * self.items.len() + 2);
        for (i, h) in self.items.iter().enumerate() {
            for k in PlaneKind::ALL {
                let p = h.plane(k);
                tensors.push(NamedTensor {
                    name: format!("{i:06}.{}", k.name()),
                    shape: vec![p.rows, p.cols, p.channels],
                    data: p.data.clone(),
                });
            }
        }
        if let Some(s) = &self.stats {
            tensors.extend(stats_tensors(s));
        }
        let names = serde_json::to_string(&self.names).map_err(|e| Error::Format(e.to_string()))?;
        let meta = HashMap::from([
            ("dims".to_string(), dims_text(&self.dims)),
            ("count".to_string(), self.items.len().to_string()),
            ("names".to_string(), names),
        ]);
        write_container(path.as_ref(), "hexplanes", &tensors, meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (mut tensors, meta) = read_container(path.as_ref(), "hexplanes")?;
        let dims = parse_dims(meta_get(&meta, "dims")?)?;
        let count: usize = meta_num(&meta, "count")?;
        let names: Vec<String> =
            serde_json::from_str(meta_get(&meta, "names")?).map_err(|e| Error::Format(format!("names: {e}")))?;
        if names.len() != count {
            return Err(Error::Format(format!("{} names for {count} entries", names.len())));
        }
        let stats = take_stats(&mut tensors)?;
        let mut by_name: HashMap<String, NamedTensor> = tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let mut items = Vec::with_capacity(count);
        for i in 0..count {
            let planes = PlaneKind::ALL.map(|k| by_name.remove(&format!("{i:06}.{}", k.name())));
            if planes.iter().any(Option::is_none) {
                return Err(Error::Format(format!("entry {i} is missing planes")));
            }
            let planes = planes.map(|t| {
                let t = t.unwrap();
                let (r, c, ch) = match t.shape.as_slice() {
                    [r, c, ch] => (*r, *c, *ch),
                    _ => (0, 0, 0),
                };
                Plane { rows: r, cols: c, channels: ch, data: t.data }
            });
            items.push(HexPlane::new(dims, planes)?);
        }
        if !by_name.is_empty() {
            return Err(Error::Format(format!("{} unexpected tensors in archive", by_name.len())));
        }
        Ok(Self { dims, stats, names, items })
    }
}

pub const RASTER_MAGIC: &[u8; 4] = b"OCB1";
pub const RASTER_VERSION: u8 = 1;

/// Boolean raster: magic `OCB1`, version byte, rank byte (2 or 3), `rank`
/// little-endian u32 extents, then one 0/1 byte per cell in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolRaster {
    pub shape: Vec<usize>,
    pub cells: Vec<bool>,
}

impl BoolRaster {
    pub fn encode(&self) -> Result<Vec<u8>> {
        if !(2..=3).contains(&self.shape.len()) || self.shape.iter().product::<usize>() != self.cells.len() {
            return Err(Error::Shape(format!("raster of shape {:?} with {} cells", self.shape, self.cells.len())));
        }
        let mut out = Vec::with_capacity(6 + 4 * self.shape.len() + self.cells.len());
        out.extend_from_slice(RASTER_MAGIC);
        out.push(RASTER_VERSION);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| Error::Dims(format!("extent {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend(self.cells.iter().map(|&c| c as u8));
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 {
            return Err(Error::Truncated { expected: 6, found: bytes.len() });
        }
        if &bytes[..4] != RASTER_MAGIC {
            return Err(Error::Format("bad raster magic".into()));
        }
        if bytes[4] != RASTER_VERSION {
            return Err(Error::Format(format!("unsupported raster version {}", bytes[4])));
        }
        let rank = bytes[5] as usize;
        if !(2..=3).contains(&rank) {
            return Err(Error::Format(format!("raster rank {rank}, expected 2 or 3")));
        }
        let head = 6 + 4 * rank;
        if bytes.len() < head {
            return Err(Error::Truncated { expected: head, found: bytes.len() });
        }
        let shape: Vec<usize> =
            (0..rank).map(|i| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize).collect();
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("raster too large".into()))?;
        let body = &bytes[head..];
        if body.len() != n {
            return Err(Error::Truncated { expected: n, found: body.len() });
        }
        let cells = body
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::Format(format!("raster byte {b}, expected 0 or 1"))),
            })
            .collect::<Result<_>>()?;
        Ok(Self { shape, cells })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = path.as_ref();
        fs::write(p, self.encode()?).map_err(|e| Error::io(p, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        Self::decode(&fs::read(p).map_err(|e| Error::io(p, e))?)
    }
}

/// Reads CSV rows `t,x,y` with `t = 0, 1, …` in order; a `t,x,y` header line is optional.
pub fn parse_trajectory(text: &str) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.replace(' ', "") == "t,x,y") {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Format(format!("trajectory line {}: expected t,x,y, got {line:?}", i + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        let t: usize = f[0].parse().map_err(|_| bad())?;
        if t != out.len() {
            return Err(Error::Format(format!("trajectory line {}: frame {t}, expected {}", i + 1, out.len())));
        }
        let x: f64 = f[1].parse().map_err(|_| bad())?;
        let y: f64 = f[2].parse().map_err(|_| bad())?;
        out.push([x, y]);
    }
    Ok(out)
}

pub fn trajectory_csv(traj: &[[f64; 2]]) -> String {
    let mut s = String::from("t,x,y\n");
    for (t, [x, y]) in traj.iter().enumerate() {
        s.push_str(&format!("{t},{x},{y}\n"));
    }
    s
}

/// OCG1 files of a dataset directory in name order.
pub fn list_dataset(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ocg"))
        .collect();
    out.sort();
    Ok(out)
}

/// Every sequence of a dataset directory with its file stem.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<(String, SemanticGrid)>> {
    list_dataset(dir)?
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((stem, read_grid(&p)?))
        })
        .collect()
}
