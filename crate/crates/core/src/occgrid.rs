//! Semantic occupancy sequences: the in-memory grid, the OCG1 file format,
//! a deterministic toy-scene generator and a bird's-eye-view rasterizer.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const OCG1_MAGIC: &[u8; 4] = b"OCG1";
pub const OCG1_VERSION: u8 = 1;
pub const OCG1_HEADER_LEN: usize = 24;

/// Class id reserved for empty space.
pub const FREE: u8 = 0;

/// Toy palette class ids.
pub mod toy_class {
    pub const FREE: u8 = 0;
    pub const ROAD: u8 = 1;
    pub const BUILDING: u8 = 2;
    pub const VEHICLE: u8 = 3;
    pub const PEDESTRIAN: u8 = 4;
    pub const VEGETATION: u8 = 5;
    pub const COUNT: u16 = 6;
}

/// Extent of a `T×X×Y×Z` sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub t: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl GridDims {
    pub fn new(t: usize, x: usize, y: usize, z: usize) -> Self {
        Self { t, x, y, z }
    }

    pub fn voxels(&self) -> usize {
        self.t * self.x * self.y * self.z
    }

    pub fn frame_len(&self) -> usize {
        self.x * self.y * self.z
    }

    /// Linear index with `t` slowest and `z` fastest.
    #[inline]
    pub fn index(&self, t: usize, x: usize, y: usize, z: usize) -> usize {
        ((t * self.x + x) * self.y + y) * self.z + z
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.t, self.x, self.y, self.z]
    }
}

/// A dynamic occupancy sequence with one class id per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGrid {
    dims: GridDims,
    num_classes: u16,
    labels: Vec<u8>,
    /// Meters per voxel. Metadata only, not persisted in OCG1.
    pub voxel_size: f32,
    /// Frames per second. Metadata only, not persisted in OCG1.
    pub frame_hz: f32,
}

impl SemanticGrid {
    pub fn new(dims: GridDims, num_classes: u16, labels: Vec<u8>) -> Result<Self> {
        if dims.t == 0 || dims.x == 0 || dims.y == 0 || dims.z == 0 {
            return Err(Error::Dims(format!("grid dims must be positive, got {dims:?}")));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::Invalid(format!("num_classes must be in 1..=256, got {num_classes}")));
        }
        if labels.len() != dims.voxels() {
            return Err(Error::Shape(format!(
                "{} labels for dims {:?} ({} voxels)",
                labels.len(),
                dims,
                dims.voxels()
            )));
        }
        check_labels(&labels, num_classes)?;
        Ok(Self { dims, num_classes, labels, voxel_size: 0.4, frame_hz: 10.0 })
    }

    /// A grid holding `label` everywhere.
    pub fn filled(dims: GridDims, num_classes: u16, label: u8) -> Result<Self> {
        Self::new(dims, num_classes, vec![label; dims.voxels()])
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    #[inline]
    pub fn get(&self, t: usize, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.dims.index(t, x, y, z)]
    }

    pub fn set(&mut self, t: usize, x: usize, y: usize, z: usize, label: u8) -> Result<()> {
        if label as u16 >= self.num_classes {
            return Err(Error::LabelOutOfRange { label: label as u32, num_classes: self.num_classes as u32 });
        }
        let d = self.dims;
        if t >= d.t || x >= d.x || y >= d.y || z >= d.z {
            return Err(Error::OutOfBounds { index: vec![t, x, y, z], bounds: d.as_array().to_vec() });
        }
        self.labels[d.index(t, x, y, z)] = label;
        Ok(())
    }

    /// Labels of one frame, `X·Y·Z` values.
    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.dims.frame_len();
        &self.labels[t * n..(t + 1) * n]
    }

    /// Frames `start..start + len` as a new grid.
    pub fn frames(&self, start: usize, len: usize) -> Result<SemanticGrid> {
        if len == 0 || start + len > self.dims.t {
            return Err(Error::Dims(format!("frame range {start}..{} outside 0..{}", start + len, self.dims.t)));
        }
        let n = self.dims.frame_len();
        let dims = GridDims { t: len, ..self.dims };
        let mut g = SemanticGrid::new(dims, self.num_classes, self.labels[start * n..(start + len) * n].to_vec())?;
        g.voxel_size = self.voxel_size;
        g.frame_hz = self.frame_hz;
        Ok(g)
    }

    /// Concatenates sequences along time. All parts must share spatial dims and classes.
    pub fn concat_frames(parts: &[SemanticGrid]) -> Result<SemanticGrid> {
        let first = parts.first().ok_or_else(|| Error::Invalid("no grids to concatenate".into()))?;
        let mut labels = Vec::new();
        let mut t = 0;
        for p in parts {
            let d = p.dims;
            if (d.x, d.y, d.z) != (first.dims.x, first.dims.y, first.dims.z) || p.num_classes != first.num_classes {
                return Err(Error::Shape(format!("cannot concatenate {:?} with {:?}", d, first.dims)));
            }
            labels.extend_from_slice(&p.labels);
            t += d.t;
        }
        SemanticGrid::new(GridDims { t, ..first.dims }, first.num_classes, labels)
    }
}

fn check_labels(labels: &[u8], num_classes: u16) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l as u16 >= num_classes) {
        return Err(Error::LabelOutOfRange { label: bad as u32, num_classes: num_classes as u32 });
    }
    Ok(())
}

/// Class names and display colors, indexed by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    names: Vec<String>,
    colors: Vec<[u8; 3]>,
}

impl ClassMap {
    pub fn new(names: Vec<String>, colors: Vec<[u8; 3]>) -> Result<Self> {
        if names.first().map(String::as_str) != Some("free") {
            return Err(Error::Invalid("class 0 must be named \"free\"".into()));
        }
        if names.len() != colors.len() {
            return Err(Error::Invalid(format!("{} names but {} colors", names.len(), colors.len())));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Invalid(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names, colors })
    }

    /// Six-class palette used by the toy generator.
    pub fn toy() -> Self {
        let names = ["free", "road", "building", "vehicle", "pedestrian", "vegetation"];
        let colors = [[0, 0, 0], [128, 64, 128], [70, 70, 70], [0, 0, 142], [220, 20, 60], [107, 142, 35]];
        Self::new(names.iter().map(|s| s.to_string()).collect(), colors.to_vec()).expect("static palette")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, class: usize) -> Option<&str> {
        self.names.get(class).map(String::as_str)
    }

    pub fn color(&self, class: usize) -> Option<[u8; 3]> {
        self.colors.get(class).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Encodes a grid as OCG1 bytes.
pub fn encode_grid(grid: &SemanticGrid) -> Result<Vec<u8>> {
    check_labels(&grid.labels, grid.num_classes)?;
    let d = grid.dims;
    let mut buf = Vec::with_capacity(OCG1_HEADER_LEN + d.voxels());
    buf.extend_from_slice(OCG1_MAGIC);
    buf.push(OCG1_VERSION);
    for v in [d.t, d.x, d.y, d.z] {
        let v = u32::try_from(v).map_err(|_| Error::Dims(format!("dimension {v} exceeds u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&grid.num_classes.to_le_bytes());
    buf.push(0);
    debug_assert_eq!(buf.len(), OCG1_HEADER_LEN);
    buf.extend_from_slice(&grid.labels);
    Ok(buf)
}

/// Decodes OCG1 bytes.
pub fn decode_grid(bytes: &[u8]) -> Result<SemanticGrid> {
    if bytes.len() < OCG1_HEADER_LEN {
        return Err(Error::Truncated { expected: OCG1_HEADER_LEN, found: bytes.len() });
    }
    if &bytes[0..4] != OCG1_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
    }
    if bytes[4] != OCG1_VERSION {
        return Err(Error::Format(format!("unsupported OCG1 version {}", bytes[4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let dims = GridDims::new(u32_at(5), u32_at(9), u32_at(13), u32_at(17));
    let num_classes = u16::from_le_bytes([bytes[21], bytes[22]]);
    let n = dims
        .t
        .checked_mul(dims.x)
        .and_then(|v| v.checked_mul(dims.y))
        .and_then(|v| v.checked_mul(dims.z))
        .ok_or_else(|| Error::Format("voxel count overflows".into()))?;
    let payload = &bytes[OCG1_HEADER_LEN..];
    if payload.len() < n {
        return Err(Error::Truncated { expected: n, found: payload.len() });
    }
    if payload.len() > n {
        return Err(Error::Format(format!("{} trailing bytes after payload", payload.len() - n)));
    }
    SemanticGrid::new(dims, num_classes, payload.to_vec())
}

pub fn write_grid(grid: &SemanticGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_grid(grid)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<SemanticGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes)
}

/// Parameters of a generated toy scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToySpec {
    pub t: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub n_vehicles: usize,
    pub n_pedestrians: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self { t: 8, x: 32, y: 32, z: 8, n_vehicles: 2, n_pedestrians: 1 }
    }
}

impl ToySpec {
    pub fn dims(&self) -> GridDims {
        GridDims::new(self.t, self.x, self.y, self.z)
    }
}

const VEHICLE_LEN: usize = 4;
const VEHICLE_WIDTH: usize = 2;
const VEHICLE_HEIGHT: usize = 2;
const PEDESTRIAN_HEIGHT: usize = 2;

/// Generates a street scene: a ground slab with one straight road, a few
/// buildings beside it, vehicles driving along the road and pedestrians on
/// the curb, all agents moving with constant integer velocities.
///
/// The ground occupies `z ∈ {0, 1}` and agents stand on it.
pub fn generate_toy_scene(seed: u64, spec: &ToySpec) -> Result<SemanticGrid> {
    for (name, v) in [("T", spec.t), ("X", spec.x), ("Y", spec.y), ("Z", spec.z)] {
        if !(4..=256).contains(&v) {
            return Err(Error::Dims(format!("{name}={v} outside [4, 256]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = spec.dims();
    let mut frame = vec![FREE; dims.frame_len()];
    let fidx = |x: usize, y: usize, z: usize| (x * dims.y + y) * dims.z + z;

    // The road runs along `along` and occupies a band of `road_w` cells across it.
    let road_along_x: bool = rng.random();
    let (len_along, len_across) = if road_along_x { (dims.x, dims.y) } else { (dims.y, dims.x) };
    let road_w = (len_across / 4).max(4).min(len_across.saturating_sub(2)).max(1);
    let road_lo = rng.random_range(1..=(len_across - road_w - 1).max(1));
    let road_hi = road_lo + road_w;
    let to_xy = |along: usize, across: usize| if road_along_x { (along, across) } else { (across, along) };

    for along in 0..len_along {
        for across in 0..len_across {
            let (x, y) = to_xy(along, across);
            let class = if (road_lo..road_hi).contains(&across) { toy_class::ROAD } else { toy_class::VEGETATION };
            for z in 0..2.min(dims.z) {
                frame[fidx(x, y, z)] = class;
            }
        }
    }

    // Buildings keep one free curb cell on each side of the road.
    let n_buildings = rng.random_range(2..=4);
    let max_side = (len_across / 4 + 2).max(3);
    for _ in 0..n_buildings {
        for _attempt in 0..20 {
            let w_along = rng.random_range(3..=max_side.min(len_along));
            let w_across = rng.random_range(3..=max_side.min(len_across));
            let a0 = rng.random_range(0..=len_along - w_along);
            let c0 = rng.random_range(0..=len_across - w_across);
            let c1 = c0 + w_across;
            let clear = c1 + 2 <= road_lo || c0 >= road_hi + 2;
            if !clear {
                continue;
            }
            let height = rng.random_range(2..=(dims.z - 2).max(2));
            for along in a0..a0 + w_along {
                for across in c0..c1 {
                    let (x, y) = to_xy(along, across);
                    for z in 2..(2 + height).min(dims.z) {
                        frame[fidx(x, y, z)] = toy_class::BUILDING;
                    }
                }
            }
            break;
        }
    }

    // Vehicles occupy lanes of width VEHICLE_WIDTH inside the road band.
    let lanes: Vec<usize> = (road_lo..road_hi.saturating_sub(VEHICLE_WIDTH - 1)).step_by(VEHICLE_WIDTH + 1).collect();
    struct Agent {
        along0: i64,
        velocity: i64,
        across0: usize,
        len: usize,
        width: usize,
        height: usize,
        class: u8,
    }
    let span = (dims.t - 1) as i64;
    let mut agents = Vec::new();
    let place = |rng: &mut ChaCha8Rng, len: usize, speeds: &[i64]| -> (i64, i64) {
        let room = len_along.saturating_sub(len) as i64;
        let mut v = speeds[rng.random_range(0..speeds.len())];
        while v.abs() * span > room && v != 0 {
            v -= v.signum();
        }
        let lo = if v < 0 { -v * span } else { 0 };
        let hi = if v > 0 { room - v * span } else { room };
        (rng.random_range(lo..=hi.max(lo)), v)
    };
    for i in 0..spec.n_vehicles {
        let (along0, velocity) = place(&mut rng, VEHICLE_LEN, &[-2, -1, 1, 2]);
        let across0 = if lanes.is_empty() { road_lo } else { lanes[i % lanes.len()] };
        agents.push(Agent {
            along0,
            velocity,
            across0,
            len: VEHICLE_LEN.min(len_along),
            width: VEHICLE_WIDTH,
            height: VEHICLE_HEIGHT,
            class: toy_class::VEHICLE,
        });
    }
    for _ in 0..spec.n_pedestrians {
        let (along0, velocity) = place(&mut rng, 1, &[-1, 1]);
        let curb = if rng.random::<bool>() || road_hi >= len_across { road_lo.saturating_sub(1) } else { road_hi };
        agents.push(Agent {
            along0,
            velocity,
            across0: curb,
            len: 1,
            width: 1,
            height: PEDESTRIAN_HEIGHT,
            class: toy_class::PEDESTRIAN,
        });
    }

    let mut labels = Vec::with_capacity(dims.voxels());
    for t in 0..dims.t {
        let mut f = frame.clone();
        for a in &agents {
            let start = a.along0 + a.velocity * t as i64;
            for along in start..start + a.len as i64 {
                if along < 0 || along >= len_along as i64 {
                    continue;
                }
                for across in a.across0..(a.across0 + a.width).min(len_across) {
                    let (x, y) = to_xy(along as usize, across);
                    for z in 2..(2 + a.height).min(dims.z) {
                        let cell = &mut f[fidx(x, y, z)];
                        if a.class == toy_class::VEHICLE || *cell == FREE {
                            *cell = a.class;
                        }
                    }
                }
            }
        }
        labels.extend_from_slice(&f);
    }
    SemanticGrid::new(dims, toy_class::COUNT, labels)
}

/// Top-down raster of one frame: each pixel takes the color of the highest
/// non-free voxel in its column, or the free color when the column is empty.
pub fn render_bev(grid: &SemanticGrid, frame: usize, classmap: &ClassMap) -> Result<RgbImage> {
    let d = grid.dims();
    if frame >= d.t {
        return Err(Error::OutOfBounds { index: vec![frame], bounds: vec![d.t] });
    }
    if classmap.len() < grid.num_classes() as usize {
        return Err(Error::Invalid(format!(
            "class map has {} entries for {} classes",
            classmap.len(),
            grid.num_classes()
        )));
    }
    let mut img = RgbImage::new(d.x as u32, d.y as u32);
    for x in 0..d.x {
        for y in 0..d.y {
            let class = (0..d.z).rev().map(|z| grid.get(frame, x, y, z)).find(|&l| l != FREE).unwrap_or(FREE);
            let c = classmap.color(class as usize).expect("checked above");
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
    Ok(img)
}

/// Horizontal strip of BEV frames, one tile per frame.
pub fn render_bev_strip(grid: &SemanticGrid, classmap: &ClassMap) -> Result<RgbImage> {
    let d = grid.dims();
    let mut strip = RgbImage::new((d.x * d.t) as u32, d.y as u32);
    for t in 0..d.t {
        let tile = render_bev(grid, t, classmap)?;
        image::imageops::replace(&mut strip, &tile, (t * d.x) as i64, 0);
    }
    Ok(strip)
}
