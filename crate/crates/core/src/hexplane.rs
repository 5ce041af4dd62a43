//! HexPlane latents: six axis-aligned feature planes over `(t, x, y, z)`,
//! grid-aligned point queries, the padded square rollout used to tokenize a
//! HexPlane for the diffusion transformer, and latent-size accounting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::occgrid::GridDims;

/// Channel count used when tabulating compression ratios.
pub const COMPRESSION_CHANNELS: usize = 16;

/// The six planes in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PlaneKind {
    Xy,
    Xz,
    Yz,
    Tx,
    Ty,
    Tz,
}

impl PlaneKind {
    pub const ALL: [PlaneKind; 6] = [PlaneKind::Xy, PlaneKind::Xz, PlaneKind::Yz, PlaneKind::Tx, PlaneKind::Ty, PlaneKind::Tz];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PlaneKind::Xy => "p_xy",
            PlaneKind::Xz => "p_xz",
            PlaneKind::Yz => "p_yz",
            PlaneKind::Tx => "p_tx",
            PlaneKind::Ty => "p_ty",
            PlaneKind::Tz => "p_tz",
        }
    }

    pub fn is_temporal(self) -> bool {
        matches!(self, PlaneKind::Tx | PlaneKind::Ty | PlaneKind::Tz)
    }

    /// Axes spanned by the plane, as indices into `(t, x, y, z)`.
    pub fn axes(self) -> (usize, usize) {
        match self {
            PlaneKind::Xy => (1, 2),
            PlaneKind::Xz => (1, 3),
            PlaneKind::Yz => (2, 3),
            PlaneKind::Tx => (0, 1),
            PlaneKind::Ty => (0, 2),
            PlaneKind::Tz => (0, 3),
        }
    }
}

/// Downsampling rates along `(t, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rates {
    pub t: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Rates {
    pub fn new(t: usize, x: usize, y: usize, z: usize) -> Self {
        Self { t, x, y, z }
    }

    pub fn uniform(d: usize) -> Self {
        Self::new(d, d, d, d)
    }
}

/// Latent extents of a HexPlane together with the rates that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PlaneDims {
    pub t: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub rates: Rates,
    pub channels: usize,
}

impl PlaneDims {
    /// Latent dims for a grid of extent `grid` downsampled by `rates`.
    pub fn from_grid(grid: GridDims, rates: Rates, channels: usize) -> Result<Self> {
        let mut out = [0usize; 4];
        for (i, (n, r, name)) in
            [(grid.t, rates.t, "T"), (grid.x, rates.x, "X"), (grid.y, rates.y, "Y"), (grid.z, rates.z, "Z")]
                .into_iter()
                .enumerate()
        {
            if r == 0 || n == 0 || n % r != 0 {
                return Err(Error::Dims(format!("{name}={n} is not divisible by rate {r}")));
            }
            out[i] = n / r;
        }
        if channels == 0 {
            return Err(Error::Dims("channel count must be positive".into()));
        }
        Ok(Self { t: out[0], x: out[1], y: out[2], z: out[3], rates, channels })
    }

    /// Latent dims given directly, with unit rates.
    pub fn latent(t: usize, x: usize, y: usize, z: usize, channels: usize) -> Self {
        Self { t, x, y, z, rates: Rates::uniform(1), channels }
    }

    pub fn grid(&self) -> GridDims {
        GridDims::new(self.t * self.rates.t, self.x * self.rates.x, self.y * self.rates.y, self.z * self.rates.z)
    }

    pub fn axis(&self, i: usize) -> usize {
        [self.t, self.x, self.y, self.z][i]
    }

    /// `(rows, cols)` of one plane.
    pub fn plane_shape(&self, kind: PlaneKind) -> (usize, usize) {
        let (a, b) = kind.axes();
        (self.axis(a), self.axis(b))
    }

    /// Total plane cells `XY + XZ + YZ + TX + TY + TZ`.
    pub fn plane_cells(&self) -> usize {
        PlaneKind::ALL.iter().map(|&k| {
            let (r, c) = self.plane_shape(k);
            r * c
        }).sum()
    }

    /// Side of the rolled square, `X + Z + T` in latent units.
    pub fn rolled_side(&self) -> usize {
        self.x + self.z + self.t
    }

    /// Same dims with a different temporal extent.
    pub fn with_t(&self, t: usize, rate_t: usize) -> Self {
        Self { t, rates: Rates { t: rate_t, ..self.rates }, ..*self }
    }

    pub fn require_square(&self) -> Result<()> {
        if self.x != self.y {
            return Err(Error::Dims(format!("rollout needs X == Y in latent space, got {} and {}", self.x, self.y)));
        }
        Ok(())
    }
}

/// One feature plane, row-major `rows × cols × channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        Self { rows, cols, channels, data: vec![0.0; rows * cols * channels] }
    }

    pub fn filled(rows: usize, cols: usize, channels: usize, v: f32) -> Self {
        Self { rows, cols, channels, data: vec![v; rows * cols * channels] }
    }

    #[inline]
    pub fn cell(&self, r: usize, c: usize) -> &[f32] {
        let o = (r * self.cols + c) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, r: usize, c: usize) -> &mut [f32] {
        let o = (r * self.cols + c) * self.channels;
        &mut self.data[o..o + self.channels]
    }
}

/// Six feature planes `[P_xy, P_xz, P_yz, P_tx, P_ty, P_tz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HexPlane {
    dims: PlaneDims,
    planes: [Plane; 6],
}

impl HexPlane {
    pub fn new(dims: PlaneDims, planes: [Plane; 6]) -> Result<Self> {
        for k in PlaneKind::ALL {
            let p = &planes[k.index()];
            let (r, c) = dims.plane_shape(k);
            if (p.rows, p.cols, p.channels) != (r, c, dims.channels) || p.data.len() != r * c * dims.channels {
                return Err(Error::Shape(format!(
                    "{} is {}x{}x{} but dims require {}x{}x{}",
                    k.name(),
                    p.rows,
                    p.cols,
                    p.channels,
                    r,
                    c,
                    dims.channels
                )));
            }
            if p.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(k.name().into()));
            }
        }
        Ok(Self { dims, planes })
    }

    pub fn from_fn(dims: PlaneDims, mut f: impl FnMut(PlaneKind) -> Plane) -> Result<Self> {
        Self::new(dims, PlaneKind::ALL.map(&mut f))
    }

    pub fn filled(dims: PlaneDims, v: f32) -> Self {
        let planes = PlaneKind::ALL.map(|k| {
            let (r, c) = dims.plane_shape(k);
            Plane::filled(r, c, dims.channels, v)
        });
        Self { dims, planes }
    }

    pub fn zeros(dims: PlaneDims) -> Self {
        Self::filled(dims, 0.0)
    }

    /// Standard-normal entries from a seeded generator.
    pub fn random(dims: PlaneDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = Self::zeros(dims);
        for p in h.planes.iter_mut() {
            for v in p.data.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
        }
        h
    }

    pub fn dims(&self) -> PlaneDims {
        self.dims
    }

    pub fn plane(&self, kind: PlaneKind) -> &Plane {
        &self.planes[kind.index()]
    }

    pub fn plane_mut(&mut self, kind: PlaneKind) -> &mut Plane {
        &mut self.planes[kind.index()]
    }

    pub fn planes(&self) -> &[Plane; 6] {
        &self.planes
    }

    pub fn into_planes(self) -> [Plane; 6] {
        self.planes
    }

    /// Largest absolute elementwise difference; infinite when dims differ.
    pub fn max_abs_diff(&self, other: &HexPlane) -> f32 {
        if self.dims != other.dims {
            return f32::INFINITY;
        }
        self.planes
            .iter()
            .zip(other.planes.iter())
            .flat_map(|(a, b)| a.data.iter().zip(b.data.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f32::max)
    }

    /// Fused feature at a latent grid point: the Hadamard product of the six
    /// indexed plane rows, multiplied in storage order.
    pub fn query(&self, t: usize, x: usize, y: usize, z: usize) -> Result<Vec<f32>> {
        let d = self.dims;
        if t >= d.t || x >= d.x || y >= d.y || z >= d.z {
            return Err(Error::OutOfBounds { index: vec![t, x, y, z], bounds: vec![d.t, d.x, d.y, d.z] });
        }
        let coord = [t, x, y, z];
        let mut out = vec![1.0f32; d.channels];
        for k in PlaneKind::ALL {
            let (a, b) = k.axes();
            let row = self.planes[k.index()].cell(coord[a], coord[b]);
            for (o, v) in out.iter_mut().zip(row) {
                *o *= v;
            }
        }
        Ok(out)
    }
}

/// Placement of one plane inside the rolled square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub kind: PlaneKind,
    pub row0: usize,
    pub col0: usize,
    /// When set, plane cell `(a, b)` lands at `(row0 + b, col0 + a)`.
    pub transposed: bool,
}

impl Block {
    /// Rows and columns covered in the square.
    pub fn extent(&self, dims: &PlaneDims) -> (usize, usize) {
        let (r, c) = dims.plane_shape(self.kind);
        if self.transposed {
            (c, r)
        } else {
            (r, c)
        }
    }

    #[inline]
    pub fn square_pos(&self, a: usize, b: usize) -> (usize, usize) {
        if self.transposed {
            (self.row0 + b, self.col0 + a)
        } else {
            (self.row0 + a, self.col0 + b)
        }
    }
}

/// Canonical arrangement. Rows and columns are split into bands
/// `[X | Z | T]`; the uncovered `(Z,Z)`, `(Z,T)` and `(T,T)` blocks are padding.
///
/// ```text
///            X          Z        T
///   X   [ P_xy    |  P_xz  | P_tyᵀ ]
///   Z   [ P_yzᵀ   |   pad  |  pad  ]
///   T   [ P_tx    |  P_tz  |  pad  ]
/// ```
pub fn rollout_layout(dims: &PlaneDims) -> [Block; 6] {
    let (x, z) = (dims.x, dims.z);
    let b = |kind, row0, col0, transposed| Block { kind, row0, col0, transposed };
    [
        b(PlaneKind::Xy, 0, 0, false),
        b(PlaneKind::Xz, 0, x, false),
        b(PlaneKind::Yz, x, 0, true),
        b(PlaneKind::Tx, x + z, 0, false),
        b(PlaneKind::Ty, 0, x + z, true),
        b(PlaneKind::Tz, x + z, x, false),
    ]
}

/// Padding mask of the rolled square, `true` where no plane block lands.
pub fn rollout_pad_mask(dims: &PlaneDims) -> Vec<bool> {
    let s = dims.rolled_side();
    let mut mask = vec![true; s * s];
    for blk in rollout_layout(dims) {
        let (h, w) = blk.extent(dims);
        for r in blk.row0..blk.row0 + h {
            for c in blk.col0..blk.col0 + w {
                mask[r * s + c] = false;
            }
        }
    }
    mask
}

/// Six planes packed into one `S×S×C` square with zeroed padding.
#[derive(Debug, Clone, PartialEq)]
pub struct RolledMap {
    pub side: usize,
    pub channels: usize,
    /// Row-major `side × side × channels`.
    pub data: Vec<f32>,
    /// `side × side`, `true` on padding.
    pub pad_mask: Vec<bool>,
}

impl RolledMap {
    pub fn zeros(dims: &PlaneDims) -> Self {
        let s = dims.rolled_side();
        Self { side: s, channels: dims.channels, data: vec![0.0; s * s * dims.channels], pad_mask: rollout_pad_mask(dims) }
    }

    pub fn padding_cells(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }

    #[inline]
    pub fn cell(&self, r: usize, c: usize) -> &[f32] {
        let o = (r * self.side + c) * self.channels;
        &self.data[o..o + self.channels]
    }
}

pub fn rollout(h: &HexPlane) -> Result<RolledMap> {
    let dims = h.dims();
    dims.require_square()?;
    let mut m = RolledMap::zeros(&dims);
    let (s, ch) = (m.side, m.channels);
    for blk in rollout_layout(&dims) {
        let p = h.plane(blk.kind);
        for a in 0..p.rows {
            for b in 0..p.cols {
                let (r, c) = blk.square_pos(a, b);
                let o = (r * s + c) * ch;
                m.data[o..o + ch].copy_from_slice(p.cell(a, b));
            }
        }
    }
    Ok(m)
}

/// Inverse of [`rollout`]. With `strict`, nonzero padding is an error.
pub fn unrollout(m: &RolledMap, dims: &PlaneDims, strict: bool) -> Result<HexPlane> {
    dims.require_square()?;
    let s = dims.rolled_side();
    if m.side != s || m.channels != dims.channels || m.data.len() != s * s * dims.channels {
        return Err(Error::Shape(format!(
            "rolled map side {} with {} channels does not match dims (side {}, {} channels)",
            m.side, m.channels, s, dims.channels
        )));
    }
    if strict {
        let mask = rollout_pad_mask(dims);
        for (i, &pad) in mask.iter().enumerate() {
            if pad && m.data[i * m.channels..(i + 1) * m.channels].iter().any(|&v| v != 0.0) {
                return Err(Error::Invalid(format!("padding cell ({}, {}) is nonzero", i / s, i % s)));
            }
        }
    }
    let mut h = HexPlane::zeros(*dims);
    for blk in rollout_layout(dims) {
        let p = h.plane_mut(blk.kind);
        for a in 0..p.rows {
            for b in 0..p.cols {
                let (r, c) = blk.square_pos(a, b);
                p.cell_mut(a, b).copy_from_slice(m.cell(r, c));
            }
        }
    }
    HexPlane::new(*dims, h.into_planes())
}

/// Input voxels per latent scalar, with `C = 16` latent channels.
pub fn compression_ratio(original: GridDims, rates: Rates) -> Result<f64> {
    let dims = PlaneDims::from_grid(original, rates, COMPRESSION_CHANNELS)?;
    Ok(original.voxels() as f64 / (COMPRESSION_CHANNELS * dims.plane_cells()) as f64)
}

/// Patch tokenization of the rolled square.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub patch: usize,
    /// Tokens per side, `S / p`.
    pub side: usize,
    /// Row-major, `true` for tokens inside a padding block.
    pub pad: Vec<bool>,
}

impl TokenGrid {
    pub fn n_tokens(&self) -> usize {
        self.side * self.side
    }

    /// Indices of tokens that carry plane content, in row-major order.
    pub fn active(&self) -> Vec<usize> {
        (0..self.pad.len()).filter(|&i| !self.pad[i]).collect()
    }

    pub fn n_active(&self) -> usize {
        self.pad.iter().filter(|&&p| !p).count()
    }
}

pub fn token_grid(dims: &PlaneDims, patch: usize) -> Result<TokenGrid> {
    if patch == 0 || dims.x % patch != 0 || dims.z % patch != 0 || dims.t % patch != 0 || dims.y % patch != 0 {
        return Err(Error::Dims(format!(
            "patch size {patch} must divide latent X={}, Y={}, Z={}, T={}",
            dims.x, dims.y, dims.z, dims.t
        )));
    }
    let s = dims.rolled_side();
    let side = s / patch;
    let mask = rollout_pad_mask(dims);
    let mut pad = vec![false; side * side];
    for tr in 0..side {
        for tc in 0..side {
            let all_pad = (0..patch)
                .all(|dr| (0..patch).all(|dc| mask[(tr * patch + dr) * s + tc * patch + dc]));
            pad[tr * side + tc] = all_pad;
        }
    }
    Ok(TokenGrid { patch, side, pad })
}

/// Per-plane, per-channel affine normalization of HexPlane values.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneStats {
    /// `6 × C` means in plane storage order.
    pub mean: Vec<f32>,
    /// `6 × C` standard deviations, strictly positive.
    pub std: Vec<f32>,
    pub channels: usize,
}

impl PlaneStats {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; 6 * channels], std: vec![1.0; 6 * channels], channels }
    }

    /// Statistics over a collection of HexPlanes sharing dims.
    pub fn fit(planes: &[HexPlane]) -> Result<Self> {
        let first = planes.first().ok_or_else(|| Error::Invalid("no HexPlanes to fit statistics".into()))?;
        let c = first.dims().channels;
        let mut sum = vec![0.0f64; 6 * c];
        let mut sq = vec![0.0f64; 6 * c];
        let mut count = [0usize; 6];
        for h in planes {
            if h.dims() != first.dims() {
                return Err(Error::Shape("HexPlanes with different dims".into()));
            }
            for k in PlaneKind::ALL {
                let p = h.plane(k);
                count[k.index()] += p.rows * p.cols;
                for cell in p.data.chunks_exact(c) {
                    for (ch, &v) in cell.iter().enumerate() {
                        sum[k.index() * c + ch] += v as f64;
                        sq[k.index() * c + ch] += (v as f64) * (v as f64);
                    }
                }
            }
        }
        let mut mean = vec![0.0; 6 * c];
        let mut std = vec![1.0; 6 * c];
        for i in 0..6 * c {
            let n = count[i / c] as f64;
            let m = sum[i] / n;
            let var = (sq[i] / n - m * m).max(0.0);
            mean[i] = m as f32;
            std[i] = (var.sqrt() as f32).max(1e-4);
        }
        Ok(Self { mean, std, channels: c })
    }

    pub fn normalize(&self, h: &HexPlane) -> HexPlane {
        self.apply(h, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, h: &HexPlane) -> HexPlane {
        self.apply(h, |v, m, s| v * s + m)
    }

    fn apply(&self, h: &HexPlane, f: impl Fn(f32, f32, f32) -> f32) -> HexPlane {
        let c = self.channels;
        let mut out = h.clone();
        for k in PlaneKind::ALL {
            let p = out.plane_mut(k);
            for cell in p.data.chunks_exact_mut(c) {
                for (ch, v) in cell.iter_mut().enumerate() {
                    let i = k.index() * c + ch;
                    *v = f(*v, self.mean[i], self.std[i]);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_dims() -> PlaneDims {
        PlaneDims::from_grid(GridDims::new(8, 32, 32, 8), Rates::uniform(2), 16).unwrap()
    }

    #[test]
    fn query_identity_and_absorbing() {
        let d = PlaneDims::latent(2, 4, 4, 2, 3);
        let ones = HexPlane::filled(d, 1.0);
        assert_eq!(ones.query(1, 3, 2, 1).unwrap(), vec![1.0; 3]);

        let mut h = HexPlane::random(d, 4);
        h.plane_mut(PlaneKind::Tz).data.fill(0.0);
        assert!(h.query(0, 1, 1, 1).unwrap().iter().all(|&v| v == 0.0));
        assert!(h.query(2, 0, 0, 0).is_err());
    }

    #[test]
    fn query_hand_product() {
        let d = PlaneDims::latent(2, 4, 4, 1, 2);
        let h = HexPlane::random(d, 9);
        let (t, x, y, z) = (1, 2, 3, 0);
        let got = h.query(t, x, y, z).unwrap();
        for ch in 0..2 {
            let expect = h.plane(PlaneKind::Xy).cell(x, y)[ch]
                * h.plane(PlaneKind::Xz).cell(x, z)[ch]
                * h.plane(PlaneKind::Yz).cell(y, z)[ch]
                * h.plane(PlaneKind::Tx).cell(t, x)[ch]
                * h.plane(PlaneKind::Ty).cell(t, y)[ch]
                * h.plane(PlaneKind::Tz).cell(t, z)[ch];
            assert_eq!(got[ch], expect);
        }
    }

    #[test]
    fn rollout_sides() {
        let carla = PlaneDims::from_grid(GridDims::new(16, 128, 128, 8), Rates::uniform(2), 16).unwrap();
        assert_eq!(carla.rolled_side(), 76);
        let m = rollout(&HexPlane::zeros(toy_dims())).unwrap();
        assert_eq!(m.side, 24);
        assert_eq!(m.padding_cells(), 48);
    }

    /// Counts cells reached by no plane by enumerating every plane cell's
    /// destination, independently of the block-extent bookkeeping.
    fn brute_force_padding(dims: &PlaneDims) -> usize {
        let s = dims.rolled_side();
        let mut hit = vec![0u32; s * s];
        for blk in rollout_layout(dims) {
            let (r, c) = dims.plane_shape(blk.kind);
            for a in 0..r {
                for b in 0..c {
                    let (i, j) = blk.square_pos(a, b);
                    hit[i * s + j] += 1;
                }
            }
        }
        assert!(hit.iter().all(|&h| h <= 1), "blocks overlap");
        hit.iter().filter(|&&h| h == 0).count()
    }

    #[test]
    fn padding_matches_enumeration() {
        let d = toy_dims();
        assert_eq!(brute_force_padding(&d), 48);
        assert_eq!(d.z * d.z + d.z * d.t + d.t * d.t, 48);
    }

    #[test]
    fn unrollout_errors() {
        let d = toy_dims();
        let mut m = rollout(&HexPlane::random(d, 1)).unwrap();
        let wrong = PlaneDims::latent(5, 16, 16, 4, 16);
        assert!(unrollout(&m, &wrong, false).is_err());
        let pad = m.pad_mask.iter().position(|&p| p).unwrap();
        m.data[pad * m.channels] = 1.0;
        assert!(unrollout(&m, &d, true).is_err());
        assert!(unrollout(&m, &d, false).is_ok());
        assert_eq!(unrollout(&RolledMap::zeros(&d), &d, true).unwrap(), HexPlane::zeros(d));
    }

    #[test]
    fn rollout_rejects_non_square() {
        let d = PlaneDims::latent(2, 4, 6, 2, 1);
        assert!(rollout(&HexPlane::zeros(d)).is_err());
    }

    #[test]
    fn compression_ratios() {
        let carla = GridDims::new(16, 128, 128, 8);
        let waymo = GridDims::new(16, 200, 200, 16);
        let cr = |g, r| compression_ratio(g, r).unwrap();
        assert!((cr(carla, Rates::new(1, 1, 1, 1)) - 5.78).abs() < 0.02);
        assert!((cr(carla, Rates::new(2, 2, 2, 2)) - 23.14).abs() < 0.02);
        assert!((cr(waymo, Rates::new(2, 4, 4, 2)) - 153.69).abs() < 0.02);
        assert!(compression_ratio(carla, Rates::new(3, 1, 1, 1)).is_err());
    }

    #[test]
    fn token_grid_counts() {
        let carla = PlaneDims::from_grid(GridDims::new(16, 128, 128, 8), Rates::uniform(2), 16).unwrap();
        assert_eq!(token_grid(&carla, 2).unwrap().n_tokens(), 1444);
        let tg = token_grid(&toy_dims(), 2).unwrap();
        assert_eq!(tg.n_tokens(), 144);
        assert_eq!(tg.pad.iter().filter(|&&p| p).count(), 12);
        assert!(token_grid(&toy_dims(), 3).is_err());
    }

    #[test]
    fn token_footprints_are_uniform() {
        let d = toy_dims();
        let tg = token_grid(&d, 2).unwrap();
        let mask = rollout_pad_mask(&d);
        let s = d.rolled_side();
        let mut owner = vec![usize::MAX; s * s];
        for tr in 0..tg.side {
            for tc in 0..tg.side {
                let cells: Vec<usize> =
                    (0..2).flat_map(|dr| (0..2).map(move |dc| (tr * 2 + dr) * s + tc * 2 + dc)).collect();
                let pads: Vec<bool> = cells.iter().map(|&i| mask[i]).collect();
                assert!(pads.iter().all(|&p| p == pads[0]));
                assert_eq!(pads[0], tg.pad[tr * tg.side + tc]);
                for i in cells {
                    owner[i] = tr * tg.side + tc;
                }
            }
        }
        assert!(owner.iter().all(|&o| o != usize::MAX));
    }

    #[test]
    fn stats_round_trip() {
        let d = PlaneDims::latent(2, 4, 4, 2, 3);
        let hs: Vec<_> = (0..5).map(|s| HexPlane::random(d, s)).collect();
        let st = PlaneStats::fit(&hs).unwrap();
        let back = st.denormalize(&st.normalize(&hs[0]));
        assert!(back.max_abs_diff(&hs[0]) < 1e-5);
    }

    proptest! {
        #[test]
        fn rollout_is_bijective(seed in any::<u64>(), xl in 1usize..5, zl in 1usize..4, tl in 1usize..4, c in 1usize..4) {
            let d = PlaneDims::latent(tl * 2, xl * 2, xl * 2, zl * 2, c);
            let h = HexPlane::random(d, seed);
            let m = rollout(&h).unwrap();
            prop_assert_eq!(m.padding_cells(), d.z * d.z + d.z * d.t + d.t * d.t);
            prop_assert_eq!(m.pad_mask.len() - m.padding_cells(), d.plane_cells());
            for (i, &p) in m.pad_mask.iter().enumerate() {
                if p {
                    prop_assert!(m.data[i * c..(i + 1) * c].iter().all(|&v| v == 0.0));
                }
            }
            let back = unrollout(&m, &d, true).unwrap();
            prop_assert_eq!(&back, &h);
            prop_assert_eq!(rollout(&back).unwrap(), m);
        }
    }
}
