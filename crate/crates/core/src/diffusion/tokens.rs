use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::hexplane::{token_grid, PlaneDims, TokenGrid};

/// Fixed 2D sine-cosine embedding of a `side × side` token grid, `(side², width)`.
///
/// The first half of the channels encodes the token row, the second half the
/// column; each half is `[sin(p·ω_i) | cos(p·ω_i)]` with `ω_i = 10000^{−i/(width/4)}`.
pub fn sincos_2d(width: usize, side: usize) -> Result<Vec<f32>> {
    if width % 4 != 0 {
        return Err(Error::Config(format!("positional width {width} must be a multiple of 4")));
    }
    let quarter = width / 4;
    let omega: Vec<f64> = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
    let mut out = Vec::with_capacity(side * side * width);
    for r in 0..side {
        for c in 0..side {
            for p in [r, c] {
                out.extend(omega.iter().map(|w| (p as f64 * w).sin() as f32));
                out.extend(omega.iter().map(|w| (p as f64 * w).cos() as f32));
            }
        }
    }
    Ok(out)
}

/// Patchification of rolled maps and the inverse scatter back to the square.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub dims: PlaneDims,
    pub grid: TokenGrid,
    /// Rolled side `S`.
    pub side: usize,
    active: Vec<usize>,
    active_idx: Tensor,
    /// For every token of the grid, its row in `[active tokens; zero row]`.
    scatter_idx: Tensor,
    /// `(side², width)` fixed positional table.
    pos: Tensor,
}

impl Tokenizer {
    pub fn new(dims: PlaneDims, patch: usize, width: usize, dtype: DType) -> Result<Self> {
        dims.require_square()?;
        let grid = token_grid(&dims, patch)?;
        let active = grid.active();
        let na = active.len();
        let mut scatter = vec![na as u32; grid.n_tokens()];
        for (i, &g) in active.iter().enumerate() {
            scatter[g] = i as u32;
        }
        let dev = &Device::Cpu;
        let g = grid.side;
        let pos = Tensor::from_vec(sincos_2d(width, g)?, (g * g, width), dev)?.to_dtype(dtype)?;
        Ok(Self {
            dims,
            side: dims.rolled_side(),
            active_idx: Tensor::from_vec(active.iter().map(|&i| i as u32).collect::<Vec<_>>(), na, dev)?,
            scatter_idx: Tensor::from_vec(scatter, grid.n_tokens(), dev)?,
            active,
            grid,
            pos,
        })
    }

    pub fn patch(&self) -> usize {
        self.grid.patch
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    /// Grid indices of the content tokens.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn pos_table(&self) -> &Tensor {
        &self.pos
    }

    /// Positional rows for the given grid indices, `(n, width)`.
    pub fn pos_at(&self, idx: &[usize]) -> Result<Tensor> {
        let idx = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
        Ok(self.pos.index_select(&idx, 0)?)
    }

    /// `(B, S, S, c)` to every token `(B, G², p²·c)`, features ordered `(dr, dc, channel)`.
    pub fn patchify(&self, x: &Tensor) -> Result<Tensor> {
        let (b, s, s2, c) = x.dims4()?;
        if s != self.side || s2 != self.side {
            return Err(Error::Shape(format!("rolled map {s}x{s2} does not match token grid side {}", self.side)));
        }
        let p = self.patch();
        let g = self.grid.side;
        let t = x.reshape(vec![b, g, p, g, p, c])?.permute(vec![0, 1, 3, 2, 4, 5])?.contiguous()?;
        Ok(t.reshape((b, g * g, p * p * c))?)
    }

    /// Content tokens of a patchified map, `(B, N_active, D)`.
    pub fn select_active(&self, tokens: &Tensor) -> Result<Tensor> {
        Ok(tokens.index_select(&self.active_idx, 1)?)
    }

    /// Inverse of `select_active ∘ patchify`; padding tokens come back as zeros.
    pub fn unpatchify(&self, tokens: &Tensor, channels: usize) -> Result<Tensor> {
        let (b, na, d) = tokens.dims3()?;
        let p = self.patch();
        if na != self.n_active() || d != p * p * channels {
            return Err(Error::Shape(format!(
                "{na} tokens of width {d}, expected {} of width {}",
                self.n_active(),
                p * p * channels
            )));
        }
        let zero = Tensor::zeros((b, 1, d), tokens.dtype(), tokens.device())?;
        let full = Tensor::cat(&[tokens, &zero], 1)?.index_select(&self.scatter_idx, 1)?;
        let g = self.grid.side;
        let t = full.reshape(vec![b, g, g, p, p, channels])?.permute(vec![0, 1, 3, 2, 4, 5])?.contiguous()?;
        Ok(t.reshape((b, self.side, self.side, channels))?)
    }
}
