use crate::error::{Error, Result};
use crate::hexplane::{rollout_layout, PlaneDims, PlaneKind};

/// XY mask at latent resolution, row-major `(x, y)`; `true` marks cells to regenerate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InpaintMask {
    pub x: usize,
    pub y: usize,
    pub cells: Vec<bool>,
}

impl InpaintMask {
    pub fn new(x: usize, y: usize, cells: Vec<bool>) -> Result<Self> {
        if x == 0 || y == 0 || cells.len() != x * y {
            return Err(Error::Shape(format!("mask of {} cells for {x}x{y}", cells.len())));
        }
        Ok(Self { x, y, cells })
    }

    pub fn empty(x: usize, y: usize) -> Self {
        Self { x, y, cells: vec![false; x * y] }
    }

    pub fn full(x: usize, y: usize) -> Self {
        Self { x, y, cells: vec![true; x * y] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.cells[x * self.y + y]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.cells[x * self.y + y] = v;
    }

    pub fn any(&self) -> bool {
        self.cells.iter().any(|&c| c)
    }
}

/// One boolean per plane cell, in [`PlaneKind`] order; `true` = regenerate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlaneMasks {
    pub dims: PlaneDims,
    pub masks: [Vec<bool>; 6],
}

impl PlaneMasks {
    pub fn get(&self, kind: PlaneKind, r: usize, c: usize) -> bool {
        let (_, cols) = self.dims.plane_shape(kind);
        self.masks[kind.index()][r * cols + c]
    }

    pub fn count(&self) -> usize {
        self.masks.iter().map(|m| m.iter().filter(|&&v| v).count()).sum()
    }

    /// Cell-level mask of the rolled square; padding cells are `false`.
    pub fn rolled(&self) -> Vec<bool> {
        let s = self.dims.rolled_side();
        let mut out = vec![false; s * s];
        for blk in rollout_layout(&self.dims) {
            let (rows, cols) = self.dims.plane_shape(blk.kind);
            for a in 0..rows {
                for b in 0..cols {
                    let (r, c) = blk.square_pos(a, b);
                    out[r * s + c] = self.masks[blk.kind.index()][a * cols + b];
                }
            }
        }
        out
    }
}

/// Marks every plane cell whose spatial footprint meets the masked XY region.
///
/// P_xy takes the mask itself; P_xz and P_tx mark row/column `x` when any `y`
/// is masked at that `x`; P_yz and P_ty mark `y` when any `x` is masked;
/// P_tz spans all of XY and is marked entirely as soon as one cell is.
pub fn extend_mask(m: &InpaintMask, dims: &PlaneDims) -> Result<PlaneMasks> {
    if (m.x, m.y) != (dims.x, dims.y) || m.cells.len() != m.x * m.y {
        return Err(Error::Dims(format!("mask {}x{} does not match latent XY {}x{}", m.x, m.y, dims.x, dims.y)));
    }
    let any_x: Vec<bool> = (0..m.x).map(|x| (0..m.y).any(|y| m.get(x, y))).collect();
    let any_y: Vec<bool> = (0..m.y).map(|y| (0..m.x).any(|x| m.get(x, y))).collect();
    let any = m.any();
    let masks = PlaneKind::ALL.map(|k| {
        let (rows, cols) = dims.plane_shape(k);
        let mut out = Vec::with_capacity(rows * cols);
        for a in 0..rows {
            for b in 0..cols {
                out.push(match k {
                    PlaneKind::Xy => m.get(a, b),
                    PlaneKind::Xz => any_x[a],
                    PlaneKind::Yz => any_y[a],
                    PlaneKind::Tx => any_x[b],
                    PlaneKind::Ty => any_y[b],
                    PlaneKind::Tz => any,
                });
            }
        }
        out
    });
    Ok(PlaneMasks { dims: *dims, masks })
}
