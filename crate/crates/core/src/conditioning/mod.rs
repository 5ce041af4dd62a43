//! Condition encoders and HexPlane editing applications.
//!
//! Command and trajectory conditions are vectors added to the timestep
//! embedding that drives adaLN-Zero; the layout raster and a conditioning
//! HexPlane become token sequences for cross-attention. The applications
//! (inpainting, outpainting, autoregressive extension, forecasting) wrap the
//! sampler in [`crate::diffusion::Generator`].

mod apps;
mod encoders;
mod mask;

use std::fmt;
use std::str::FromStr;

pub use apps::{extend_sequence, forecast, inpaint, outpaint, shift_x, Coverage};
pub use encoders::{CondEncoders, Context};
pub use mask::{extend_mask, InpaintMask, PlaneMasks};

use crate::error::{Error, Result};
use crate::hexplane::{HexPlane, PlaneDims};
use crate::occgrid::SemanticGrid;

/// Discrete driving command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Command {
    Static,
    Forward,
    TurnLeft,
    TurnRight,
}

impl Command {
    pub const ALL: [Command; 4] = [Command::Static, Command::Forward, Command::TurnLeft, Command::TurnRight];

    /// Row of the embedding table.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Command::Static => "STATIC",
            Command::Forward => "FORWARD",
            Command::TurnLeft => "TURN_LEFT",
            Command::TurnRight => "TURN_RIGHT",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace([' ', '-'], "_");
        Command::ALL
            .into_iter()
            .find(|c| c.keyword() == norm)
            .ok_or_else(|| Error::Invalid(format!("unknown command {s:?}; expected STATIC, FORWARD, TURN_LEFT or TURN_RIGHT")))
    }
}

/// Bird's-eye vehicle occupancy at latent resolution, row-major `(t, x, y)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub t: usize,
    pub x: usize,
    pub y: usize,
    pub cells: Vec<bool>,
}

impl Layout {
    pub fn empty(t: usize, x: usize, y: usize) -> Self {
        Self { t, x, y, cells: vec![false; t * x * y] }
    }

    pub fn get(&self, t: usize, x: usize, y: usize) -> bool {
        self.cells[(t * self.x + x) * self.y + y]
    }

    pub fn set(&mut self, t: usize, x: usize, y: usize, v: bool) {
        self.cells[(t * self.x + x) * self.y + y] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn check(&self, dims: &PlaneDims) -> Result<()> {
        if (self.t, self.x, self.y) != (dims.t, dims.x, dims.y) || self.cells.len() != self.t * self.x * self.y {
            return Err(Error::Dims(format!(
                "layout {}x{}x{} does not match latent {}x{}x{}",
                self.t, self.x, self.y, dims.t, dims.x, dims.y
            )));
        }
        Ok(())
    }
}

/// Optional conditions; an absent field is excluded from the denoiser.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConditionBundle {
    pub command: Option<Command>,
    /// Ego XY positions in meters, one per frame.
    pub trajectory: Option<Vec<[f64; 2]>>,
    pub layout: Option<Layout>,
    pub cond_hexplane: Option<HexPlane>,
}

impl ConditionBundle {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.command.is_none() && self.trajectory.is_none() && self.layout.is_none() && self.cond_hexplane.is_none()
    }

    pub fn with_command(mut self, c: Command) -> Self {
        self.command = Some(c);
        self
    }

    pub fn with_trajectory(mut self, traj: Vec<[f64; 2]>) -> Self {
        self.trajectory = Some(traj);
        self
    }

    pub fn with_layout(mut self, layout: Layout) -> Self {
        self.layout = Some(layout);
        self
    }

    pub fn with_hexplane(mut self, h: HexPlane) -> Self {
        self.cond_hexplane = Some(h);
        self
    }

    /// Checks every present field against the generator geometry.
    pub fn validate(&self, dims: &PlaneDims, frames: usize) -> Result<()> {
        if let Some(tr) = &self.trajectory {
            check_trajectory(tr, frames)?;
        }
        if let Some(l) = &self.layout {
            l.check(dims)?;
        }
        if let Some(h) = &self.cond_hexplane {
            if h.dims() != *dims {
                return Err(Error::Dims(format!("condition HexPlane {:?} does not match {:?}", h.dims(), dims)));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_trajectory(traj: &[[f64; 2]], frames: usize) -> Result<()> {
    if traj.len() != frames {
        return Err(Error::Shape(format!("trajectory has {} points, expected {frames}", traj.len())));
    }
    if traj.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("trajectory".into()));
    }
    Ok(())
}

/// Per-frame BEV occupancy of `vehicle_class` max-pooled to the latent `(Tl, Xl, Yl)` lattice.
pub fn extract_layout(q: &SemanticGrid, vehicle_class: u8, dims: &PlaneDims) -> Result<Layout> {
    if vehicle_class as u16 >= q.num_classes() {
        return Err(Error::LabelOutOfRange { label: vehicle_class as u32, num_classes: q.num_classes() as u32 });
    }
    let g = q.dims();
    let r = dims.rates;
    if (g.t, g.x, g.y) != (dims.t * r.t, dims.x * r.x, dims.y * r.y) {
        return Err(Error::Dims(format!(
            "grid {:?} does not pool onto latent {}x{}x{} with rates {:?}",
            g, dims.t, dims.x, dims.y, r
        )));
    }
    let mut out = Layout::empty(dims.t, dims.x, dims.y);
    for t in 0..g.t {
        for x in 0..g.x {
            for y in 0..g.y {
                if (0..g.z).any(|z| q.get(t, x, y, z) == vehicle_class) {
                    out.set(t / r.t, x / r.x, y / r.y, true);
                }
            }
        }
    }
    Ok(out)
}
