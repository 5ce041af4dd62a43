use candle_core::{Device, Tensor};

use super::{check_trajectory, Command, ConditionBundle, Layout};
use crate::diffusion::Tokenizer;
use crate::error::{Error, Result};
use crate::hexplane::{rollout, HexPlane, PlaneDims};
use crate::nn::{Init, Linear, ParamStore};

/// Additive attention bias that hides a context token.
const HIDDEN: f64 = -1e9;

/// Cross-attention context of a batch.
#[derive(Debug, Clone)]
pub struct Context {
    /// `(B, L, W)` condition tokens.
    pub tokens: Tensor,
    /// `(B, L)`, zero on tokens of present conditions.
    pub key_bias: Tensor,
    /// `(B, 1, 1)`, one for samples with at least one context condition.
    pub present: Tensor,
}

/// Learned embeddings of the five condition types.
pub struct CondEncoders {
    dims: PlaneDims,
    frames: usize,
    width: usize,
    cmd_table: Tensor,
    traj_fc1: Linear,
    traj_fc2: Linear,
    layout_embed: Linear,
    hex_embed: Linear,
    /// Grid indices of the tokens covering the P_xy block.
    layout_tokens: Vec<usize>,
    layout_idx: Tensor,
    layout_pos: Tensor,
    active_pos: Tensor,
}

impl CondEncoders {
    pub fn new(ps: &mut ParamStore, tok: &Tokenizer, frames: usize, width: usize) -> Result<Self> {
        let dims = tok.dims;
        let p = tok.patch();
        let g = tok.grid.side;
        let layout_tokens: Vec<usize> =
            (0..dims.x / p).flat_map(|r| (0..dims.y / p).map(move |c| r * g + c)).collect();
        let idx: Vec<u32> = layout_tokens.iter().map(|&i| i as u32).collect();
        Ok(Self {
            dims,
            frames,
            width,
            cmd_table: ps.var("cond.cmd_table", &[Command::ALL.len(), width], Init::Normal(0.02))?,
            traj_fc1: ps.linear("cond.traj_fc1", 2 * frames, width)?,
            traj_fc2: ps.linear("cond.traj_fc2", width, width)?,
            layout_embed: ps.linear("cond.layout_embed", p * p * dims.t, width)?,
            hex_embed: ps.linear("cond.hex_embed", p * p * dims.channels, width)?,
            layout_idx: Tensor::from_vec(idx, layout_tokens.len(), &Device::Cpu)?,
            layout_pos: tok.pos_at(&layout_tokens)?,
            active_pos: tok.pos_at(tok.active())?,
            layout_tokens,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Grid indices of the layout tokens, `Xl·Yl/p²` of them.
    pub fn layout_token_indices(&self) -> &[usize] {
        &self.layout_tokens
    }

    /// Embedding row of `cmd`, shape `(W,)`.
    pub fn encode_command(&self, cmd: Command) -> Result<Tensor> {
        Ok(self.cmd_table.get(cmd.index())?)
    }

    /// Two-layer MLP of the flattened trajectory, shape `(W,)`.
    pub fn encode_trajectory(&self, traj: &[[f64; 2]]) -> Result<Tensor> {
        check_trajectory(traj, self.frames)?;
        let flat: Vec<f64> = traj.iter().flatten().copied().collect();
        let x = Tensor::from_vec(flat, (1, 2 * self.frames), &Device::Cpu)?.to_dtype(self.cmd_table.dtype())?;
        Ok(self.traj_mlp(&x)?.squeeze(0)?)
    }

    fn traj_mlp(&self, x: &Tensor) -> Result<Tensor> {
        self.traj_fc2.forward(&self.traj_fc1.forward(x)?.silu()?)
    }

    /// Layout tokens `(Xl·Yl/p², W)` at the P_xy block positions.
    pub fn embed_layout(&self, layout: &Layout, tok: &Tokenizer) -> Result<Tensor> {
        layout.check(&self.dims)?;
        Ok(self.layout_batch(&[Some(layout)], tok)?.squeeze(0)?)
    }

    /// Tokens `(N_active, W)` of a (normalized) conditioning HexPlane.
    pub fn embed_cond_hexplane(&self, h: &HexPlane, tok: &Tokenizer) -> Result<Tensor> {
        Ok(self.hexplane_batch(&[Some(h)], tok)?.squeeze(0)?)
    }

    fn layout_batch(&self, layouts: &[Option<&Layout>], tok: &Tokenizer) -> Result<Tensor> {
        let d = self.dims;
        let s = tok.side;
        let mut raster = vec![0f32; layouts.len() * s * s * d.t];
        for (b, l) in layouts.iter().enumerate() {
            let Some(l) = l else { continue };
            l.check(&d)?;
            for t in 0..d.t {
                for x in 0..d.x {
                    for y in 0..d.y {
                        if l.get(t, x, y) {
                            raster[((b * s + x) * s + y) * d.t + t] = 1.0;
                        }
                    }
                }
            }
        }
        let dtype = self.cmd_table.dtype();
        let r = Tensor::from_vec(raster, (layouts.len(), s, s, d.t), &Device::Cpu)?.to_dtype(dtype)?;
        let patches = tok.patchify(&r)?.index_select(&self.layout_idx, 1)?;
        Ok(self.layout_embed.forward(&patches)?.broadcast_add(&self.layout_pos)?)
    }

    fn hexplane_batch(&self, hs: &[Option<&HexPlane>], tok: &Tokenizer) -> Result<Tensor> {
        let s = tok.side;
        let c = self.dims.channels;
        let mut data = vec![0f32; hs.len() * s * s * c];
        for (b, h) in hs.iter().enumerate() {
            let Some(h) = h else { continue };
            if h.dims() != self.dims {
                return Err(Error::Dims(format!("condition HexPlane {:?} does not match {:?}", h.dims(), self.dims)));
            }
            let m = rollout(h)?;
            data[b * s * s * c..(b + 1) * s * s * c].copy_from_slice(&m.data);
        }
        let dtype = self.cmd_table.dtype();
        let x = Tensor::from_vec(data, (hs.len(), s, s, c), &Device::Cpu)?.to_dtype(dtype)?;
        let patches = tok.select_active(&tok.patchify(&x)?)?;
        Ok(self.hex_embed.forward(&patches)?.broadcast_add(&self.active_pos)?)
    }

    /// Sum of the present vector conditions per sample, `(B, W)`, or `None`
    /// when no sample carries a command or trajectory.
    pub fn vector(&self, conds: &[&ConditionBundle]) -> Result<Option<Tensor>> {
        let dtype = self.cmd_table.dtype();
        let dev = &Device::Cpu;
        let b = conds.len();
        let mut out: Option<Tensor> = None;
        let mut add = |t: Tensor| -> Result<()> {
            out = Some(match out.take() {
                Some(o) => (o + t)?,
                None => t,
            });
            Ok(())
        };
        if conds.iter().any(|c| c.command.is_some()) {
            let ids: Vec<u32> = conds.iter().map(|c| c.command.map_or(0, |k| k.index() as u32)).collect();
            let mask: Vec<f32> = conds.iter().map(|c| if c.command.is_some() { 1.0 } else { 0.0 }).collect();
            let rows = self.cmd_table.index_select(&Tensor::from_vec(ids, b, dev)?, 0)?;
            let mask = Tensor::from_vec(mask, (b, 1), dev)?.to_dtype(dtype)?;
            add(rows.broadcast_mul(&mask)?)?;
        }
        if conds.iter().any(|c| c.trajectory.is_some()) {
            let mut flat = vec![0f64; b * 2 * self.frames];
            let mut mask = vec![0f32; b];
            for (i, c) in conds.iter().enumerate() {
                if let Some(tr) = &c.trajectory {
                    check_trajectory(tr, self.frames)?;
                    for (j, v) in tr.iter().flatten().enumerate() {
                        flat[i * 2 * self.frames + j] = *v;
                    }
                    mask[i] = 1.0;
                }
            }
            let x = Tensor::from_vec(flat, (b, 2 * self.frames), dev)?.to_dtype(dtype)?;
            let mask = Tensor::from_vec(mask, (b, 1), dev)?.to_dtype(dtype)?;
            add(self.traj_mlp(&x)?.broadcast_mul(&mask)?)?;
        }
        Ok(out)
    }

    /// Cross-attention tokens of the layout and conditioning-HexPlane fields,
    /// or `None` when no sample carries either. `cond_hexplane` must already
    /// be in the normalized space of the denoiser.
    pub fn context(&self, conds: &[&ConditionBundle], tok: &Tokenizer) -> Result<Option<Context>> {
        let has_layout = conds.iter().any(|c| c.layout.is_some());
        let has_hex = conds.iter().any(|c| c.cond_hexplane.is_some());
        if !has_layout && !has_hex {
            return Ok(None);
        }
        let b = conds.len();
        let mut parts = Vec::new();
        let mut bias: Vec<Vec<f64>> = vec![Vec::new(); b];
        if has_layout {
            let ls: Vec<Option<&Layout>> = conds.iter().map(|c| c.layout.as_ref()).collect();
            parts.push(self.layout_batch(&ls, tok)?);
            let n = self.layout_tokens.len();
            for (i, l) in ls.iter().enumerate() {
                bias[i].extend(std::iter::repeat_n(if l.is_some() { 0.0 } else { HIDDEN }, n));
            }
        }
        if has_hex {
            let hs: Vec<Option<&HexPlane>> = conds.iter().map(|c| c.cond_hexplane.as_ref()).collect();
            parts.push(self.hexplane_batch(&hs, tok)?);
            let n = tok.n_active();
            for (i, h) in hs.iter().enumerate() {
                bias[i].extend(std::iter::repeat_n(if h.is_some() { 0.0 } else { HIDDEN }, n));
            }
        }
        let dtype = self.cmd_table.dtype();
        let tokens = Tensor::cat(&parts, 1)?;
        let l = tokens.dim(1)?;
        let present: Vec<f64> = bias.iter().map(|r| if r.iter().any(|&v| v == 0.0) { 1.0 } else { 0.0 }).collect();
        let key_bias = Tensor::from_vec(bias.concat(), (b, l), &Device::Cpu)?.to_dtype(dtype)?;
        let present = Tensor::from_vec(present, (b, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Some(Context { tokens, key_bias, present }))
    }
}
