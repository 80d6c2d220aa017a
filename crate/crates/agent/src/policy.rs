//! Voxel policy: patch tokens from the feature grid, a latent-bottleneck
//! attention stack, and the three action heads (voxel coordinate, per-axis
//! rotation bins, gripper).

use crate::action::{DiscretizedAction, GRIP_CLASSES};
use crate::error::{AgentError, Result};
use crate::lang::MAX_TOKENS;
use crate::nn::{CrossAttentionBlock, Linear, SelfAttentionBlock};
use crate::voxel::{VoxelGrid, GRID_CHANNELS};
use rand::Rng;
use serde::{Deserialize, Serialize};
use voxbc_tensor::{ParamStore, Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordHead {
    /// Per-token linear to P³ logits, scattered back onto the voxel grid.
    Transpose,
    /// Per-token scalar logit broadcast across its patch.
    Upsample,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Voxel grid edge length.
    pub v: usize,
    /// Patch edge length; must divide `v`.
    pub p: usize,
    pub n_lat: usize,
    pub d_lat: usize,
    /// Latent self-attention layers.
    pub l_sa: usize,
    pub rot_bins: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub coord_head: CoordHead,
    /// Width of the incoming skill code.
    pub code_dim: usize,
    /// Width of the incoming language embedding rows.
    pub lang_dim: usize,
}

impl Default for PolicyConfig {
    fn default() -> PolicyConfig {
        PolicyConfig {
            v: 32,
            p: 4,
            n_lat: 64,
            d_lat: 128,
            l_sa: 6,
            rot_bins: crate::action::ROT_BINS,
            heads: 4,
            ff_mult: 2,
            coord_head: CoordHead::Transpose,
            code_dim: 64,
            lang_dim: 64,
        }
    }
}

impl PolicyConfig {
    pub fn tokens_per_axis(&self) -> usize {
        self.v / self.p
    }

    pub fn token_count(&self) -> usize {
        let vp = self.tokens_per_axis();
        vp * vp * vp
    }

    pub fn validate(&self) -> Result<()> {
        if self.v == 0 || self.p == 0 || self.v % self.p != 0 {
            return Err(AgentError::Config(format!(
                "patch size {} must divide grid size {}",
                self.p, self.v
            )));
        }
        for (name, v) in
            [("latent count", self.n_lat), ("latent dim", self.d_lat), ("heads", self.heads)]
        {
            if v == 0 {
                return Err(AgentError::Config(format!("{name} must be positive")));
            }
        }
        if self.d_lat % self.heads != 0 {
            return Err(AgentError::Config(format!(
                "latent dim {} is not divisible into {} heads",
                self.d_lat, self.heads
            )));
        }
        if self.rot_bins == 0 {
            return Err(AgentError::Config("rotation needs at least one bin".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct PolicyOutput {
    /// V³ logits, flat index iz + V·iy + V²·ix.
    pub coord: Var,
    /// Per-axis rotation logits, rot_bins each.
    pub rot: [Var; 3],
    /// Two logits: 0 = open, 1 = close.
    pub grip: Var,
    /// Shape of the latent stage, for architectural probes.
    pub latent_shape: Vec<usize>,
}

pub struct Policy {
    pub cfg: PolicyConfig,
    patch: Linear,
    skill_in: Linear,
    lang_in: Linear,
    encode: CrossAttentionBlock,
    latent_blocks: Vec<SelfAttentionBlock>,
    decode: CrossAttentionBlock,
    coord_out: Linear,
    rot_hidden: Linear,
    rot_out: Linear,
    grip_hidden: Linear,
    grip_out: Linear,
}

impl Policy {
    pub fn new(cfg: PolicyConfig) -> Result<Policy> {
        cfg.validate()?;
        let d = cfg.d_lat;
        let patch_in = GRID_CHANNELS * cfg.p * cfg.p * cfg.p;
        let coord_out_dim = match cfg.coord_head {
            CoordHead::Transpose => cfg.p * cfg.p * cfg.p,
            CoordHead::Upsample => 1,
        };
        let latent_blocks = (0..cfg.l_sa)
            .map(|i| SelfAttentionBlock::new(&format!("policy.sa{i}"), d, cfg.heads, cfg.ff_mult, false))
            .collect::<Result<Vec<_>>>()?;
        Ok(Policy {
            patch: Linear::new("policy.patch", patch_in, d),
            skill_in: Linear::new("policy.skill_in", cfg.code_dim, d),
            lang_in: Linear::new("policy.lang_in", cfg.lang_dim, d),
            encode: CrossAttentionBlock::new("policy.enc", d, cfg.heads, cfg.ff_mult)?,
            latent_blocks,
            decode: CrossAttentionBlock::new("policy.dec", d, cfg.heads, cfg.ff_mult)?,
            coord_out: Linear::new("policy.coord", d, coord_out_dim),
            rot_hidden: Linear::new("policy.rot_h", d, d),
            rot_out: Linear::new("policy.rot", d, 3 * cfg.rot_bins),
            grip_hidden: Linear::new("policy.grip_h", d, d),
            grip_out: Linear::new("policy.grip", d, GRIP_CLASSES),
            cfg,
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.patch.init(store, rng)?;
        store.insert_fan_in(
            "policy.pos",
            &[self.cfg.token_count(), self.cfg.d_lat],
            self.cfg.d_lat,
            rng,
        )?;
        store.insert_fan_in(
            "policy.latents",
            &[self.cfg.n_lat, self.cfg.d_lat],
            self.cfg.d_lat,
            rng,
        )?;
        self.skill_in.init(store, rng)?;
        self.lang_in.init(store, rng)?;
        self.encode.init(store, rng)?;
        for b in &self.latent_blocks {
            b.init(store, rng)?;
        }
        self.decode.init(store, rng)?;
        self.coord_out.init(store, rng)?;
        self.rot_hidden.init(store, rng)?;
        self.rot_out.init(store, rng)?;
        self.grip_hidden.init(store, rng)?;
        self.grip_out.init(store, rng)
    }

    /// Rearranges the grid into per-patch rows: token (tx·vp+ty)·vp+tz maps
    /// to row [c-major, then dx,dy,dz] — the kernel=stride convolution
    /// written as one linear map.
    fn patch_rows<T: Scalar>(&self, grid: &VoxelGrid) -> Result<(Vec<T>, usize)> {
        let v = self.cfg.v;
        if grid.v != v {
            return Err(AgentError::Dimension(format!(
                "grid edge {} does not match policy edge {v}",
                grid.v
            )));
        }
        let p = self.cfg.p;
        let vp = self.cfg.tokens_per_axis();
        let n = v * v * v;
        let p3 = p * p * p;
        let row_len = GRID_CHANNELS * p3;
        let src = grid.features.data();
        let mut data = vec![T::from_f64(0.0); self.cfg.token_count() * row_len];
        for tx in 0..vp {
            for ty in 0..vp {
                for tz in 0..vp {
                    let tok = (tx * vp + ty) * vp + tz;
                    let row = &mut data[tok * row_len..(tok + 1) * row_len];
                    for c in 0..GRID_CHANNELS {
                        for dx in 0..p {
                            for dy in 0..p {
                                for dz in 0..p {
                                    let flat = ((tx * p + dx) * v + (ty * p + dy)) * v
                                        + (tz * p + dz);
                                    let inner = ((dx * p) + dy) * p + dz;
                                    row[c * p3 + inner] =
                                        T::from_f64(src[c * n + flat] as f64);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((data, row_len))
    }

    /// Voxel grid → (V/P)³ tokens with the learned positional table added.
    pub fn patchify<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        grid: &VoxelGrid,
    ) -> Result<Var> {
        let (rows, row_len) = self.patch_rows::<T>(grid)?;
        let x = tape.constant(rows, &[self.cfg.token_count(), row_len])?;
        let tokens = self.patch.forward(tape, store, x)?;
        let pos = tape.param("policy.pos", store)?;
        Ok(tape.add(tokens, pos)?)
    }

    /// Full pass: [voxel tokens ‖ skill token ‖ language tokens] →
    /// latent bottleneck → voxel-token features → heads.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        grid: &VoxelGrid,
        skill_code: Var,
        lang: Var,
    ) -> Result<PolicyOutput> {
        if tape.shape(skill_code) != [1, self.cfg.code_dim] {
            return Err(AgentError::Dimension(format!(
                "skill code shape {:?}, want [1, {}]",
                tape.shape(skill_code),
                self.cfg.code_dim
            )));
        }
        if tape.shape(lang) != [MAX_TOKENS, self.cfg.lang_dim] {
            return Err(AgentError::Dimension(format!(
                "language shape {:?}, want [{MAX_TOKENS}, {}]",
                tape.shape(lang),
                self.cfg.lang_dim
            )));
        }
        let voxel_tokens = self.patchify(tape, store, grid)?;
        let skill_tok = self.skill_in.forward(tape, store, skill_code)?;
        let lang_toks = self.lang_in.forward(tape, store, lang)?;
        let inputs = tape.concat_rows(&[voxel_tokens, skill_tok, lang_toks])?;

        let latents = tape.param("policy.latents", store)?;
        let mut z = self.encode.forward(tape, store, latents, inputs)?;
        for b in &self.latent_blocks {
            z = b.forward(tape, store, z)?;
        }
        let latent_shape = tape.shape(z).to_vec();
        let features = self.decode.forward(tape, store, voxel_tokens, z)?;

        let vp = self.cfg.tokens_per_axis();
        let p3 = self.cfg.p * self.cfg.p * self.cfg.p;
        let coord = match self.cfg.coord_head {
            CoordHead::Transpose => {
                let per_patch = self.coord_out.forward(tape, store, features)?;
                tape.unpatchify3(per_patch, vp, self.cfg.p)?
            }
            CoordHead::Upsample => {
                let scalar = self.coord_out.forward(tape, store, features)?;
                let ones = tape.constant(vec![T::from_f64(1.0); p3], &[1, p3])?;
                let spread = tape.matmul(scalar, ones)?;
                tape.unpatchify3(spread, vp, self.cfg.p)?
            }
        };

        let pooled = tape.mean_rows(features)?;
        let r = self.cfg.rot_bins;
        let rot_h = self.rot_hidden.forward(tape, store, pooled)?;
        let rot_h = tape.relu(rot_h)?;
        let rot_all = self.rot_out.forward(tape, store, rot_h)?;
        let mut rot = Vec::with_capacity(3);
        for axis in 0..3 {
            let slice = tape.slice_cols(rot_all, axis * r, r)?;
            rot.push(tape.reshape(slice, &[r])?);
        }
        let grip_h = self.grip_hidden.forward(tape, store, pooled)?;
        let grip_h = tape.relu(grip_h)?;
        let grip = self.grip_out.forward(tape, store, grip_h)?;
        let grip = tape.reshape(grip, &[GRIP_CLASSES])?;

        Ok(PolicyOutput {
            coord,
            rot: [rot[0], rot[1], rot[2]],
            grip,
            latent_shape,
        })
    }
}

/// Raw logits lifted off the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionLogits {
    pub v: usize,
    pub rot_bins: usize,
    pub coord: Vec<f64>,
    pub rot: [Vec<f64>; 3],
    pub grip: Vec<f64>,
}

impl ActionLogits {
    pub fn from_output<T: Scalar>(
        tape: &Tape<T>,
        out: &PolicyOutput,
        v: usize,
        rot_bins: usize,
    ) -> ActionLogits {
        let grab = |var: Var| tape.data(var).iter().map(|&x| Scalar::to_f64(x)).collect();
        ActionLogits {
            v,
            rot_bins,
            coord: grab(out.coord),
            rot: [grab(out.rot[0]), grab(out.rot[1]), grab(out.rot[2])],
            grip: grab(out.grip),
        }
    }
}

fn argmax_lowest(xs: &[f64], what: &str) -> Result<usize> {
    if xs.is_empty() {
        return Err(AgentError::Dimension(format!("{what} logits are empty")));
    }
    if xs.iter().any(|x| x.is_nan()) {
        return Err(AgentError::Numeric(format!("{what} logits contain NaN")));
    }
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Independent argmax per head; ties resolve to the lowest index.
pub fn decode_action(logits: &ActionLogits) -> Result<DiscretizedAction> {
    let v = logits.v;
    if logits.coord.len() != v * v * v {
        return Err(AgentError::Dimension(format!(
            "{} coordinate logits for grid edge {v}",
            logits.coord.len()
        )));
    }
    let flat = argmax_lowest(&logits.coord, "coordinate")?;
    let coord = crate::action::unflatten_coord(flat, v);
    let mut rot = [0usize; 3];
    for axis in 0..3 {
        if logits.rot[axis].len() != logits.rot_bins {
            return Err(AgentError::Dimension(format!(
                "axis {axis} has {} rotation logits, want {}",
                logits.rot[axis].len(),
                logits.rot_bins
            )));
        }
        rot[axis] = argmax_lowest(&logits.rot[axis], "rotation")?;
    }
    let grip = argmax_lowest(&logits.grip, "gripper")?;
    Ok(DiscretizedAction { coord, rot, close: grip == 1 })
}
