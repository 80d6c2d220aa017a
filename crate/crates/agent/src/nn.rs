//! Reusable network building blocks over the autodiff tape: linear layers,
//! multi-head attention, pre-norm transformer blocks, and timestep
//! encodings. Each block owns its parameter names; `init` registers the
//! parameters and `forward` binds them onto a tape.

use crate::error::Result;
use rand::Rng;
use voxbc_tensor::{ParamStore, Scalar, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform ±1/sqrt(fan_in) weights, zero bias.
    FanIn,
    /// All-zero weights and bias.
    Zero,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
    pub init: Init,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize) -> Linear {
        Linear { name: name.to_string(), in_dim, out_dim, bias: true, init: Init::FanIn }
    }

    pub fn without_bias(mut self) -> Linear {
        self.bias = false;
        self
    }

    pub fn zero_init(mut self) -> Linear {
        self.init = Init::Zero;
        self
    }

    fn w_name(&self) -> String {
        format!("{}.w", self.name)
    }

    fn b_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        let shape = [self.in_dim, self.out_dim];
        match self.init {
            Init::FanIn => store.insert_fan_in(&self.w_name(), &shape, self.in_dim, rng)?,
            Init::Zero => store.insert_zeros(&self.w_name(), &shape)?,
        }
        if self.bias {
            store.insert_zeros(&self.b_name(), &[self.out_dim])?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(&self.w_name(), store)?;
        let y = tape.matmul(x, w)?;
        if self.bias {
            let b = tape.param(&self.b_name(), store)?;
            Ok(tape.add_bias(y, b)?)
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> LayerNorm {
        LayerNorm { name: name.to_string(), dim }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.insert_full(&format!("{}.g", self.name), &[self.dim], T::from_f64(1.0))?;
        Ok(store.insert_zeros(&format!("{}.b", self.name), &[self.dim])?)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let g = tape.param(&format!("{}.g", self.name), store)?;
        let b = tape.param(&format!("{}.b", self.name), store)?;
        Ok(tape.layer_norm(x, g, b, T::from_f64(LN_EPS))?)
    }
}

/// Multi-head attention: shared projections, per-head column slices through
/// scaled dot-product attention, concatenated and reprojected.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    proj_q: Linear,
    proj_k: Linear,
    proj_v: Linear,
    proj_o: Linear,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize) -> Result<MultiHeadAttention> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::error::AgentError::Config(format!(
                "attention dim {dim} is not divisible into {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            name: name.to_string(),
            dim,
            heads,
            proj_q: Linear::new(&format!("{name}.q"), dim, dim).without_bias(),
            proj_k: Linear::new(&format!("{name}.k"), dim, dim).without_bias(),
            proj_v: Linear::new(&format!("{name}.v"), dim, dim).without_bias(),
            proj_o: Linear::new(&format!("{name}.o"), dim, dim),
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.proj_q.init(store, rng)?;
        self.proj_k.init(store, rng)?;
        self.proj_v.init(store, rng)?;
        self.proj_o.init(store, rng)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        q_in: Var,
        kv_in: Var,
        causal: bool,
    ) -> Result<Var> {
        let q = self.proj_q.forward(tape, store, q_in)?;
        let k = self.proj_k.forward(tape, store, kv_in)?;
        let v = self.proj_v.forward(tape, store, kv_in)?;
        let dh = self.dim / self.heads;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            heads.push(tape.attention(qh, kh, vh, causal)?);
        }
        let cat = tape.concat_cols(&heads)?;
        self.proj_o.forward(tape, store, cat)
    }
}

/// Two-layer GELU feed-forward.
#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(name: &str, dim: usize, mult: usize) -> FeedForward {
        FeedForward {
            up: Linear::new(&format!("{name}.up"), dim, dim * mult),
            down: Linear::new(&format!("{name}.down"), dim * mult, dim),
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.up.init(store, rng)?;
        self.down.init(store, rng)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.down.forward(tape, store, h)
    }
}

/// Pre-norm residual block: x + Attn(LN(x)); x + FF(LN(x)).
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
    pub causal: bool,
}

impl SelfAttentionBlock {
    pub fn new(
        name: &str,
        dim: usize,
        heads: usize,
        ff_mult: usize,
        causal: bool,
    ) -> Result<SelfAttentionBlock> {
        Ok(SelfAttentionBlock {
            ln_attn: LayerNorm::new(&format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, heads)?,
            ln_ff: LayerNorm::new(&format!("{name}.ln2"), dim),
            ff: FeedForward::new(&format!("{name}.ff"), dim, ff_mult),
            causal,
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.ln_attn.init(store)?;
        self.attn.init(store, rng)?;
        self.ln_ff.init(store)?;
        self.ff.init(store, rng)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let n = self.ln_attn.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, n, n, self.causal)?;
        let x = tape.add(x, a)?;
        let n = self.ln_ff.forward(tape, store, x)?;
        let f = self.ff.forward(tape, store, n)?;
        Ok(tape.add(x, f)?)
    }
}

/// Pre-norm residual cross-attention: q + Attn(LN(q), LN(kv)); q + FF(LN(q)).
#[derive(Debug, Clone)]
pub struct CrossAttentionBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl CrossAttentionBlock {
    pub fn new(name: &str, dim: usize, heads: usize, ff_mult: usize) -> Result<CrossAttentionBlock> {
        Ok(CrossAttentionBlock {
            ln_q: LayerNorm::new(&format!("{name}.lnq"), dim),
            ln_kv: LayerNorm::new(&format!("{name}.lnkv"), dim),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, heads)?,
            ln_ff: LayerNorm::new(&format!("{name}.ln2"), dim),
            ff: FeedForward::new(&format!("{name}.ff"), dim, ff_mult),
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.ln_q.init(store)?;
        self.ln_kv.init(store)?;
        self.attn.init(store, rng)?;
        self.ln_ff.init(store)?;
        self.ff.init(store, rng)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        q: Var,
        kv: Var,
    ) -> Result<Var> {
        let nq = self.ln_q.forward(tape, store, q)?;
        let nkv = self.ln_kv.forward(tape, store, kv)?;
        let a = self.attn.forward(tape, store, nq, nkv, false)?;
        let q = tape.add(q, a)?;
        let n = self.ln_ff.forward(tape, store, q)?;
        let f = self.ff.forward(tape, store, n)?;
        Ok(tape.add(q, f)?)
    }
}

/// Fixed sinusoidal encoding of an integer timestep. `dim` must be even.
pub fn timestep_encoding<T: Scalar>(t: usize, dim: usize) -> Result<Vec<T>> {
    if dim % 2 != 0 {
        return Err(crate::error::AgentError::Config(format!(
            "timestep encoding dim {dim} must be even"
        )));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        let angle = t as f64 * freq;
        out.push(T::from_f64(angle.sin()));
        out.push(T::from_f64(angle.cos()));
    }
    Ok(out)
}
