//! Top-level skill model: instruction embedding, per-observation RGB-D
//! encoder, a single-layer causal transformer over the observation set, and
//! the vector-quantized skill codebook with majority voting.

use crate::error::{AgentError, Result};
use crate::lang::{Vocab, MAX_TOKENS};
use crate::nn::{timestep_encoding, LayerNorm, Linear, MultiHeadAttention};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use voxbc_sim::RgbdImage;
use voxbc_tensor::{DenseArray, ParamStore, Scalar, Tape, Var};

/// Depth is clamped to this range and scaled to [0,1]; the miss sentinel
/// maps to 1.
pub const DEPTH_NORM: f64 = 2.0;
/// The observation CNN downsamples by this factor; input resolution must be
/// a multiple of it.
pub const OBS_DOWNSAMPLE: usize = 16;
pub const CODEBOOK_PARAM: &str = "skill.codebook";
/// Ring capacity for recent continuous estimates used by dead-code resets.
pub const RECENT_CAP: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct SkillConfig {
    /// Image edge length the encoder expects.
    pub resolution: usize,
    pub max_tokens: usize,
    /// Language embedding width.
    pub lang_dim: usize,
    /// Transformer width, shared by observation embeddings.
    pub skill_dim: usize,
    pub heads: usize,
    /// Codebook entries.
    pub code_k: usize,
    /// Code vector width.
    pub code_dim: usize,
    /// Steps a code may go unused before being reseeded from a recent
    /// estimate; None disables resets.
    pub reset_after: Option<u64>,
}

impl Default for SkillConfig {
    fn default() -> SkillConfig {
        SkillConfig {
            resolution: 128,
            max_tokens: MAX_TOKENS,
            lang_dim: 64,
            skill_dim: 64,
            heads: 4,
            code_k: 20,
            code_dim: 64,
            reset_after: Some(1000),
        }
    }
}

const OBS_CH: [usize; 3] = [32, 64, 64];

/// Per-camera RGB plus normalized depth, cameras stacked on the channel
/// axis.
const IN_CH: usize = 16;

pub struct SkillEncoder {
    pub cfg: SkillConfig,
    table_rows: usize,
    lang_proj: Linear,
    lang_pool: Linear,
    obs_out: Linear,
    ln: LayerNorm,
    attn: MultiHeadAttention,
    head: Linear,
}

impl SkillEncoder {
    pub fn new(cfg: SkillConfig, vocab: &Vocab) -> Result<SkillEncoder> {
        if cfg.resolution == 0 || cfg.resolution % OBS_DOWNSAMPLE != 0 {
            return Err(AgentError::Config(format!(
                "observation resolution {} must be a positive multiple of {OBS_DOWNSAMPLE}",
                cfg.resolution
            )));
        }
        if cfg.max_tokens != MAX_TOKENS {
            return Err(AgentError::Config(format!(
                "max_tokens {} is fixed at {MAX_TOKENS}",
                cfg.max_tokens
            )));
        }
        if cfg.skill_dim % 2 != 0 {
            return Err(AgentError::Config("skill width must be even".into()));
        }
        if cfg.code_k == 0 {
            return Err(AgentError::Config("codebook must hold at least one code".into()));
        }
        let spatial = cfg.resolution / OBS_DOWNSAMPLE;
        let flat = OBS_CH[2] * spatial * spatial;
        Ok(SkillEncoder {
            table_rows: vocab.table_rows(),
            lang_proj: Linear::new("lang.proj", cfg.lang_dim, cfg.lang_dim).without_bias(),
            lang_pool: Linear::new("lang.pool", cfg.lang_dim, cfg.skill_dim),
            obs_out: Linear::new("obs.out", flat, cfg.skill_dim),
            ln: LayerNorm::new("skill.ln", cfg.skill_dim),
            attn: MultiHeadAttention::new("skill.attn", cfg.skill_dim, cfg.heads)?,
            head: Linear::new("skill.head", cfg.skill_dim, cfg.code_dim),
            cfg,
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        store.insert_fan_in(
            "lang.table",
            &[self.table_rows, self.cfg.lang_dim],
            self.cfg.lang_dim,
            rng,
        )?;
        self.lang_proj.init(store, rng)?;
        self.lang_pool.init(store, rng)?;
        store.insert_fan_in("obs.c1", &[OBS_CH[0], IN_CH, 4, 4], IN_CH * 16, rng)?;
        store.insert_fan_in("obs.c2", &[OBS_CH[1], OBS_CH[0], 2, 2], OBS_CH[0] * 4, rng)?;
        store.insert_fan_in("obs.c3", &[OBS_CH[2], OBS_CH[1], 2, 2], OBS_CH[1] * 4, rng)?;
        self.obs_out.init(store, rng)?;
        self.ln.init(store)?;
        self.attn.init(store, rng)?;
        self.head.init(store, rng)?;
        let k = self.cfg.code_k;
        let bound = 1.0 / k as f64;
        let codes =
            DenseArray::<T>::uniform(&[k, self.cfg.code_dim], -bound, bound, rng);
        Ok(store.insert(CODEBOOK_PARAM, codes)?)
    }

    /// Token lookup with padded rows forced to zero, then the bias-free
    /// projection. Returns (pre-projection, post-projection) embeddings,
    /// both (max_tokens, lang_dim).
    pub fn embed_language<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        vocab: &Vocab,
        instruction: &str,
    ) -> Result<(Var, Var)> {
        let ids = vocab.ids(instruction);
        if ids.is_empty() {
            return Err(AgentError::Input("instruction has no tokens".into()));
        }
        let n = ids.len().min(MAX_TOKENS);
        let padded = vocab.padded_ids(instruction);
        let table = tape.param("lang.table", store)?;
        let rows = tape.embed(table, &padded)?;
        let mut mask = vec![T::from_f64(0.0); MAX_TOKENS * self.cfg.lang_dim];
        mask[..n * self.cfg.lang_dim].fill(T::from_f64(1.0));
        let mask = tape.constant(mask, &[MAX_TOKENS, self.cfg.lang_dim])?;
        let pre = tape.mul(rows, mask)?;
        let post = self.lang_proj.forward(tape, store, pre)?;
        Ok((pre, post))
    }

    /// Mean-pools the (masked) token matrix into one transformer-width row.
    pub fn pooled_language<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        post: Var,
    ) -> Result<Var> {
        let mean = tape.mean_rows(post)?;
        self.lang_pool.forward(tape, store, mean)
    }

    /// Stacks RGB and normalized depth of all four cameras channel-wise and
    /// runs the strided conv stack. Output is one (1, skill_dim) row.
    pub fn encode_observation<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        images: &[RgbdImage],
    ) -> Result<Var> {
        if images.len() != 4 {
            return Err(AgentError::Dimension(format!(
                "expected 4 cameras, got {}",
                images.len()
            )));
        }
        let res = self.cfg.resolution;
        for img in images {
            if img.resolution != res {
                return Err(AgentError::Dimension(format!(
                    "image resolution {} does not match encoder resolution {res}",
                    img.resolution
                )));
            }
        }
        let pixels = res * res;
        let mut data = Vec::with_capacity(IN_CH * pixels);
        for img in images {
            data.extend(img.rgb.iter().map(|&v| T::from_f64(v as f64)));
            data.extend(img.depth.iter().map(|&d| {
                let d = d as f64;
                let d = if d.is_finite() { d.min(DEPTH_NORM) / DEPTH_NORM } else { 1.0 };
                T::from_f64(d)
            }));
        }
        let x = tape.constant(data, &[IN_CH, res, res])?;
        let c1 = tape.param("obs.c1", store)?;
        let x = tape.conv2d(x, c1, 4)?;
        let x = tape.relu(x)?;
        let c2 = tape.param("obs.c2", store)?;
        let x = tape.conv2d(x, c2, 2)?;
        let x = tape.relu(x)?;
        let c3 = tape.param("obs.c3", store)?;
        let x = tape.conv2d(x, c3, 2)?;
        let x = tape.relu(x)?;
        let spatial = res / OBS_DOWNSAMPLE;
        let x = tape.reshape(x, &[1, OBS_CH[2] * spatial * spatial])?;
        self.obs_out.forward(tape, store, x)
    }

    /// Causal pass over [pooled language ‖ observation embeddings with
    /// timestep encodings]; returns one code estimate per observation row.
    pub fn skill_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        obs_embs: &[Var],
        timesteps: &[usize],
        lang_pooled: Var,
    ) -> Result<Var> {
        if obs_embs.is_empty() {
            return Err(AgentError::Input("observation set is empty".into()));
        }
        if obs_embs.len() != timesteps.len() {
            return Err(AgentError::Dimension(format!(
                "{} embeddings vs {} timesteps",
                obs_embs.len(),
                timesteps.len()
            )));
        }
        if timesteps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AgentError::Contract(format!(
                "observation timesteps must be strictly ascending, got {timesteps:?}"
            )));
        }
        let mut rows = Vec::with_capacity(obs_embs.len() + 1);
        rows.push(lang_pooled);
        for (&e, &t) in obs_embs.iter().zip(timesteps) {
            let pos = timestep_encoding::<T>(t, self.cfg.skill_dim)?;
            let pos = tape.constant(pos, &[1, self.cfg.skill_dim])?;
            rows.push(tape.add(e, pos)?);
        }
        let seq = tape.concat_rows(&rows)?;
        let normed = self.ln.forward(tape, store, seq)?;
        let attended = self.attn.forward(tape, store, normed, normed, true)?;
        let seq = tape.add(seq, attended)?;
        let obs_rows = tape.slice_rows(seq, 1, obs_embs.len())?;
        self.head.forward(tape, store, obs_rows)
    }
}

/// Index of the nearest code by L2; ties resolve to the lowest index.
pub fn nearest_code<T: Scalar>(query: &[T], codebook: &DenseArray<T>) -> Result<usize> {
    let shape = codebook.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(AgentError::State("codebook is empty".into()));
    }
    let (k, d) = (shape[0], shape[1]);
    if query.len() != d {
        return Err(AgentError::Dimension(format!(
            "query dim {} vs code dim {d}",
            query.len()
        )));
    }
    let data = codebook.data();
    let mut best = 0;
    let mut best_d2 = f64::INFINITY;
    for i in 0..k {
        let row = &data[i * d..(i + 1) * d];
        let d2: f64 = row
            .iter()
            .zip(query)
            .map(|(&c, &q)| {
                let diff = Scalar::to_f64(c) - Scalar::to_f64(q);
                diff * diff
            })
            .sum();
        if d2 < best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    Ok(best)
}

/// Most frequent index; ties resolve to the lowest index.
pub fn majority_vote(indices: &[usize]) -> Result<usize> {
    if indices.is_empty() {
        return Err(AgentError::Input("majority vote over an empty list".into()));
    }
    let mut counts = std::collections::BTreeMap::new();
    for &i in indices {
        *counts.entry(i).or_insert(0usize) += 1;
    }
    let mut best = *indices.iter().min().unwrap();
    let mut best_count = 0;
    for (&idx, &count) in &counts {
        if count > best_count {
            best = idx;
            best_count = count;
        }
    }
    Ok(best)
}

/// Training-side codebook bookkeeping: lifetime usage counts, last-used
/// steps, and a ring of recent continuous estimates for dead-code resets.
#[derive(Debug, Clone)]
pub struct VqTracker {
    pub usage: Vec<u64>,
    last_used: Vec<u64>,
    recent: VecDeque<Vec<f64>>,
    step: u64,
    reset_after: Option<u64>,
}

/// Serializable image of a [`VqTracker`]; the reset horizon lives in the
/// model config, not here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqSnapshot {
    pub usage: Vec<u64>,
    pub last_used: Vec<u64>,
    pub step: u64,
    pub recent: Vec<Vec<f64>>,
}

impl VqTracker {
    pub fn new(k: usize, reset_after: Option<u64>) -> VqTracker {
        VqTracker {
            usage: vec![0; k],
            last_used: vec![0; k],
            recent: VecDeque::with_capacity(RECENT_CAP),
            step: 0,
            reset_after,
        }
    }

    pub fn snapshot(&self) -> VqSnapshot {
        VqSnapshot {
            usage: self.usage.clone(),
            last_used: self.last_used.clone(),
            step: self.step,
            recent: self.recent.iter().cloned().collect(),
        }
    }

    pub fn from_snapshot(snap: VqSnapshot, reset_after: Option<u64>) -> Result<VqTracker> {
        if snap.usage.len() != snap.last_used.len() {
            return Err(AgentError::Format(format!(
                "code usage has {} entries but last-used has {}",
                snap.usage.len(),
                snap.last_used.len()
            )));
        }
        if snap.recent.len() > RECENT_CAP {
            return Err(AgentError::Format(format!(
                "recent-estimate ring holds {} entries, cap is {RECENT_CAP}",
                snap.recent.len()
            )));
        }
        Ok(VqTracker {
            usage: snap.usage,
            last_used: snap.last_used,
            recent: snap.recent.into(),
            step: snap.step,
            reset_after,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Records one quantize call against `index` with its query vector.
    pub fn record<T: Scalar>(&mut self, index: usize, query: &[T]) {
        self.usage[index] += 1;
        self.last_used[index] = self.step;
        if self.recent.len() == RECENT_CAP {
            self.recent.pop_front();
        }
        self.recent.push_back(query.iter().map(|&v| Scalar::to_f64(v)).collect());
    }

    /// Advances the step clock and reseeds any code unused for the
    /// configured horizon from a random recent estimate. Returns the codes
    /// reset this step.
    pub fn advance_step<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        self.step += 1;
        let Some(horizon) = self.reset_after else {
            return Ok(Vec::new());
        };
        let mut reset = Vec::new();
        if self.recent.is_empty() {
            return Ok(reset);
        }
        let codes = store.get_mut(CODEBOOK_PARAM)?;
        let d = codes.shape()[1];
        for k in 0..self.usage.len() {
            if self.step - self.last_used[k] >= horizon {
                let pick = &self.recent[rng.gen_range(0..self.recent.len())];
                if pick.len() == d {
                    let row = &mut codes.data_mut()[k * d..(k + 1) * d];
                    for (slot, &v) in row.iter_mut().zip(pick) {
                        *slot = T::from_f64(v);
                    }
                    self.last_used[k] = self.step;
                    reset.push(k);
                }
            }
        }
        Ok(reset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> SkillConfig {
        SkillConfig {
            resolution: 16,
            lang_dim: 8,
            skill_dim: 8,
            heads: 2,
            code_k: 6,
            code_dim: 4,
            ..SkillConfig::default()
        }
    }

    fn build(cfg: SkillConfig, vocab: &Vocab) -> (SkillEncoder, ParamStore<f64>) {
        let enc = SkillEncoder::new(cfg, vocab).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        enc.init(&mut store, &mut rng).unwrap();
        (enc, store)
    }

    fn drawer_vocab() -> Vocab {
        Vocab::build(
            ["open the top drawer", "open the middle drawer", "open the bottom drawer"],
            4,
        )
    }

    #[test]
    fn same_instruction_embeds_identically() {
        let vocab = drawer_vocab();
        let (enc, store) = build(tiny_cfg(), &vocab);
        let mut t1 = Tape::new();
        let (_, a) = enc.embed_language(&mut t1, &store, &vocab, "open the top drawer").unwrap();
        let mut t2 = Tape::new();
        let (_, b) = enc.embed_language(&mut t2, &store, &vocab, "open the top drawer").unwrap();
        assert_eq!(t1.data(a), t2.data(b));
    }

    #[test]
    fn instructions_differ_exactly_at_differing_token_rows() {
        let vocab = drawer_vocab();
        let (enc, store) = build(tiny_cfg(), &vocab);
        let mut t1 = Tape::new();
        let (a, _) = enc.embed_language(&mut t1, &store, &vocab, "open the top drawer").unwrap();
        let mut t2 = Tape::new();
        let (b, _) =
            enc.embed_language(&mut t2, &store, &vocab, "open the bottom drawer").unwrap();
        let d = enc.cfg.lang_dim;
        for row in 0..MAX_TOKENS {
            let same = t1.data(a)[row * d..(row + 1) * d] == t2.data(b)[row * d..(row + 1) * d];
            // "top" vs "bottom" sit at token position 2
            assert_eq!(same, row != 2, "row {row}");
        }
    }

    #[test]
    fn empty_instruction_is_an_input_error() {
        let vocab = drawer_vocab();
        let (enc, store) = build(tiny_cfg(), &vocab);
        let mut tape = Tape::new();
        for text in ["", "  !? "] {
            let err = enc.embed_language(&mut tape, &store, &vocab, text).unwrap_err();
            assert!(matches!(err, AgentError::Input(_)), "{err}");
        }
    }

    #[test]
    fn single_token_leaves_one_nonzero_row() {
        let vocab = drawer_vocab();
        let (enc, store) = build(tiny_cfg(), &vocab);
        let mut tape = Tape::new();
        let (pre, post) = enc.embed_language(&mut tape, &store, &vocab, "drawer").unwrap();
        let d = enc.cfg.lang_dim;
        for var in [pre, post] {
            let data = tape.data(var);
            assert!(data[..d].iter().any(|&v| v != 0.0));
            assert!(data[d..].iter().all(|&v| v == 0.0), "padded rows stay zero");
        }
    }

    fn flat_image(res: usize, fill: f32, depth: f32) -> RgbdImage {
        RgbdImage {
            resolution: res,
            rgb: vec![fill; 3 * res * res],
            depth: vec![depth; res * res],
        }
    }

    #[test]
    fn zero_images_encode_to_the_zero_vector() {
        let vocab = drawer_vocab();
        let (enc, store) = build(tiny_cfg(), &vocab);
        let imgs = vec![flat_image(16, 0.0, 0.0); 4];
        let mut tape = Tape::new();
        let e = enc.encode_observation(&mut tape, &store, &imgs).unwrap();
        assert_eq!(tape.shape(e), &[1, 8]);
        assert!(tape.data(e).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_resolution_is_a_dimension_error() {
        let vocab = drawer_vocab();
        let (enc, store) = build(tiny_cfg(), &vocab);
        let mut imgs = vec![flat_image(16, 0.5, 1.0); 3];
        imgs.push(flat_image(32, 0.5, 1.0));
        let mut tape = Tape::new();
        let err = enc.encode_observation(&mut tape, &store, &imgs).unwrap_err();
        assert!(matches!(err, AgentError::Dimension(_)), "{err}");
    }

    #[test]
    fn camera_order_changes_the_embedding() {
        let vocab = drawer_vocab();
        let (enc, store) = build(tiny_cfg(), &vocab);
        let mut imgs = vec![
            flat_image(16, 0.9, 0.5),
            flat_image(16, 0.1, 1.5),
            flat_image(16, 0.4, 0.2),
            flat_image(16, 0.7, 1.9),
        ];
        let mut t1 = Tape::new();
        let a = enc.encode_observation(&mut t1, &store, &imgs).unwrap();
        imgs.swap(0, 3);
        let mut t2 = Tape::new();
        let b = enc.encode_observation(&mut t2, &store, &imgs).unwrap();
        assert_ne!(t1.data(a), t2.data(b));
    }

    #[test]
    fn infinite_depth_normalizes_to_one() {
        let vocab = drawer_vocab();
        let (enc, store) = build(tiny_cfg(), &vocab);
        let far = vec![flat_image(16, 0.2, f32::INFINITY); 4];
        let capped = vec![flat_image(16, 0.2, DEPTH_NORM as f32); 4];
        let mut t1 = Tape::new();
        let a = enc.encode_observation(&mut t1, &store, &far).unwrap();
        let mut t2 = Tape::new();
        let b = enc.encode_observation(&mut t2, &store, &capped).unwrap();
        assert_eq!(t1.data(a), t2.data(b), "sentinel and max depth encode alike");
    }

    fn lang_token(
        enc: &SkillEncoder,
        tape: &mut Tape<f64>,
        store: &ParamStore<f64>,
        vocab: &Vocab,
    ) -> Var {
        let (_, post) = enc.embed_language(tape, store, vocab, "open the top drawer").unwrap();
        enc.pooled_language(tape, store, post).unwrap()
    }

    #[test]
    fn zeroed_head_returns_its_bias_for_a_single_observation() {
        let vocab = drawer_vocab();
        let (enc, mut store) = build(tiny_cfg(), &vocab);
        store.get_mut("skill.head.w").unwrap().data_mut().fill(0.0);
        let bias = vec![0.25, -1.5, 3.0, 0.5];
        store.get_mut("skill.head.b").unwrap().data_mut().copy_from_slice(&bias);

        let mut tape = Tape::new();
        let lang = lang_token(&enc, &mut tape, &store, &vocab);
        let imgs = vec![flat_image(16, 0.3, 0.8); 4];
        let e = enc.encode_observation(&mut tape, &store, &imgs).unwrap();
        let c = enc.skill_forward(&mut tape, &store, &[e], &[5], lang).unwrap();
        assert_eq!(tape.shape(c), &[1, 4]);
        assert_eq!(tape.data(c), &bias[..]);
    }

    #[test]
    fn estimates_are_causal_per_position() {
        let vocab = drawer_vocab();
        let (enc, store) = build(tiny_cfg(), &vocab);
        let fills = [0.1f32, 0.4, 0.7, 0.2, 0.9];
        let timesteps = [0usize, 3, 9, 14, 20];

        let run = |bump: Option<usize>| {
            let mut tape = Tape::new();
            let lang = lang_token(&enc, &mut tape, &store, &vocab);
            let embs: Vec<Var> = fills
                .iter()
                .enumerate()
                .map(|(i, &f)| {
                    let f = if bump == Some(i) { f + 0.3 } else { f };
                    let imgs = vec![flat_image(16, f, 1.0); 4];
                    enc.encode_observation(&mut tape, &store, &imgs).unwrap()
                })
                .collect();
            let c = enc.skill_forward(&mut tape, &store, &embs, &timesteps, lang).unwrap();
            tape.data(c).to_vec()
        };

        let base = run(None);
        let d = enc.cfg.code_dim;
        for bumped in 1..fills.len() {
            let got = run(Some(bumped));
            assert_eq!(
                base[..bumped * d],
                got[..bumped * d],
                "estimates before position {bumped} must not see the change"
            );
            assert_ne!(base[bumped * d..], got[bumped * d..]);
        }
    }

    #[test]
    fn unsorted_timesteps_are_a_contract_error() {
        let vocab = drawer_vocab();
        let (enc, store) = build(tiny_cfg(), &vocab);
        let mut tape = Tape::new();
        let lang = lang_token(&enc, &mut tape, &store, &vocab);
        let imgs = vec![flat_image(16, 0.5, 1.0); 4];
        let e1 = enc.encode_observation(&mut tape, &store, &imgs).unwrap();
        let e2 = enc.encode_observation(&mut tape, &store, &imgs).unwrap();
        for bad in [[7usize, 3], [4, 4]] {
            let err = enc.skill_forward(&mut tape, &store, &[e1, e2], &bad, lang).unwrap_err();
            assert!(matches!(err, AgentError::Contract(_)), "{err}");
        }
    }

    #[test]
    fn nearest_code_picks_by_l2_with_low_index_ties() {
        let codes = DenseArray::from_vec(vec![0.0, 0.0, 1.0, 1.0], &[2, 2]).unwrap();
        assert_eq!(nearest_code(&[0.2, 0.1], &codes).unwrap(), 0);
        assert_eq!(nearest_code(&[0.9, 0.8], &codes).unwrap(), 1);
        assert_eq!(nearest_code(&[0.5, 0.5], &codes).unwrap(), 0, "tie takes the lowest");
    }

    #[test]
    fn nearest_code_matches_brute_force_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = 64;
        let d = 8;
        let codes = DenseArray::<f64>::uniform(&[k, d], -1.0, 1.0, &mut rng);
        for _ in 0..1000 {
            let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.2..1.2)).collect();
            let got = nearest_code(&q, &codes).unwrap();
            let mut best = 0;
            let mut best_d2 = f64::INFINITY;
            for i in 0..k {
                let d2: f64 = codes.data()[i * d..(i + 1) * d]
                    .iter()
                    .zip(&q)
                    .map(|(c, q)| (c - q) * (c - q))
                    .sum();
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = i;
                }
            }
            assert_eq!(got, best);
        }
    }

    #[test]
    fn empty_codebook_is_a_state_error() {
        let codes = DenseArray::<f64>::from_vec(Vec::new(), &[0, 4]).unwrap();
        let err = nearest_code(&[0.0; 4], &codes).unwrap_err();
        assert!(matches!(err, AgentError::State(_)), "{err}");
    }

    #[test]
    fn straight_through_passes_downstream_gradients_unchanged() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(DenseArray::from_vec(vec![0.3, -0.7, 1.1], &[1, 3]).unwrap().with_grad());
        let replaced = tape.straight_through(x, &[5.0, 6.0, 7.0]).unwrap();
        assert_eq!(tape.data(replaced), &[5.0, 6.0, 7.0], "forward takes the code value");
        let weights = tape.constant(vec![2.0, -3.0, 0.5], &[1, 3]).unwrap();
        let prod = tape.mul(replaced, weights).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -3.0, 0.5]);
    }

    #[test]
    fn majority_vote_follows_counts_then_lowest_index() {
        assert_eq!(majority_vote(&[3, 3, 7]).unwrap(), 3);
        assert_eq!(majority_vote(&[2, 5]).unwrap(), 2);
        assert_eq!(majority_vote(&[9]).unwrap(), 9);
        assert!(matches!(majority_vote(&[]).unwrap_err(), AgentError::Input(_)));

        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..200 {
            let list: Vec<usize> = (0..rng.gen_range(1..30)).map(|_| rng.gen_range(0..6)).collect();
            let got = majority_vote(&list).unwrap();
            let mut counts = [0usize; 6];
            for &i in &list {
                counts[i] += 1;
            }
            let best = (0..6).max_by_key(|&i| (counts[i], usize::MAX - i)).unwrap();
            assert_eq!(got, best, "list {list:?}");
        }
    }

    #[test]
    fn usage_counters_sum_to_quantize_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let codes = DenseArray::<f64>::uniform(&[6, 4], -1.0, 1.0, &mut rng);
        let mut tracker = VqTracker::new(6, None);
        let calls = 137;
        for _ in 0..calls {
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let idx = nearest_code(&q, &codes).unwrap();
            tracker.record(idx, &q);
        }
        assert_eq!(tracker.usage.iter().sum::<u64>(), calls);
    }

    #[test]
    fn stale_codes_reseed_from_recent_estimates() {
        let vocab = drawer_vocab();
        let (enc, mut store) = build(tiny_cfg(), &vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut tracker = VqTracker::new(enc.cfg.code_k, Some(10));

        let mut recents = Vec::new();
        for step in 0..10u64 {
            // keep code 0 warm, leave the rest stale
            let q: Vec<f64> = (0..enc.cfg.code_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            tracker.record(0, &q);
            recents.push(q);
            let reset = tracker.advance_step(&mut store, &mut rng).unwrap();
            if step < 9 {
                assert!(reset.is_empty(), "nothing is stale before the horizon");
                continue;
            }
            assert_eq!(reset, (1..enc.cfg.code_k).collect::<Vec<_>>());
            let codes = store.get(CODEBOOK_PARAM).unwrap();
            let d = enc.cfg.code_dim;
            for &k in &reset {
                let row = &codes.data()[k * d..(k + 1) * d];
                assert!(
                    recents.iter().any(|r| r.as_slice() == row),
                    "reset code {k} must equal a recent estimate"
                );
            }
        }
        // freshly reseeded codes are warm again on the next step
        tracker.record(0, &recents[0]);
        assert!(tracker.advance_step(&mut store, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn disabled_reset_horizon_preserves_stale_codes() {
        let vocab = drawer_vocab();
        let cfg = SkillConfig { reset_after: None, ..tiny_cfg() };
        let (enc, mut store) = build(cfg, &vocab);
        let before = store.get(CODEBOOK_PARAM).unwrap().data().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut tracker = VqTracker::new(enc.cfg.code_k, None);
        for _ in 0..2000 {
            tracker.record(0, &vec![0.0; enc.cfg.code_dim]);
            assert!(tracker.advance_step(&mut store, &mut rng).unwrap().is_empty());
        }
        assert_eq!(store.get(CODEBOOK_PARAM).unwrap().data(), &before[..]);
    }
}
