//! End-to-end optimization: one composite objective over both levels and a
//! single LAMB optimizer across the union of their parameters.
//!
//! Every step derives its own random stream from (seed, step), so runs are
//! bit-reproducible and resumable: a checkpoint carries parameters, optimizer
//! moments, and codebook bookkeeping, and the loss trace is rewritten up to
//! the resume step before new rows are appended.

use crate::data::{
    clip_shift, draw_shift, make_training_item, Dataset, Episode, ItemSpec, SamplePlan,
};
use crate::error::{AgentError, Result};
use crate::lang::Vocab;
use crate::model::{save_state, Bundle, Checkpoint};
use crate::policy::{Policy, PolicyOutput};
use crate::skill::{majority_vote, nearest_code, SkillEncoder, VqTracker, CODEBOOK_PARAM};
use crate::voxel::{unproject, voxelize, ColoredPoint, VoxelGrid};
use crate::{derived_rng, rng_tag, DiscretizedAction};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use voxbc_sim::{default_templates, language_for, Camera, LangMode, RgbdImage};
use voxbc_tensor::{Lamb, LambConfig, ParamStore, Scalar, Tape, Var, VqGradMode};

pub const TRACE_FILE: &str = "trace.csv";
pub const TRACE_HEADER: &str = "step,total,ce_coord,ce_rot,ce_grip,mse_vq";
pub const FINAL_CHECKPOINT: &str = "checkpoint";
pub const DIAGNOSTIC_CHECKPOINT: &str = "diagnostic";

/// Which half of the code MSE receives gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqMode {
    EncoderOnly,
    CodeOnly,
    Symmetric,
}

impl VqMode {
    pub fn grad_mode(self) -> VqGradMode {
        match self {
            VqMode::EncoderOnly => VqGradMode::EncoderOnly,
            VqMode::CodeOnly => VqGradMode::CodeOnly,
            VqMode::Symmetric => VqGradMode::Symmetric,
        }
    }
}

/// Instruction source during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainLangMode {
    /// The instruction stored with the episode.
    AsRecorded,
    /// Template 0 for the episode's task and variation.
    Single,
    /// A fresh uniform template draw per item.
    Multi,
}

impl TrainLangMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "as_recorded" => Ok(TrainLangMode::AsRecorded),
            "single" => Ok(TrainLangMode::Single),
            "multi" => Ok(TrainLangMode::Multi),
            other => Err(AgentError::Input(format!("unknown language mode `{other}`"))),
        }
    }
}

/// Conditioning taps into the bottom level. A disabled tap is multiplied by
/// zero rather than removed, so the graph shape and parameter coverage stay
/// identical across ablation conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputMasks {
    pub skill_to_policy: bool,
    pub lang_to_policy: bool,
}

impl Default for InputMasks {
    fn default() -> InputMasks {
        InputMasks { skill_to_policy: true, lang_to_policy: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub max_shift: f64,
    pub checkpoint_every: u64,
    pub history: usize,
    pub future: usize,
    pub v_eps: f64,
    pub sample_freq: usize,
    pub vq_mode: VqMode,
    pub lang_mode: TrainLangMode,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            steps: 5000,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 1e-2,
            seed: 0,
            batch_size: 1,
            max_shift: crate::data::DEFAULT_MAX_SHIFT,
            checkpoint_every: 1000,
            history: crate::data::DEFAULT_HISTORY,
            future: crate::data::DEFAULT_FUTURE,
            v_eps: crate::data::DEFAULT_V_EPS,
            sample_freq: crate::data::DEFAULT_SAMPLE_FREQ,
            vq_mode: VqMode::Symmetric,
            lang_mode: TrainLangMode::AsRecorded,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AgentError::Config(format!("learning rate {} not positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(AgentError::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(AgentError::Config("epsilon must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(AgentError::Config("weight decay must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(AgentError::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.max_shift) {
            return Err(AgentError::Config(format!(
                "max shift {} outside [0, 1)",
                self.max_shift
            )));
        }
        if self.sample_freq == 0 {
            return Err(AgentError::Config("sample frequency must be positive".into()));
        }
        if !(self.v_eps > 0.0) {
            return Err(AgentError::Config("speed threshold must be positive".into()));
        }
        Ok(())
    }

    pub fn lamb(&self) -> LambConfig {
        LambConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Scalar loss variables for one step; `total` is the optimization target.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub ce_coord: Var,
    pub ce_rot: Var,
    pub ce_grip: Var,
    pub mse_vq: Var,
}

/// Cross-entropy on all three heads plus the code MSE.
pub fn composite_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &PolicyOutput,
    target: &DiscretizedAction,
    v: usize,
    c_hat: Var,
    c_tilde: Var,
    mode: VqGradMode,
) -> Result<LossParts> {
    let ce_coord = tape.cross_entropy(out.coord, target.flat_coord(v))?;
    let r0 = tape.cross_entropy(out.rot[0], target.rot[0])?;
    let r1 = tape.cross_entropy(out.rot[1], target.rot[1])?;
    let r2 = tape.cross_entropy(out.rot[2], target.rot[2])?;
    let ce_rot = tape.add(r0, r1)?;
    let ce_rot = tape.add(ce_rot, r2)?;
    let ce_grip = tape.cross_entropy(out.grip, target.grip_index())?;
    let mse_vq = tape.vq_mse(c_hat, c_tilde, mode)?;
    let total = tape.add(ce_coord, ce_rot)?;
    let total = tape.add(total, ce_grip)?;
    let total = tape.add(total, mse_vq)?;
    Ok(LossParts { total, ce_coord, ce_rot, ce_grip, mse_vq })
}

/// One item's full graph: skill estimates, quantization, and the policy pass.
pub struct ItemForward {
    pub out: PolicyOutput,
    /// Per-observation continuous code estimates.
    pub c_hat: Var,
    /// The current observation's estimate row.
    pub c_current: Var,
    /// The voted codebook row on the graph.
    pub c_tilde: Var,
    pub code_indices: Vec<usize>,
    pub voted: usize,
}

/// Builds the two-level forward pass for one training item. The policy sees
/// the quantized code through a straight-through node, so its loss gradients
/// reach the skill encoder.
#[allow(clippy::too_many_arguments)]
pub fn forward_item<T: Scalar>(
    tape: &mut Tape<T>,
    skill: &SkillEncoder,
    policy: &Policy,
    store: &ParamStore<T>,
    vocab: &Vocab,
    instruction: &str,
    obs_images: &[&[RgbdImage]],
    timesteps: &[usize],
    current: usize,
    grid: &VoxelGrid,
    masks: InputMasks,
    mut tracker: Option<&mut VqTracker>,
) -> Result<ItemForward> {
    if current >= timesteps.len() {
        return Err(AgentError::Contract(format!(
            "current index {current} outside the {} observations",
            timesteps.len()
        )));
    }
    let (_pre, post) = skill.embed_language(tape, store, vocab, instruction)?;
    let pooled = skill.pooled_language(tape, store, post)?;
    let mut embs = Vec::with_capacity(obs_images.len());
    for images in obs_images {
        embs.push(skill.encode_observation(tape, store, images)?);
    }
    let c_hat = skill.skill_forward(tape, store, &embs, timesteps, pooled)?;
    let dim = skill.cfg.code_dim;
    let codebook = store.get(CODEBOOK_PARAM)?;
    let rows = tape.data(c_hat);
    let mut code_indices = Vec::with_capacity(timesteps.len());
    for i in 0..timesteps.len() {
        let row = &rows[i * dim..(i + 1) * dim];
        let idx = nearest_code(row, codebook)?;
        if let Some(t) = tracker.as_deref_mut() {
            t.record(idx, row);
        }
        code_indices.push(idx);
    }
    let voted = majority_vote(&code_indices)?;
    let c_current = tape.slice_rows(c_hat, current, 1)?;
    let codebook_var = tape.param(CODEBOOK_PARAM, store)?;
    let c_tilde = tape.slice_rows(codebook_var, voted, 1)?;
    let replacement = tape.data(c_tilde).to_vec();
    let st = tape.straight_through(c_current, &replacement)?;
    let policy_code =
        if masks.skill_to_policy { st } else { tape.scale(st, T::from_f64(0.0))? };
    let policy_lang =
        if masks.lang_to_policy { post } else { tape.scale(post, T::from_f64(0.0))? };
    let out = policy.forward(tape, store, grid, policy_code, policy_lang)?;
    Ok(ItemForward { out, c_hat, c_current, c_tilde, code_indices, voted })
}

/// Images and timesteps for every observation in the item, ascending.
pub fn item_observations<'e>(
    episode: &'e Episode,
    spec: &ItemSpec,
) -> (Vec<&'e [RgbdImage]>, Vec<usize>, usize) {
    let timesteps = spec.obs_timesteps();
    let images: Vec<&[RgbdImage]> =
        timesteps.iter().map(|&t| episode.steps[t].images.as_slice()).collect();
    let current = timesteps
        .binary_search(&spec.t)
        .expect("the current timestep is always an observation");
    (images, timesteps, current)
}

/// Back-projects the current observation into per-camera point sets.
pub fn observation_points(
    episode: &Episode,
    t: usize,
    cameras: &[Camera],
) -> Vec<Vec<ColoredPoint>> {
    episode.steps[t]
        .images
        .iter()
        .zip(cameras)
        .map(|(img, cam)| unproject(img, cam))
        .collect()
}

/// The next-keyframe target pose, discretized after a shared rigid shift of
/// the scene points and the target.
pub fn shifted_target(
    episode: &Episode,
    spec: &ItemSpec,
    points: &mut [Vec<ColoredPoint>],
    shift: voxbc_sim::Vec3,
    v: usize,
) -> Result<DiscretizedAction> {
    let step = &episode.steps[spec.target_t];
    let pose = voxbc_sim::GripperState {
        pos: step.pos + shift,
        euler: step.euler,
        open: step.open,
    };
    for set in points.iter_mut() {
        for p in set.iter_mut() {
            p.pos = p.pos + shift;
        }
    }
    crate::action::discretize(&pose, v)
}

pub struct TrainOutcome {
    pub ran_steps: u64,
    pub final_checkpoint: PathBuf,
    pub trace_path: PathBuf,
    pub last: Option<TraceRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub total: f64,
    pub ce_coord: f64,
    pub ce_rot: f64,
    pub ce_grip: f64,
    pub mse_vq: f64,
}

impl TraceRow {
    fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.total, self.ce_coord, self.ce_rot, self.ce_grip, self.mse_vq
        )
    }

    pub fn parse(line: &str) -> Result<TraceRow> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(AgentError::Format(format!(
                "trace row has {} fields: {line}",
                fields.len()
            )));
        }
        let num =
            |s: &str| s.parse::<f64>().map_err(|_| AgentError::Format(format!("bad number {s}")));
        Ok(TraceRow {
            step: fields[0]
                .parse()
                .map_err(|_| AgentError::Format(format!("bad step {}", fields[0])))?,
            total: num(fields[1])?,
            ce_coord: num(fields[2])?,
            ce_rot: num(fields[3])?,
            ce_grip: num(fields[4])?,
            mse_vq: num(fields[5])?,
        })
    }
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| AgentError::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == TRACE_HEADER => {}
        other => {
            return Err(AgentError::Format(format!("bad trace header {other:?}")));
        }
    }
    lines.map(TraceRow::parse).collect()
}

/// Keeps rows up to `upto` (dropping any tail past the resume point) and
/// returns a writer positioned for appending.
fn prepare_trace(path: &Path, upto: u64) -> Result<std::io::BufWriter<std::fs::File>> {
    let mut kept = String::new();
    kept.push_str(TRACE_HEADER);
    kept.push('\n');
    if upto > 0 && path.exists() {
        for row in read_trace(path)? {
            if row.step <= upto {
                kept.push_str(&row.to_line());
                kept.push('\n');
            }
        }
    }
    std::fs::write(path, kept).map_err(|e| AgentError::io(path, e))?;
    let file = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| AgentError::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

struct StepContext<'a> {
    ds: &'a Dataset,
    plan: &'a SamplePlan,
    cameras: &'a [Camera],
    cfg: &'a TrainConfig,
    masks: InputMasks,
}

/// Builds one item's graph and loss. Consumes rng draws in a fixed order:
/// item draw, instruction draw (multi mode), history draw, shift draw.
fn item_loss(
    ctx: &StepContext,
    tape: &mut Tape<f32>,
    bundle: &Bundle,
    tracker: &mut VqTracker,
    rng: &mut impl Rng,
) -> Result<LossParts> {
    let (ei, t) = ctx.plan.draw(rng);
    let episode = &ctx.ds.episodes[ei];
    let instruction = match ctx.cfg.lang_mode {
        TrainLangMode::AsRecorded => episode.instruction.clone(),
        TrainLangMode::Single | TrainLangMode::Multi => {
            let templates: Vec<String> =
                default_templates(episode.task).iter().map(|s| s.to_string()).collect();
            let mode = if ctx.cfg.lang_mode == TrainLangMode::Single {
                LangMode::Single
            } else {
                LangMode::Multi
            };
            language_for(&templates, episode.task, episode.variation, mode, rng)?
        }
    };
    let spec = make_training_item(
        &ctx.plan.keyframes[ei],
        episode.len(),
        ei,
        t,
        ctx.cfg.history,
        ctx.cfg.future,
        rng,
    )?;
    let (obs_images, timesteps, current) = item_observations(episode, &spec);
    let mut points = observation_points(episode, spec.t, ctx.cameras);
    let target_pos = episode.steps[spec.target_t].pos;
    let shift = clip_shift(draw_shift(rng, ctx.cfg.max_shift), target_pos);
    let v = bundle.cfg.policy.v;
    let target = shifted_target(episode, &spec, &mut points, shift, v)?;
    let grid = voxelize(&points, v)?;
    let fwd = forward_item(
        tape,
        &bundle.skill,
        &bundle.policy,
        &bundle.store,
        &bundle.vocab,
        &instruction,
        &obs_images,
        &timesteps,
        current,
        &grid,
        ctx.masks,
        Some(tracker),
    )?;
    composite_loss(
        tape,
        &fwd.out,
        &target,
        v,
        fwd.c_current,
        fwd.c_tilde,
        ctx.cfg.vq_mode.grad_mode(),
    )
}

fn mean_parts(tape: &mut Tape<f32>, parts: &[LossParts]) -> Result<LossParts> {
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    let inv = 1.0 / parts.len() as f32;
    let fold = |tape: &mut Tape<f32>, pick: &dyn Fn(&LossParts) -> Var| -> Result<Var> {
        let mut acc = pick(&parts[0]);
        for p in &parts[1..] {
            acc = tape.add(acc, pick(p))?;
        }
        Ok(tape.scale(acc, inv)?)
    };
    Ok(LossParts {
        total: fold(tape, &|p| p.total)?,
        ce_coord: fold(tape, &|p| p.ce_coord)?,
        ce_rot: fold(tape, &|p| p.ce_rot)?,
        ce_grip: fold(tape, &|p| p.ce_grip)?,
        mse_vq: fold(tape, &|p| p.mse_vq)?,
    })
}

/// Every parameter the optimizer covers must have received a gradient.
/// The codebook is exempt only when the MSE mode sends it none by design.
fn check_coverage(
    grads: &BTreeMap<String, Vec<f32>>,
    store: &ParamStore<f32>,
    vq_mode: VqMode,
) -> Result<()> {
    let missing: Vec<String> = store
        .names()
        .filter(|n| !(vq_mode == VqMode::EncoderOnly && *n == CODEBOOK_PARAM))
        .filter(|n| !grads.contains_key(*n))
        .map(String::from)
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(AgentError::Contract(format!(
            "parameters received no gradient: {missing:?}"
        )))
    }
}

/// Runs (or resumes) training to `cfg.steps` total steps. Writes the trace,
/// cadence checkpoints, and the final checkpoint under `out`.
pub fn train(
    ds: &Dataset,
    start: Checkpoint,
    cfg: &TrainConfig,
    cameras: &[Camera],
    masks: InputMasks,
    out: &Path,
) -> Result<(Checkpoint, TrainOutcome)> {
    cfg.validate()?;
    if ds.episodes.is_empty() {
        return Err(AgentError::Data("dataset has no episodes".into()));
    }
    if start.step > cfg.steps {
        return Err(AgentError::Config(format!(
            "checkpoint is at step {}, past the requested {}",
            start.step, cfg.steps
        )));
    }
    let mut bundle = start.bundle;
    if ds.index.resolution != bundle.cfg.skill.resolution {
        return Err(AgentError::Config(format!(
            "dataset resolution {} does not match encoder resolution {}",
            ds.index.resolution, bundle.cfg.skill.resolution
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| AgentError::io(out, e))?;
    let plan = SamplePlan::build(ds, cfg.v_eps, cfg.sample_freq, cfg.history + 1)?;
    let mut lamb = Lamb::new(cfg.lamb());
    for (name, (m, v)) in &start.moments {
        lamb.restore_moments(name, m.clone(), v.clone())?;
    }
    lamb.set_step(start.step);
    let mut tracker = VqTracker::from_snapshot(start.vq, bundle.cfg.skill.reset_after)?;
    let trace_path = out.join(TRACE_FILE);
    let mut trace = prepare_trace(&trace_path, start.step)?;
    let ctx = StepContext { ds, plan: &plan, cameras, cfg, masks };
    let mut last = None;
    let first = start.step + 1;

    for step in first..=cfg.steps {
        let mut rng = derived_rng(cfg.seed, rng_tag::TRAIN, 0, step);
        let mut tape: Tape<f32> = Tape::new();
        let result = (|| -> Result<LossParts> {
            let mut parts = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                parts.push(item_loss(&ctx, &mut tape, &bundle, &mut tracker, &mut rng)?);
            }
            mean_parts(&mut tape, &parts)
        })();
        let parts = match result {
            Ok(p) => p,
            Err(e) => {
                return Err(abort_with_diagnostic(out, &bundle, &tracker, &lamb, step, e));
            }
        };
        let total = Scalar::to_f64(tape.data(parts.total)[0]);
        if !total.is_finite() {
            let e = AgentError::Numeric(format!("loss is {total}"));
            return Err(abort_with_diagnostic(out, &bundle, &tracker, &lamb, step, e));
        }
        if let Err(e) = tape.backward(parts.total) {
            return Err(abort_with_diagnostic(out, &bundle, &tracker, &lamb, step, e.into()));
        }
        let grads: BTreeMap<String, Vec<f32>> = tape
            .param_grads()
            .filter_map(|(n, g)| g.map(|g| (n.to_string(), g.to_vec())))
            .collect();
        check_coverage(&grads, &bundle.store, cfg.vq_mode)?;
        if let Err(e) = lamb.step(&mut bundle.store, &grads) {
            return Err(abort_with_diagnostic(out, &bundle, &tracker, &lamb, step, e.into()));
        }
        let reseeded = tracker.advance_step(&mut bundle.store, &mut rng)?;
        if !reseeded.is_empty() {
            log::debug!("step {step}: reseeded dead codes {reseeded:?}");
        }
        let row = TraceRow {
            step,
            total,
            ce_coord: Scalar::to_f64(tape.data(parts.ce_coord)[0]),
            ce_rot: Scalar::to_f64(tape.data(parts.ce_rot)[0]),
            ce_grip: Scalar::to_f64(tape.data(parts.ce_grip)[0]),
            mse_vq: Scalar::to_f64(tape.data(parts.mse_vq)[0]),
        };
        writeln!(trace, "{}", row.to_line()).map_err(|e| AgentError::io(&trace_path, e))?;
        last = Some(row);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
            trace.flush().map_err(|e| AgentError::io(&trace_path, e))?;
            let dir = out.join(format!("ckpt-{step:06}"));
            save_state(&dir, &bundle, step, &tracker.snapshot(), lamb.moments())?;
            log::info!("step {step}: loss {total:.4}, checkpoint at {}", dir.display());
        }
    }
    trace.flush().map_err(|e| AgentError::io(&trace_path, e))?;
    let final_dir = out.join(FINAL_CHECKPOINT);
    save_state(&final_dir, &bundle, cfg.steps, &tracker.snapshot(), lamb.moments())?;
    let moments = lamb
        .moments()
        .map(|(n, m, v)| (n.to_string(), (m.to_vec(), v.to_vec())))
        .collect();
    let ck = Checkpoint { bundle, step: cfg.steps, vq: tracker.snapshot(), moments };
    let outcome = TrainOutcome {
        ran_steps: cfg.steps - start.step,
        final_checkpoint: final_dir,
        trace_path,
        last,
    };
    Ok((ck, outcome))
}

fn abort_with_diagnostic(
    out: &Path,
    bundle: &Bundle,
    tracker: &VqTracker,
    lamb: &Lamb<f32>,
    step: u64,
    cause: AgentError,
) -> AgentError {
    let dir = out.join(DIAGNOSTIC_CHECKPOINT);
    match save_state(&dir, bundle, step.saturating_sub(1), &tracker.snapshot(), lamb.moments()) {
        Ok(()) => AgentError::Numeric(format!(
            "training aborted at step {step}: {cause}; diagnostic checkpoint at {}",
            dir.display()
        )),
        Err(save_err) => AgentError::Numeric(format!(
            "training aborted at step {step}: {cause}; diagnostic save also failed: {save_err}"
        )),
    }
}

/// Fraction of training items whose predicted translation voxel matches the
/// target exactly. No augmentation; history draws use a fixed stream.
pub fn translation_accuracy(
    bundle: &Bundle,
    ds: &Dataset,
    cfg: &TrainConfig,
    cameras: &[Camera],
    masks: InputMasks,
) -> Result<f64> {
    let plan = SamplePlan::build(ds, cfg.v_eps, cfg.sample_freq, cfg.history + 1)?;
    let mut hits = 0_usize;
    let mut total = 0_usize;
    for pool in &plan.per_task_items {
        for (item_idx, &(ei, t)) in pool.iter().enumerate() {
            let mut rng = derived_rng(cfg.seed, rng_tag::ACCURACY, ei as u64, item_idx as u64);
            let episode = &ds.episodes[ei];
            let spec = make_training_item(
                &plan.keyframes[ei],
                episode.len(),
                ei,
                t,
                cfg.history,
                cfg.future,
                &mut rng,
            )?;
            let (obs_images, timesteps, current) = item_observations(episode, &spec);
            let mut points = observation_points(episode, spec.t, cameras);
            let v = bundle.cfg.policy.v;
            let target =
                shifted_target(episode, &spec, &mut points, voxbc_sim::v3(0.0, 0.0, 0.0), v)?;
            let grid = voxelize(&points, v)?;
            let mut tape: Tape<f32> = Tape::new();
            let fwd = forward_item(
                &mut tape,
                &bundle.skill,
                &bundle.policy,
                &bundle.store,
                &bundle.vocab,
                &episode.instruction,
                &obs_images,
                &timesteps,
                current,
                &grid,
                masks,
                None,
            )?;
            let coord = tape.data(fwd.out.coord);
            let mut best = 0;
            for (i, &x) in coord.iter().enumerate() {
                if x > coord[best] {
                    best = i;
                }
            }
            hits += usize::from(best == target.flat_coord(v));
            total += 1;
        }
    }
    if total == 0 {
        return Err(AgentError::Data("no items to score".into()));
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetIndex;
    use crate::model::ModelConfig;
    use crate::policy::PolicyConfig;
    use crate::skill::SkillConfig;
    use voxbc_sim::{default_cameras, fill_template, run_expert, Env, TaskKind};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            skill: SkillConfig {
                resolution: 32,
                lang_dim: 16,
                skill_dim: 16,
                heads: 2,
                code_k: 4,
                code_dim: 8,
                reset_after: None,
                ..SkillConfig::default()
            },
            policy: PolicyConfig {
                v: 16,
                p: 4,
                n_lat: 8,
                d_lat: 16,
                l_sa: 1,
                heads: 2,
                code_dim: 8,
                lang_dim: 16,
                ..PolicyConfig::default()
            },
        }
    }

    fn tiny_dataset(episodes: usize, res: usize) -> Dataset {
        let cameras = default_cameras(res);
        let mut eps = Vec::new();
        for demo in 0..episodes {
            let variation = demo % TaskKind::PressButton.variation_count();
            let mut rng = derived_rng(9, rng_tag::GEN, 0, demo as u64);
            let mut env =
                Env::new(TaskKind::PressButton, variation, 0.02, &[], &mut rng).unwrap();
            let traj = run_expert(&mut env, Some(&cameras)).unwrap();
            let template = default_templates(TaskKind::PressButton)[0];
            let instruction =
                fill_template(TaskKind::PressButton, variation, template).unwrap();
            eps.push(
                Episode::from_expert(
                    TaskKind::PressButton,
                    variation,
                    instruction,
                    9,
                    res,
                    &traj,
                )
                .unwrap(),
            );
        }
        Dataset {
            root: PathBuf::new(),
            index: DatasetIndex { resolution: res, episodes: Vec::new() },
            episodes: eps,
        }
    }

    fn overfit_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            lr: 2e-3,
            weight_decay: 0.0,
            seed: 11,
            max_shift: 0.0,
            checkpoint_every: 0,
            history: 2,
            future: 2,
            sample_freq: 1000,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn uniform_logit_losses_hit_the_closed_form() {
        let mut tape: Tape<f64> = Tape::new();
        let out = PolicyOutput {
            coord: tape.zeros(&[8]),
            rot: [tape.zeros(&[2]), tape.zeros(&[2]), tape.zeros(&[2])],
            grip: tape.zeros(&[2]),
            latent_shape: vec![],
        };
        let c = tape.constant(vec![0.3, -0.2, 0.9], &[1, 3]).unwrap();
        let target = DiscretizedAction { coord: [1, 0, 1], rot: [1, 0, 1], close: true };
        let parts =
            composite_loss(&mut tape, &out, &target, 2, c, c, VqGradMode::Symmetric).unwrap();
        let total = tape.data(parts.total)[0];
        assert!((total - 7.0 * std::f64::consts::LN_2).abs() < 1e-12, "{total}");
        assert_eq!(tape.data(parts.mse_vq)[0], 0.0);
    }

    #[test]
    fn perfect_logits_drive_the_loss_to_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let mut coord = vec![0.0; 8];
        coord[5] = 60.0;
        let one_hot = |tape: &mut Tape<f64>, n: usize, hot: usize| {
            let mut v = vec![0.0; n];
            v[hot] = 60.0;
            tape.constant(v, &[n]).unwrap()
        };
        let coord = tape.constant(coord, &[8]).unwrap();
        let out = PolicyOutput {
            coord,
            rot: [
                one_hot(&mut tape, 2, 1),
                one_hot(&mut tape, 2, 0),
                one_hot(&mut tape, 2, 1),
            ],
            grip: one_hot(&mut tape, 2, 1),
            latent_shape: vec![],
        };
        let c = tape.constant(vec![0.5, 0.5], &[1, 2]).unwrap();
        let target = DiscretizedAction { coord: [1, 0, 1], rot: [1, 0, 1], close: true };
        let parts =
            composite_loss(&mut tape, &out, &target, 2, c, c, VqGradMode::Symmetric).unwrap();
        assert!(tape.data(parts.total)[0] < 1e-9);
    }

    #[test]
    fn invalid_target_index_is_rejected() {
        let mut tape: Tape<f64> = Tape::new();
        let out = PolicyOutput {
            coord: tape.zeros(&[8]),
            rot: [tape.zeros(&[2]), tape.zeros(&[2]), tape.zeros(&[2])],
            grip: tape.zeros(&[2]),
            latent_shape: vec![],
        };
        let c = tape.zeros(&[1, 2]);
        let target = DiscretizedAction { coord: [1, 1, 1], rot: [5, 0, 0], close: false };
        let err =
            composite_loss(&mut tape, &out, &target, 2, c, c, VqGradMode::Symmetric).unwrap_err();
        assert!(err.to_string().contains("index"), "{err}");
    }

    #[test]
    fn zero_steps_saves_the_initialization_unchanged() {
        let ds = tiny_dataset(1, 32);
        let vocab = Vocab::build(ds.instructions(), 8);
        let fresh = Checkpoint::fresh(tiny_model(), vocab, 5).unwrap();
        let before: Vec<(String, Vec<f32>)> = fresh
            .bundle
            .store
            .iter()
            .map(|(n, a)| (n.to_string(), a.data().to_vec()))
            .collect();
        let out = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { steps: 0, ..overfit_cfg(0) };
        let cameras = default_cameras(32);
        let (ck, outcome) =
            train(&ds, fresh, &cfg, &cameras, InputMasks::default(), out.path()).unwrap();
        assert_eq!(outcome.ran_steps, 0);
        assert_eq!(ck.step, 0);
        let loaded = Checkpoint::load(&outcome.final_checkpoint).unwrap();
        for (name, data) in &before {
            assert_eq!(loaded.bundle.store.get(name).unwrap().data(), &data[..], "{name}");
        }
        assert!(read_trace(&outcome.trace_path).unwrap().is_empty());
    }

    #[test]
    fn overfitting_one_item_converges_with_a_falling_trace() {
        let ds = tiny_dataset(1, 32);
        let vocab = Vocab::build(ds.instructions(), 8);
        let fresh = Checkpoint::fresh(tiny_model(), vocab, 5).unwrap();
        let out = tempfile::tempdir().unwrap();
        let cfg = overfit_cfg(500);
        let cameras = default_cameras(32);
        let (_ck, outcome) =
            train(&ds, fresh, &cfg, &cameras, InputMasks::default(), out.path()).unwrap();
        let trace = read_trace(&outcome.trace_path).unwrap();
        assert_eq!(trace.len(), 500);
        assert_eq!(trace.last().unwrap().step, 500);
        let last = outcome.last.unwrap();
        assert!(last.total < 0.05, "final loss {}", last.total);
        let window = 50;
        let smoothed: Vec<f64> = trace
            .windows(window)
            .map(|w| w.iter().map(|r| r.total).sum::<f64>() / window as f64)
            .collect();
        assert!(
            smoothed.last().unwrap() < &(smoothed[0] * 0.5),
            "smoothed loss did not halve: {} -> {}",
            smoothed[0],
            smoothed.last().unwrap()
        );
        for pair in smoothed.windows(2) {
            assert!(
                pair[1] <= pair[0] + 0.05,
                "smoothed loss rose from {} to {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn straight_through_carries_policy_gradient_into_the_encoder() {
        let ds = tiny_dataset(1, 32);
        let vocab = Vocab::build(ds.instructions(), 8);
        let ck = Checkpoint::fresh(tiny_model(), vocab, 3).unwrap();
        let bundle = ck.bundle;
        let plan = SamplePlan::build(&ds, 1e-2, 1000, 3).unwrap();
        let mut rng = derived_rng(1, rng_tag::TRAIN, 0, 1);
        let (ei, t) = plan.draw(&mut rng);
        let episode = &ds.episodes[ei];
        let spec =
            make_training_item(&plan.keyframes[ei], episode.len(), ei, t, 2, 2, &mut rng)
                .unwrap();
        let cameras = default_cameras(32);
        let (obs_images, timesteps, current) = item_observations(episode, &spec);
        let mut points = observation_points(episode, spec.t, &cameras);
        let v = bundle.cfg.policy.v;
        let target =
            shifted_target(episode, &spec, &mut points, voxbc_sim::v3(0.0, 0.0, 0.0), v)
                .unwrap();
        let grid = voxelize(&points, v).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let fwd = forward_item(
            &mut tape,
            &bundle.skill,
            &bundle.policy,
            &bundle.store,
            &bundle.vocab,
            &episode.instruction,
            &obs_images,
            &timesteps,
            current,
            &grid,
            InputMasks::default(),
            None,
        )
        .unwrap();
        // cross-entropy terms only: any encoder gradient must flow through
        // the straight-through node
        let ce = tape.cross_entropy(fwd.out.coord, target.flat_coord(v)).unwrap();
        let g = tape.cross_entropy(fwd.out.grip, target.grip_index()).unwrap();
        let loss = tape.add(ce, g).unwrap();
        tape.backward(loss).unwrap();
        for name in ["skill.head.w", "obs.c1", "lang.proj.w", "skill.attn.q.w"] {
            let grad = tape
                .param_grads()
                .find(|(n, _)| *n == name)
                .and_then(|(_, g)| g)
                .unwrap_or_else(|| panic!("{name} missing"));
            let max = grad.iter().fold(0.0_f32, |m, &x| m.max(x.abs()));
            assert!(max > 0.0, "{name} gradient is identically zero");
        }
    }

    #[test]
    fn one_composite_backward_covers_every_parameter() {
        let ds = tiny_dataset(1, 32);
        let vocab = Vocab::build(ds.instructions(), 8);
        let ck = Checkpoint::fresh(tiny_model(), vocab, 4).unwrap();
        let bundle = ck.bundle;
        let plan = SamplePlan::build(&ds, 1e-2, 1000, 3).unwrap();
        let cfg = overfit_cfg(1);
        let ctx = StepContext {
            ds: &ds,
            plan: &plan,
            cameras: &default_cameras(32),
            cfg: &cfg,
            masks: InputMasks::default(),
        };
        let mut tracker = VqTracker::new(4, None);
        let mut rng = derived_rng(cfg.seed, rng_tag::TRAIN, 0, 1);
        let mut tape: Tape<f32> = Tape::new();
        let parts = item_loss(&ctx, &mut tape, &bundle, &mut tracker, &mut rng).unwrap();
        tape.backward(parts.total).unwrap();
        let grads: BTreeMap<String, Vec<f32>> = tape
            .param_grads()
            .filter_map(|(n, g)| g.map(|g| (n.to_string(), g.to_vec())))
            .collect();
        check_coverage(&grads, &bundle.store, VqMode::Symmetric).unwrap();
        assert_eq!(tracker.usage.iter().sum::<u64>() as usize, 5);
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let ds = tiny_dataset(2, 32);
        let vocab = Vocab::build(ds.instructions(), 8);
        let cameras = default_cameras(32);
        let cfg = TrainConfig { steps: 20, ..overfit_cfg(20) };
        let run = || {
            let fresh = Checkpoint::fresh(tiny_model(), vocab.clone(), 5).unwrap();
            let out = tempfile::tempdir().unwrap();
            let (ck, outcome) =
                train(&ds, fresh, &cfg, &cameras, InputMasks::default(), out.path()).unwrap();
            (ck, std::fs::read_to_string(outcome.trace_path).unwrap())
        };
        let (a, trace_a) = run();
        let (b, trace_b) = run();
        assert_eq!(trace_a, trace_b);
        for (name, arr) in a.bundle.store.iter() {
            assert_eq!(arr.data(), b.bundle.store.get(name).unwrap().data(), "{name}");
        }
        assert_eq!(a.vq, b.vq);
    }

    #[test]
    fn resuming_matches_the_straight_run_and_extends_the_trace() {
        let ds = tiny_dataset(1, 32);
        let vocab = Vocab::build(ds.instructions(), 8);
        let cameras = default_cameras(32);

        let straight_out = tempfile::tempdir().unwrap();
        let fresh = Checkpoint::fresh(tiny_model(), vocab.clone(), 6).unwrap();
        let cfg24 = TrainConfig { steps: 24, ..overfit_cfg(24) };
        let (straight, straight_outcome) = train(
            &ds,
            fresh,
            &cfg24,
            &cameras,
            InputMasks::default(),
            straight_out.path(),
        )
        .unwrap();

        let resumed_out = tempfile::tempdir().unwrap();
        let fresh = Checkpoint::fresh(tiny_model(), vocab, 6).unwrap();
        let cfg12 = TrainConfig { steps: 12, ..overfit_cfg(12) };
        let (_half, half_outcome) = train(
            &ds,
            fresh,
            &cfg12,
            &cameras,
            InputMasks::default(),
            resumed_out.path(),
        )
        .unwrap();
        let reloaded = Checkpoint::load(&half_outcome.final_checkpoint).unwrap();
        let (resumed, resumed_outcome) = train(
            &ds,
            reloaded,
            &cfg24,
            &cameras,
            InputMasks::default(),
            resumed_out.path(),
        )
        .unwrap();
        assert_eq!(resumed_outcome.ran_steps, 12);

        let ta = std::fs::read_to_string(straight_outcome.trace_path).unwrap();
        let tb = std::fs::read_to_string(resumed_outcome.trace_path).unwrap();
        assert_eq!(ta, tb, "trace continuity broke across the resume");
        for (name, arr) in straight.bundle.store.iter() {
            assert_eq!(arr.data(), resumed.bundle.store.get(name).unwrap().data(), "{name}");
        }
    }

    #[test]
    fn trace_rows_roundtrip_through_text() {
        let row = TraceRow {
            step: 17,
            total: 4.125,
            ce_coord: 2.0625,
            ce_rot: 1.5,
            ce_grip: 0.4375,
            mse_vq: 0.125,
        };
        assert_eq!(TraceRow::parse(&row.to_line()).unwrap(), row);
        assert!(TraceRow::parse("1,2,3").is_err());
    }

    #[test]
    fn poisoned_parameters_abort_with_a_diagnostic_checkpoint() {
        let ds = tiny_dataset(1, 32);
        let vocab = Vocab::build(ds.instructions(), 8);
        let mut fresh = Checkpoint::fresh(tiny_model(), vocab, 5).unwrap();
        fresh
            .bundle
            .store
            .get_mut("policy.coord.w")
            .unwrap()
            .data_mut()
            .fill(f32::NAN);
        let out = tempfile::tempdir().unwrap();
        let cfg = overfit_cfg(3);
        let cameras = default_cameras(32);
        let err = match train(&ds, fresh, &cfg, &cameras, InputMasks::default(), out.path()) {
            Err(e) => e,
            Ok(_) => panic!("training accepted NaN parameters"),
        };
        assert!(err.to_string().contains("step 1"), "{err}");
        let diag = out.path().join(DIAGNOSTIC_CHECKPOINT);
        assert!(Checkpoint::load(&diag).is_ok(), "diagnostic checkpoint unreadable");
    }
}
