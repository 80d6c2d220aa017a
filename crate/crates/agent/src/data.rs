//! Demonstration storage and training-sample assembly.
//!
//! An episode is a directory holding a JSON manifest plus one little-endian
//! buffer (the tensor container format). A dataset root holds episode
//! directories and an `index.json` listing them.
//!
//! Training items are indices into an episode: a current timestep, history
//! timesteps drawn from the same snippet, future keyframe timesteps, and
//! the next keyframe whose action is the prediction target.

use crate::error::{AgentError, Result};
use crate::voxel::ColoredPoint;
use crate::{derived_rng, rng_tag};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};
use voxbc_sim::{
    default_templates, fill_template, language_for, run_expert, Camera, Env, ExpertTrajectory,
    LangMode, RgbdImage, SimConfig, TaskKind, Vec3, WORKSPACE,
};
use voxbc_tensor::{ContainerReader, ContainerWriter};

pub const DEFAULT_HISTORY: usize = 3;
pub const DEFAULT_FUTURE: usize = 3;
pub const DEFAULT_V_EPS: f64 = 1e-2;
pub const DEFAULT_MAX_SHIFT: f64 = 0.125;
pub const DEFAULT_SAMPLE_FREQ: usize = 10;
pub const INDEX_FILE: &str = "index.json";
pub const CAMERA_COUNT: usize = 4;

#[derive(Debug, Clone)]
pub struct EpisodeStep {
    /// One image per camera, in rig order.
    pub images: Vec<RgbdImage>,
    pub pos: Vec3,
    pub euler: Vec3,
    pub open: bool,
    pub speed: f64,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub task: TaskKind,
    pub variation: usize,
    pub instruction: String,
    pub seed: u64,
    pub resolution: usize,
    pub steps: Vec<EpisodeStep>,
}

impl Episode {
    pub fn from_expert(
        task: TaskKind,
        variation: usize,
        instruction: String,
        seed: u64,
        resolution: usize,
        traj: &ExpertTrajectory,
    ) -> Result<Episode> {
        let images = traj
            .images
            .as_ref()
            .ok_or_else(|| AgentError::Input("trajectory was recorded without images".into()))?;
        if images.len() != traj.steps.len() {
            return Err(AgentError::Data(format!(
                "{} image sets for {} steps",
                images.len(),
                traj.steps.len()
            )));
        }
        let steps = traj
            .steps
            .iter()
            .zip(images)
            .map(|(s, imgs)| {
                if imgs.len() != CAMERA_COUNT {
                    return Err(AgentError::Data(format!(
                        "expected {CAMERA_COUNT} cameras, got {}",
                        imgs.len()
                    )));
                }
                Ok(EpisodeStep {
                    images: imgs.clone(),
                    pos: s.pos,
                    euler: s.euler,
                    open: s.open,
                    speed: s.speed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Episode { task, variation, instruction, seed, resolution, steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn keyframes(&self, v_eps: f64) -> Result<Vec<usize>> {
        let speeds: Vec<f64> = self.steps.iter().map(|s| s.speed).collect();
        let opens: Vec<bool> = self.steps.iter().map(|s| s.open).collect();
        extract_keyframes(&speeds, &opens, v_eps)
    }
}

/// Keyframes are timesteps where the arm dwells (speed below `v_eps`) or the
/// gripper toggles. Step 0 is never a keyframe; the final step always is.
pub fn extract_keyframes(speeds: &[f64], opens: &[bool], v_eps: f64) -> Result<Vec<usize>> {
    if speeds.len() != opens.len() {
        return Err(AgentError::Data(format!(
            "{} speeds vs {} gripper states",
            speeds.len(),
            opens.len()
        )));
    }
    let t_len = speeds.len();
    if t_len < 2 {
        return Err(AgentError::Data(format!(
            "trajectory of length {t_len} cannot have keyframes"
        )));
    }
    let mut keys = Vec::new();
    for t in 1..t_len {
        if speeds[t] < v_eps || opens[t] != opens[t - 1] {
            keys.push(t);
        }
    }
    if keys.last() != Some(&(t_len - 1)) {
        keys.push(t_len - 1);
    }
    Ok(keys)
}

/// Half-open ranges between consecutive keyframes; together they partition
/// [0, T).
pub fn segment_snippets(keyframes: &[usize], t_len: usize) -> Vec<Range<usize>> {
    let mut ranges = Vec::with_capacity(keyframes.len() + 1);
    let mut start = 0;
    for &k in keyframes {
        if k > start {
            ranges.push(start..k);
        }
        start = k;
    }
    ranges.push(start..t_len);
    ranges
}

fn snippet_containing(snippets: &[Range<usize>], t: usize) -> Option<&Range<usize>> {
    snippets.iter().find(|r| r.contains(&t))
}

/// One training sample, as indices into its episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemSpec {
    pub episode: usize,
    pub t: usize,
    /// Same-snippet history timesteps, ascending, never containing `t`.
    pub history: Vec<usize>,
    /// Future keyframe timesteps (all > t), ascending.
    pub future: Vec<usize>,
    /// Next keyframe after `t`; its action is the prediction target.
    pub target_t: usize,
}

impl ItemSpec {
    /// All observation timesteps, ascending; `t` is always a member.
    pub fn obs_timesteps(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.history.clone();
        all.push(self.t);
        all.extend(&self.future);
        all.sort_unstable();
        all
    }
}

/// Draws history within t's snippet (uniform, no replacement, clamped to
/// availability) and takes up to `f` nearest future keyframes.
pub fn make_training_item(
    keyframes: &[usize],
    t_len: usize,
    episode: usize,
    t: usize,
    h: usize,
    f: usize,
    rng: &mut impl Rng,
) -> Result<ItemSpec> {
    let target_t = *keyframes
        .iter()
        .find(|&&k| k > t)
        .ok_or_else(|| AgentError::Range(format!("timestep {t} is beyond the last keyframe")))?;
    let snippets = segment_snippets(keyframes, t_len);
    let snippet = snippet_containing(&snippets, t)
        .ok_or_else(|| AgentError::Range(format!("timestep {t} outside [0, {t_len})")))?;
    let mut candidates: Vec<usize> = snippet.clone().filter(|&i| i != t).collect();
    let take = h.min(candidates.len());
    let (drawn, _) = candidates.partial_shuffle(rng, take);
    let mut history = drawn.to_vec();
    history.sort_unstable();
    let future: Vec<usize> = keyframes.iter().copied().filter(|&k| k > t).take(f).collect();
    Ok(ItemSpec { episode, t, history, future, target_t })
}

/// Per-task sampling weights: observation count plus the nominal observation
/// set size, normalized over the tasks present.
pub fn task_weights(episodes: &[Episode], obs_set_size: usize) -> Vec<(TaskKind, f64)> {
    let mut counts: BTreeMap<usize, (TaskKind, usize)> = BTreeMap::new();
    for ep in episodes {
        let e = counts.entry(ep.task.index()).or_insert((ep.task, 0));
        e.1 += ep.len();
    }
    let raw: Vec<(TaskKind, f64)> =
        counts.into_values().map(|(k, n)| (k, (n + obs_set_size) as f64)).collect();
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    raw.into_iter().map(|(k, w)| (k, w / total)).collect()
}

/// Uniform per-axis shift in ±max_shift. Always consumes three draws.
pub fn draw_shift(rng: &mut impl Rng, max_shift: f64) -> Vec3 {
    let mut axis = || {
        if max_shift == 0.0 {
            rng.gen::<f64>();
            0.0
        } else {
            rng.gen_range(-max_shift..=max_shift)
        }
    };
    let x = axis();
    let y = axis();
    let z = axis();
    Vec3 { x, y, z }
}

/// Clamps the shift per-axis so the shifted target stays inside the
/// workspace.
pub fn clip_shift(shift: Vec3, target_pos: Vec3) -> Vec3 {
    let clamp = |s: f64, p: f64, lo: f64, hi: f64| s.max(lo - p).min(hi - p);
    Vec3 {
        x: clamp(shift.x, target_pos.x, WORKSPACE.min.x, WORKSPACE.max.x),
        y: clamp(shift.y, target_pos.y, WORKSPACE.min.y, WORKSPACE.max.y),
        z: clamp(shift.z, target_pos.z, WORKSPACE.min.z, WORKSPACE.max.z),
    }
}

/// Applies one rigid translation to every point and the target position.
pub fn apply_shift(points: &mut [ColoredPoint], target_pos: &mut Vec3, shift: Vec3) {
    for p in points.iter_mut() {
        p.pos = p.pos + shift;
    }
    *target_pos = *target_pos + shift;
}

/// Random rigid shift applied identically to the point cloud and the target,
/// clipped so the target action stays in the workspace. Returns the shift.
pub fn augment(
    points: &mut [ColoredPoint],
    target_pos: &mut Vec3,
    rng: &mut impl Rng,
    max_shift: f64,
) -> Vec3 {
    let shift = clip_shift(draw_shift(rng, max_shift), *target_pos);
    apply_shift(points, target_pos, shift);
    shift
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EpisodeMeta {
    instruction: String,
    task: String,
    variation: usize,
    seed: u64,
    resolution: usize,
    steps: usize,
    cameras: usize,
}

pub fn save_episode(ep: &Episode, dir: &Path) -> Result<()> {
    if ep.is_empty() {
        return Err(AgentError::Data("cannot save an empty episode".into()));
    }
    let t_len = ep.len();
    let res = ep.resolution;
    let pixels = res * res;
    for (t, s) in ep.steps.iter().enumerate() {
        if s.images.len() != CAMERA_COUNT || s.images.iter().any(|i| i.resolution != res) {
            return Err(AgentError::Data(format!("step {t} images do not match the rig")));
        }
    }

    let mut rgb = Vec::with_capacity(t_len * CAMERA_COUNT * 3 * pixels);
    let mut depth = Vec::with_capacity(t_len * CAMERA_COUNT * pixels);
    let mut pos = Vec::with_capacity(t_len * 3);
    let mut euler = Vec::with_capacity(t_len * 3);
    let mut open = Vec::with_capacity(t_len);
    let mut speed = Vec::with_capacity(t_len);
    for s in &ep.steps {
        for img in &s.images {
            rgb.extend_from_slice(&img.rgb);
            depth.extend_from_slice(&img.depth);
        }
        pos.extend_from_slice(&[s.pos.x, s.pos.y, s.pos.z]);
        euler.extend_from_slice(&[s.euler.x, s.euler.y, s.euler.z]);
        open.push(if s.open { 1.0f32 } else { 0.0 });
        speed.push(s.speed);
    }

    let mut w = ContainerWriter::new();
    w.set_meta(serde_json::to_value(EpisodeMeta {
        instruction: ep.instruction.clone(),
        task: ep.task.name().to_string(),
        variation: ep.variation,
        seed: ep.seed,
        resolution: res,
        steps: t_len,
        cameras: CAMERA_COUNT,
    })?);
    w.add("rgb", &[t_len, CAMERA_COUNT, 3, res, res], &rgb)?;
    w.add("depth", &[t_len, CAMERA_COUNT, res, res], &depth)?;
    w.add("pos", &[t_len, 3], &pos)?;
    w.add("euler", &[t_len, 3], &euler)?;
    w.add("open", &[t_len], &open)?;
    w.add("speed", &[t_len], &speed)?;
    w.write(dir).map_err(|e| AgentError::Format(e.to_string()))
}

pub fn load_episode(dir: &Path) -> Result<Episode> {
    let r = ContainerReader::open(dir).map_err(|e| AgentError::Format(e.to_string()))?;
    let meta: EpisodeMeta = serde_json::from_value(r.meta().clone())
        .map_err(|e| AgentError::Format(format!("{}: {e}", dir.display())))?;
    let task = TaskKind::parse(&meta.task)
        .map_err(|_| AgentError::Format(format!("unknown task {:?}", meta.task)))?;
    let read_f32 = |name: &str| -> Result<Vec<f32>> {
        Ok(r.read::<f32>(name).map_err(|e| AgentError::Format(e.to_string()))?.into_data())
    };
    let read_f64 = |name: &str| -> Result<Vec<f64>> {
        Ok(r.read::<f64>(name).map_err(|e| AgentError::Format(e.to_string()))?.into_data())
    };
    let rgb = read_f32("rgb")?;
    let depth = read_f32("depth")?;
    let pos = read_f64("pos")?;
    let euler = read_f64("euler")?;
    let open = read_f32("open")?;
    let speed = read_f64("speed")?;

    let t_len = meta.steps;
    let res = meta.resolution;
    let pixels = res * res;
    let expect = |name: &str, got: usize, want: usize| -> Result<()> {
        if got != want {
            return Err(AgentError::Format(format!(
                "array {name} holds {got} values, manifest implies {want}"
            )));
        }
        Ok(())
    };
    expect("rgb", rgb.len(), t_len * CAMERA_COUNT * 3 * pixels)?;
    expect("depth", depth.len(), t_len * CAMERA_COUNT * pixels)?;
    expect("pos", pos.len(), t_len * 3)?;
    expect("euler", euler.len(), t_len * 3)?;
    expect("open", open.len(), t_len)?;
    expect("speed", speed.len(), t_len)?;

    let mut steps = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let images = (0..CAMERA_COUNT)
            .map(|c| {
                let rgb_at = (t * CAMERA_COUNT + c) * 3 * pixels;
                let depth_at = (t * CAMERA_COUNT + c) * pixels;
                RgbdImage {
                    resolution: res,
                    rgb: rgb[rgb_at..rgb_at + 3 * pixels].to_vec(),
                    depth: depth[depth_at..depth_at + pixels].to_vec(),
                }
            })
            .collect();
        steps.push(EpisodeStep {
            images,
            pos: Vec3 { x: pos[t * 3], y: pos[t * 3 + 1], z: pos[t * 3 + 2] },
            euler: Vec3 { x: euler[t * 3], y: euler[t * 3 + 1], z: euler[t * 3 + 2] },
            open: open[t] != 0.0,
            speed: speed[t],
        });
    }
    Ok(Episode {
        task,
        variation: meta.variation,
        instruction: meta.instruction,
        seed: meta.seed,
        resolution: res,
        steps,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct EpisodeEntry {
    /// Directory name relative to the dataset root.
    pub dir: String,
    pub task: String,
    pub variation: usize,
    pub steps: usize,
    pub instruction: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DatasetIndex {
    pub resolution: usize,
    pub episodes: Vec<EpisodeEntry>,
}

impl DatasetIndex {
    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root).map_err(|e| AgentError::io(root, e))?;
        let path = root.join(INDEX_FILE);
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json).map_err(|e| AgentError::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<DatasetIndex> {
        let path = root.join(INDEX_FILE);
        let json = std::fs::read_to_string(&path).map_err(|e| AgentError::io(&path, e))?;
        serde_json::from_str(&json)
            .map_err(|e| AgentError::Format(format!("{}: {e}", path.display())))
    }
}

/// A fully loaded dataset. Episodes are immutable after load.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Dataset> {
        let index = DatasetIndex::load(root)?;
        let episodes = index
            .episodes
            .iter()
            .map(|e| load_episode(&root.join(&e.dir)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { root: root.to_path_buf(), index, episodes })
    }

    pub fn instructions(&self) -> Vec<&str> {
        self.episodes.iter().map(|e| e.instruction.as_str()).collect()
    }
}

/// Distinct tasks present in the dataset, in task-index order.
pub fn dataset_tasks(ds: &Dataset) -> Vec<TaskKind> {
    let mut tasks: Vec<TaskKind> = ds.episodes.iter().map(|e| e.task).collect();
    tasks.sort();
    tasks.dedup();
    tasks
}

/// Vocabulary over the recorded instructions plus every filled template for
/// the dataset's tasks, so regenerated instructions stay in-vocabulary.
pub fn dataset_vocab(ds: &Dataset, sim: Option<&SimConfig>) -> Result<crate::lang::Vocab> {
    let mut corpus: Vec<String> =
        ds.episodes.iter().map(|e| e.instruction.clone()).collect();
    for task in dataset_tasks(ds) {
        let templates: Vec<String> = match sim {
            Some(cfg) => cfg.templates_for(task),
            None => default_templates(task).iter().map(|t| (*t).to_string()).collect(),
        };
        for template in &templates {
            for variation in 0..task.variation_count() {
                corpus.push(fill_template(task, variation, template)?);
            }
        }
    }
    Ok(crate::lang::Vocab::build(
        corpus.iter().map(String::as_str),
        crate::lang::DEFAULT_OOV_BUCKETS,
    ))
}

/// Precomputed sampling state: keyframes per episode, candidate timesteps
/// pooled per task, and normalized task weights.
#[derive(Debug, Clone)]
pub struct SamplePlan {
    pub keyframes: Vec<Vec<usize>>,
    pub tasks: Vec<TaskKind>,
    pub weights: Vec<f64>,
    /// (episode index, timestep) pools, one per entry of `tasks`.
    pub per_task_items: Vec<Vec<(usize, usize)>>,
}

impl SamplePlan {
    pub fn build(
        ds: &Dataset,
        v_eps: f64,
        sample_freq: usize,
        obs_set_size: usize,
    ) -> Result<SamplePlan> {
        if sample_freq == 0 {
            return Err(AgentError::Config("sample frequency must be positive".into()));
        }
        let mut keyframes = Vec::with_capacity(ds.episodes.len());
        for ep in &ds.episodes {
            keyframes.push(ep.keyframes(v_eps)?);
        }
        let weighted = task_weights(&ds.episodes, obs_set_size);
        let tasks: Vec<TaskKind> = weighted.iter().map(|(k, _)| *k).collect();
        let weights: Vec<f64> = weighted.iter().map(|(_, w)| *w).collect();
        let mut per_task_items: Vec<Vec<(usize, usize)>> = vec![Vec::new(); tasks.len()];
        for (ei, ep) in ds.episodes.iter().enumerate() {
            let slot = tasks.iter().position(|k| *k == ep.task).expect("task is present");
            let last_key = *keyframes[ei].last().expect("episodes have a final keyframe");
            let mut t = 0;
            while t < last_key {
                per_task_items[slot].push((ei, t));
                t += sample_freq;
            }
        }
        if per_task_items.iter().any(|p| p.is_empty()) {
            return Err(AgentError::Data(
                "a task contributes no sampleable timesteps; lower the sample frequency".into(),
            ));
        }
        Ok(SamplePlan { keyframes, tasks, weights, per_task_items })
    }

    /// Weighted task draw, then a uniform draw from that task's item pool.
    pub fn draw(&self, rng: &mut impl Rng) -> (usize, usize) {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut slot = self.tasks.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                slot = i;
                break;
            }
        }
        let pool = &self.per_task_items[slot];
        pool[rng.gen_range(0..pool.len())]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub tasks: Vec<TaskKind>,
    pub demos_per_task: usize,
    pub seed: u64,
    pub resolution: usize,
    pub jitter: f64,
    pub lang_mode: LangMode,
}

impl Default for GenSpec {
    fn default() -> GenSpec {
        GenSpec {
            tasks: voxbc_sim::ALL_TASKS.to_vec(),
            demos_per_task: 10,
            seed: 0,
            resolution: 48,
            jitter: 0.02,
            lang_mode: LangMode::Single,
        }
    }
}

/// Runs the scripted expert `demos_per_task` times per task, cycling
/// variations, and writes one episode directory per run plus the index.
/// `sim` supplies template/extra-object overrides; the camera rig is passed
/// explicitly so callers control resolution.
pub fn generate_dataset(
    spec: &GenSpec,
    cameras: &[Camera],
    sim: Option<&SimConfig>,
    out: &Path,
) -> Result<DatasetIndex> {
    if spec.tasks.is_empty() {
        return Err(AgentError::Input("no tasks requested".into()));
    }
    if cameras.len() != CAMERA_COUNT {
        return Err(AgentError::Config(format!(
            "camera rig has {} cameras, need {CAMERA_COUNT}",
            cameras.len()
        )));
    }
    if let Some(cam) = cameras.iter().find(|c| c.resolution != spec.resolution) {
        return Err(AgentError::Config(format!(
            "camera {} renders at {}, dataset expects {}",
            cam.name, cam.resolution, spec.resolution
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| AgentError::io(out, e))?;
    let extra = match sim {
        Some(cfg) => cfg.extra_objects()?,
        None => Vec::new(),
    };
    let mut entries = Vec::new();
    for &task in &spec.tasks {
        let templates: Vec<String> = match sim {
            Some(cfg) => cfg.templates_for(task),
            None => default_templates(task).iter().map(|s| s.to_string()).collect(),
        };
        for demo in 0..spec.demos_per_task {
            let mut rng =
                derived_rng(spec.seed, rng_tag::GEN, task.index() as u64, demo as u64);
            let variation = demo % task.variation_count();
            let mut env = Env::new(task, variation, spec.jitter, &extra, &mut rng)?;
            let instruction =
                language_for(&templates, task, variation, spec.lang_mode, &mut rng)?;
            let traj = run_expert(&mut env, Some(cameras))?;
            let episode = Episode::from_expert(
                task,
                variation,
                instruction.clone(),
                spec.seed,
                spec.resolution,
                &traj,
            )?;
            let dir_name = format!("{}-{demo:03}", task.name());
            save_episode(&episode, &out.join(&dir_name))?;
            entries.push(EpisodeEntry {
                dir: dir_name,
                task: task.name().to_string(),
                variation,
                steps: episode.len(),
                instruction,
            });
        }
    }
    let index = DatasetIndex { resolution: spec.resolution, episodes: entries };
    index.save(out)?;
    Ok(index)
}
