//! Closed-loop rollouts, success-rate reports, and the input-ablation matrix.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use voxbc_sim::{
    default_templates, language_for, run_expert, Action, Camera, Env, GripperState, LangMode,
    RgbdImage, SceneObject, SimConfig, Status, TaskKind,
};
use voxbc_tensor::Tape;

use crate::action::{discretize, undiscretize, DiscretizedAction, ROT_BINS};
use crate::data::{
    dataset_tasks, dataset_vocab, extract_keyframes, Dataset, DEFAULT_HISTORY, DEFAULT_V_EPS,
};
use crate::error::{AgentError, Result};
use crate::model::{Bundle, Checkpoint, ModelConfig};
use crate::policy::{decode_action, ActionLogits};
use crate::train::{forward_item, train, InputMasks, TrainConfig, TrainLangMode};
use crate::voxel::{unproject, voxelize, ColoredPoint};
use crate::{derived_rng, rng_tag};

/// Rollouts end unconditionally after this many macro actions.
pub const MAX_ROLLOUT_STEPS: usize = 25;

/// Why a failed episode ended. Successful episodes carry no cause.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCause {
    MaxSteps,
    InvalidPath,
    OutOfWorkspace,
}

impl FailureCause {
    pub fn name(self) -> &'static str {
        match self {
            FailureCause::MaxSteps => "max_steps",
            FailureCause::InvalidPath => "invalid_path",
            FailureCause::OutOfWorkspace => "out_of_workspace",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub task: String,
    pub episode: usize,
    pub variation: usize,
    pub success: bool,
    pub failure: Option<FailureCause>,
    /// Macro actions executed, including the terminal one.
    pub steps: usize,
}

struct RolloutEnd {
    success: bool,
    failure: Option<FailureCause>,
    steps: usize,
}

/// Steps the environment until success, a refused action, or the step budget.
/// Refusals terminate immediately: the state did not change, so a
/// deterministic actor would repeat the same action forever.
fn drive(
    env: &mut Env,
    max_steps: usize,
    mut act: impl FnMut(&Env, usize) -> Result<Action>,
) -> Result<RolloutEnd> {
    for step in 0..max_steps {
        let action = act(env, step)?;
        match env.step(&action) {
            Status::Ok => {}
            Status::InvalidPath => {
                return Ok(RolloutEnd {
                    success: false,
                    failure: Some(FailureCause::InvalidPath),
                    steps: step + 1,
                })
            }
            Status::OutOfWorkspace => {
                return Ok(RolloutEnd {
                    success: false,
                    failure: Some(FailureCause::OutOfWorkspace),
                    steps: step + 1,
                })
            }
        }
        if env.success() {
            return Ok(RolloutEnd { success: true, failure: None, steps: step + 1 });
        }
    }
    Ok(RolloutEnd {
        success: false,
        failure: Some(FailureCause::MaxSteps),
        steps: max_steps,
    })
}

fn snapped_action(a: &DiscretizedAction, v: usize) -> Action {
    let (pose, _quat) = undiscretize(a, v);
    Action { pos: pose.pos, euler: pose.euler, open: pose.open }
}

/// The expert's keyframe poses pushed through the discretize/undiscretize
/// codec, in order. This is the action sequence a perfect policy would emit.
fn expert_script(plan_env: &mut Env, v: usize) -> Result<Vec<Action>> {
    let traj = run_expert(plan_env, None)?;
    let speeds: Vec<f64> = traj.steps.iter().map(|s| s.speed).collect();
    let opens: Vec<bool> = traj.steps.iter().map(|s| s.open).collect();
    let keys = extract_keyframes(&speeds, &opens, DEFAULT_V_EPS)?;
    keys.iter()
        .map(|&k| {
            let s = &traj.steps[k];
            let pose = GripperState { pos: s.pos, euler: s.euler, open: s.open };
            Ok(snapped_action(&discretize(&pose, v)?, v))
        })
        .collect()
}

/// Closed-loop actor fed to [`drive`] by the learned policy: keeps the most
/// recent executed-step observations, votes a skill code over them plus the
/// current one, and decodes the policy heads greedily.
struct LearnedActor<'a> {
    bundle: &'a Bundle,
    masks: InputMasks,
    history: usize,
    instruction: &'a str,
    cameras: &'a [Camera],
    past: VecDeque<(usize, Vec<RgbdImage>)>,
}

impl LearnedActor<'_> {
    fn act(&mut self, env: &Env, step: usize) -> Result<Action> {
        let images = env.observe(self.cameras);
        let point_sets: Vec<Vec<ColoredPoint>> = images
            .iter()
            .zip(self.cameras)
            .map(|(img, cam)| unproject(img, cam))
            .collect();
        let v = self.bundle.cfg.policy.v;
        let grid = voxelize(&point_sets, v)?;

        let mut obs: Vec<&[RgbdImage]> =
            self.past.iter().map(|(_, im)| im.as_slice()).collect();
        obs.push(&images);
        let mut timesteps: Vec<usize> = self.past.iter().map(|(t, _)| *t).collect();
        timesteps.push(step);
        let current = timesteps.len() - 1;

        let mut tape: Tape<f32> = Tape::new();
        let fwd = forward_item(
            &mut tape,
            &self.bundle.skill,
            &self.bundle.policy,
            &self.bundle.store,
            &self.bundle.vocab,
            self.instruction,
            &obs,
            &timesteps,
            current,
            &grid,
            self.masks,
            None,
        )?;
        let logits =
            ActionLogits::from_output(&tape, &fwd.out, v, self.bundle.cfg.policy.rot_bins);
        let discrete = decode_action(&logits)?;

        self.past.push_back((step, images));
        while self.past.len() > self.history {
            self.past.pop_front();
        }
        Ok(snapped_action(&discrete, v))
    }
}

/// What acts during evaluation.
pub enum EvalPolicy<'a> {
    /// A trained model, decoded greedily, with the same input masks it was
    /// trained under.
    Learned { bundle: &'a Bundle, masks: InputMasks },
    /// The scripted expert's keyframes replayed through the action codec.
    Expert { v: usize },
    /// Uniform draws over the discrete action space.
    Random { v: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Episodes per task.
    pub episodes: usize,
    pub seed: u64,
    pub jitter: f64,
    /// Past observations kept for skill-code voting.
    pub history: usize,
    /// How instructions are drawn for learned rollouts.
    pub lang_mode: LangMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 25,
            seed: 0,
            jitter: 0.02,
            history: DEFAULT_HISTORY,
            lang_mode: LangMode::Single,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(AgentError::Config("episode count must be positive".into()));
        }
        if !(0.0..=0.05).contains(&self.jitter) {
            return Err(AgentError::Config(format!(
                "jitter {} outside [0, 0.05]",
                self.jitter
            )));
        }
        Ok(())
    }
}

/// Runs one episode. Everything random derives from (seed, task, episode), so
/// the same inputs replay the same scene, instruction, and random actions.
pub fn rollout(
    policy: &EvalPolicy,
    task: TaskKind,
    episode: usize,
    cfg: &EvalConfig,
    cameras: &[Camera],
    templates: &[String],
    extra: &[SceneObject],
) -> Result<EpisodeOutcome> {
    let variation = episode % task.variation_count();
    let mut rng = derived_rng(cfg.seed, rng_tag::EVAL, task.index() as u64, episode as u64);
    let end = match policy {
        EvalPolicy::Expert { v } => {
            // Twin environments from a cloned rng stream: one is planned on,
            // the other only sees codec-snapped actions.
            let mut plan_rng = rng.clone();
            let mut plan_env = Env::new(task, variation, cfg.jitter, extra, &mut plan_rng)?;
            let mut env = Env::new(task, variation, cfg.jitter, extra, &mut rng)?;
            let script = expert_script(&mut plan_env, *v)?;
            drive(&mut env, MAX_ROLLOUT_STEPS, |_, step| {
                Ok(script[step.min(script.len() - 1)])
            })?
        }
        EvalPolicy::Learned { bundle, masks } => {
            let mut env = Env::new(task, variation, cfg.jitter, extra, &mut rng)?;
            let instruction =
                language_for(templates, task, variation, cfg.lang_mode, &mut rng)?;
            let mut actor = LearnedActor {
                bundle,
                masks: *masks,
                history: cfg.history,
                instruction: &instruction,
                cameras,
                past: VecDeque::new(),
            };
            drive(&mut env, MAX_ROLLOUT_STEPS, |env, step| actor.act(env, step))?
        }
        EvalPolicy::Random { v } => {
            let mut env = Env::new(task, variation, cfg.jitter, extra, &mut rng)?;
            drive(&mut env, MAX_ROLLOUT_STEPS, |_, _| {
                let discrete = DiscretizedAction {
                    coord: [
                        rng.gen_range(0..*v),
                        rng.gen_range(0..*v),
                        rng.gen_range(0..*v),
                    ],
                    rot: [
                        rng.gen_range(0..ROT_BINS),
                        rng.gen_range(0..ROT_BINS),
                        rng.gen_range(0..ROT_BINS),
                    ],
                    close: rng.gen_bool(0.5),
                };
                Ok(snapped_action(&discrete, *v))
            })?
        }
    };
    Ok(EpisodeOutcome {
        task: task.name().to_string(),
        episode,
        variation,
        success: end.success,
        failure: end.failure,
        steps: end.steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: String,
    pub episodes: usize,
    pub successes: usize,
    pub max_steps: usize,
    pub invalid_path: usize,
    pub out_of_workspace: usize,
}

impl EvalRow {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.episodes as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub episodes_per_task: usize,
    pub rows: Vec<EvalRow>,
    pub outcomes: Vec<EpisodeOutcome>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| AgentError::Format(format!("report encoding failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<EvalReport> {
        serde_json::from_str(text)
            .map_err(|e| AgentError::Format(format!("report decoding failed: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| AgentError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        let text = fs::read_to_string(path).map_err(|e| AgentError::io(path, e))?;
        EvalReport::from_json(&text)
    }

    /// One line per episode; `failure` is empty on success.
    pub fn episode_csv(&self) -> String {
        let mut out = String::from("task,episode,variation,success,failure,steps\n");
        for o in &self.outcomes {
            let cause = o.failure.map(FailureCause::name).unwrap_or("");
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                o.task, o.episode, o.variation, o.success, cause, o.steps
            );
        }
        out
    }

    pub fn text_table(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.task.len())
            .chain(["task".len()])
            .max()
            .unwrap_or(4);
        let mut out = format!(
            "{:name_w$}  {:>8}  {:>9}  {:>6}  {:>9}  {:>12}  {:>16}\n",
            "task", "episodes", "successes", "rate", "max_steps", "invalid_path",
            "out_of_workspace"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:name_w$}  {:>8}  {:>9}  {:>5.1}%  {:>9}  {:>12}  {:>16}",
                r.task,
                r.episodes,
                r.successes,
                100.0 * r.success_rate(),
                r.max_steps,
                r.invalid_path,
                r.out_of_workspace
            );
        }
        out
    }
}

fn task_templates(task: TaskKind, sim: Option<&SimConfig>) -> Vec<String> {
    match sim {
        Some(cfg) => cfg.templates_for(task),
        None => default_templates(task).iter().map(|t| (*t).to_string()).collect(),
    }
}

/// Evaluates `policy` over `episodes` seeded rollouts per task. Episodes are
/// independent, so they run in parallel; outcomes keep (task, episode) order
/// either way.
pub fn evaluate(
    policy: &EvalPolicy,
    tasks: &[TaskKind],
    cfg: &EvalConfig,
    cameras: &[Camera],
    sim: Option<&SimConfig>,
) -> Result<EvalReport> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(AgentError::Input("no tasks to evaluate".into()));
    }
    let extra = match sim {
        Some(c) => c.extra_objects()?,
        None => Vec::new(),
    };
    let templates: Vec<Vec<String>> =
        tasks.iter().map(|&t| task_templates(t, sim)).collect();
    let jobs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|ti| (0..cfg.episodes).map(move |e| (ti, e)))
        .collect();
    let run = |&(ti, e): &(usize, usize)| {
        rollout(policy, tasks[ti], e, cfg, cameras, &templates[ti], &extra)
    };
    #[cfg(feature = "parallel")]
    let outcomes: Vec<EpisodeOutcome> = {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<EpisodeOutcome> = jobs.iter().map(run).collect::<Result<_>>()?;

    let rows = tasks
        .iter()
        .map(|task| {
            let mut row = EvalRow {
                task: task.name().to_string(),
                episodes: cfg.episodes,
                successes: 0,
                max_steps: 0,
                invalid_path: 0,
                out_of_workspace: 0,
            };
            for o in outcomes.iter().filter(|o| o.task == task.name()) {
                match o.failure {
                    None => row.successes += 1,
                    Some(FailureCause::MaxSteps) => row.max_steps += 1,
                    Some(FailureCause::InvalidPath) => row.invalid_path += 1,
                    Some(FailureCause::OutOfWorkspace) => row.out_of_workspace += 1,
                }
            }
            row
        })
        .collect();
    Ok(EvalReport { seed: cfg.seed, episodes_per_task: cfg.episodes, rows, outcomes })
}

/// Input-ablation conditions: which conditioning channels the policy sees and
/// how training instructions are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Voxels only: skill code and language both zeroed.
    ObsOnly,
    /// Voxels and skill code; language zeroed.
    ObsSkill,
    /// Voxels and language; skill code zeroed.
    ObsLang,
    /// Full inputs, instructions always from the first template.
    SingleLang,
    /// Full inputs, instructions drawn over all templates.
    MultiLang,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::ObsOnly,
        Condition::ObsSkill,
        Condition::ObsLang,
        Condition::SingleLang,
        Condition::MultiLang,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::ObsOnly => "obs_only",
            Condition::ObsSkill => "obs_skill",
            Condition::ObsLang => "obs_lang",
            Condition::SingleLang => "single_lang",
            Condition::MultiLang => "multi_lang",
        }
    }

    pub fn parse(s: &str) -> Result<Condition> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Condition::ALL.iter().map(|c| c.name()).collect();
                AgentError::Config(format!(
                    "unknown ablation condition {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }

    pub fn masks(self) -> InputMasks {
        match self {
            Condition::ObsOnly => {
                InputMasks { skill_to_policy: false, lang_to_policy: false }
            }
            Condition::ObsSkill => {
                InputMasks { skill_to_policy: true, lang_to_policy: false }
            }
            Condition::ObsLang => {
                InputMasks { skill_to_policy: false, lang_to_policy: true }
            }
            Condition::SingleLang | Condition::MultiLang => InputMasks::default(),
        }
    }

    pub fn train_lang(self) -> TrainLangMode {
        match self {
            Condition::SingleLang => TrainLangMode::Single,
            Condition::MultiLang => TrainLangMode::Multi,
            _ => TrainLangMode::AsRecorded,
        }
    }

    pub fn eval_lang(self) -> LangMode {
        match self {
            Condition::MultiLang => LangMode::Multi,
            _ => LangMode::Single,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub condition: Condition,
    pub rows: Vec<EvalRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| AgentError::Format(format!("report encoding failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<AblationReport> {
        serde_json::from_str(text)
            .map_err(|e| AgentError::Format(format!("report decoding failed: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| AgentError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<AblationReport> {
        let text = fs::read_to_string(path).map_err(|e| AgentError::io(path, e))?;
        AblationReport::from_json(&text)
    }

    /// Conditions down the side, tasks across the top, success rates in the
    /// cells, unweighted mean on the right.
    pub fn text_table(&self) -> String {
        let tasks: Vec<&str> = self
            .rows
            .first()
            .map(|r| r.rows.iter().map(|row| row.task.as_str()).collect())
            .unwrap_or_default();
        let name_w = self
            .rows
            .iter()
            .map(|r| r.condition.name().len())
            .chain(["condition".len()])
            .max()
            .unwrap_or(9);
        let mut out = format!("{:name_w$}", "condition");
        for t in &tasks {
            let _ = write!(out, "  {:>w$}", t, w = t.len().max(6));
        }
        out.push_str("    mean\n");
        for r in &self.rows {
            let _ = write!(out, "{:name_w$}", r.condition.name());
            let mut sum = 0.0;
            for (t, row) in tasks.iter().zip(&r.rows) {
                let rate = 100.0 * row.success_rate();
                sum += rate;
                let _ = write!(out, "  {:>w$.1}%", rate, w = t.len().max(6) - 1);
            }
            let mean = if tasks.is_empty() { 0.0 } else { sum / tasks.len() as f64 };
            let _ = writeln!(out, "  {:>5.1}%", mean);
        }
        out
    }
}

/// Trains one model per condition from a shared initialization seed, then
/// evaluates each under its own masks and instruction mode. Artifacts land in
/// `out/<condition>/`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    ds: &Dataset,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    conditions: &[Condition],
    cameras: &[Camera],
    sim: Option<&SimConfig>,
    out: &Path,
) -> Result<AblationReport> {
    if conditions.is_empty() {
        return Err(AgentError::Input("no ablation conditions selected".into()));
    }
    let tasks = dataset_tasks(ds);
    let vocab = dataset_vocab(ds, sim)?;
    let mut rows = Vec::with_capacity(conditions.len());
    for &condition in conditions {
        log::info!("ablation condition {}", condition.name());
        let dir = out.join(condition.name());
        let mut cfg = train_cfg.clone();
        cfg.lang_mode = condition.train_lang();
        let fresh = Checkpoint::fresh(model.clone(), vocab.clone(), cfg.seed)?;
        let (trained, _outcome) =
            train(ds, fresh, &cfg, cameras, condition.masks(), &dir)?;
        let mut ecfg = eval_cfg.clone();
        ecfg.lang_mode = condition.eval_lang();
        let policy = EvalPolicy::Learned { bundle: &trained.bundle, masks: condition.masks() };
        let report = evaluate(&policy, &tasks, &ecfg, cameras, sim)?;
        report.save(&dir.join("eval.json"))?;
        rows.push(AblationRow { condition, rows: report.rows });
    }
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetIndex, Episode};
    use crate::model::ModelConfig;
    use crate::policy::PolicyConfig;
    use crate::skill::SkillConfig;
    use rand_chacha::ChaCha8Rng;
    use voxbc_sim::{default_cameras, fill_template, v3, ALL_TASKS};

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
            root: std::path::PathBuf::new(),
            index: DatasetIndex { resolution: res, episodes: Vec::new() },
            episodes: eps,
        }
    }

    fn press_env(seed: u64) -> Env {
        let mut rng: ChaCha8Rng = derived_rng(seed, rng_tag::EVAL, 0, 0);
        Env::new(TaskKind::PressButton, 0, 0.02, &[], &mut rng).unwrap()
    }

    #[test]
    fn expert_replay_succeeds_on_every_task() {
        let policy = EvalPolicy::Expert { v: 32 };
        let cfg = EvalConfig { episodes: 3, seed: 7, ..EvalConfig::default() };
        let cameras = default_cameras(32);
        let report = evaluate(&policy, &ALL_TASKS, &cfg, &cameras, None).unwrap();
        assert_eq!(report.rows.len(), ALL_TASKS.len());
        for row in &report.rows {
            assert_eq!(row.successes, 3, "{} fell short: {row:?}", row.task);
        }
    }

    #[test]
    fn a_no_op_actor_exhausts_the_step_budget() {
        let mut env = press_env(1);
        let end = drive(&mut env, MAX_ROLLOUT_STEPS, |env, _| {
            let g = env.gripper();
            Ok(Action { pos: g.pos, euler: g.euler, open: g.open })
        })
        .unwrap();
        assert!(!end.success);
        assert_eq!(end.failure, Some(FailureCause::MaxSteps));
        assert_eq!(end.steps, MAX_ROLLOUT_STEPS);
    }

    #[test]
    fn refused_actions_end_the_episode_with_their_cause() {
        let mut env = press_env(2);
        let out_of_bounds = Action { pos: v3(0.5, 0.5, 2.0), euler: v3(0.0, 0.0, 0.0), open: true };
        let end = drive(&mut env, MAX_ROLLOUT_STEPS, |_, _| Ok(out_of_bounds)).unwrap();
        assert_eq!(end.failure, Some(FailureCause::OutOfWorkspace));
        assert_eq!(end.steps, 1);

        let mut env = press_env(3);
        // below the table slab: inside the workspace but through solid wood
        let through_table = Action { pos: v3(0.5, 0.5, 0.01), euler: v3(0.0, 0.0, 0.0), open: true };
        let end = drive(&mut env, MAX_ROLLOUT_STEPS, |_, _| Ok(through_table)).unwrap();
        assert_eq!(end.failure, Some(FailureCause::InvalidPath));
        assert_eq!(end.steps, 1);
    }

    #[test]
    fn random_actions_barely_ever_press_the_button() {
        let policy = EvalPolicy::Random { v: 32 };
        let cfg = EvalConfig { episodes: 10, seed: 5, ..EvalConfig::default() };
        let cameras = default_cameras(32);
        let report =
            evaluate(&policy, &[TaskKind::PressButton], &cfg, &cameras, None).unwrap();
        assert!(report.rows[0].successes <= 1, "{:?}", report.rows[0]);
        for o in &report.outcomes {
            assert_eq!(o.success, o.failure.is_none(), "{o:?}");
        }
    }

    #[test]
    fn same_seed_reports_are_identical() {
        let policy = EvalPolicy::Random { v: 16 };
        let cfg = EvalConfig { episodes: 3, seed: 11, ..EvalConfig::default() };
        let cameras = default_cameras(32);
        let tasks = [TaskKind::PressButton, TaskKind::OpenDrawer];
        let a = evaluate(&policy, &tasks, &cfg, &cameras, None).unwrap();
        let b = evaluate(&policy, &tasks, &cfg, &cameras, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn learned_rollouts_run_within_budget_on_a_fresh_model() {
        let ds = tiny_dataset(1, 32);
        let vocab = dataset_vocab(&ds, None).unwrap();
        let ck = Checkpoint::fresh(tiny_model(), vocab, 3).unwrap();
        let policy = EvalPolicy::Learned { bundle: &ck.bundle, masks: InputMasks::default() };
        let cfg = EvalConfig { episodes: 2, seed: 4, ..EvalConfig::default() };
        let cameras = default_cameras(32);
        let report =
            evaluate(&policy, &[TaskKind::PressButton], &cfg, &cameras, None).unwrap();
        assert_eq!(report.outcomes.len(), 2);
        for o in &report.outcomes {
            assert!(o.steps <= MAX_ROLLOUT_STEPS);
            assert_eq!(o.success, o.failure.is_none(), "{o:?}");
        }
    }

    #[test]
    fn masked_policies_ignore_the_instruction_bit_for_bit() {
        let ds = tiny_dataset(1, 32);
        let vocab = dataset_vocab(&ds, None).unwrap();
        let ck = Checkpoint::fresh(tiny_model(), vocab, 6).unwrap();
        let bundle = &ck.bundle;
        let episode = &ds.episodes[0];
        let cameras = default_cameras(32);
        let points: Vec<Vec<ColoredPoint>> = episode.steps[0]
            .images
            .iter()
            .zip(&cameras)
            .map(|(img, cam)| unproject(img, cam))
            .collect();
        let grid = voxelize(&points, bundle.cfg.policy.v).unwrap();
        let obs = [episode.steps[0].images.as_slice()];
        let logits_for = |instruction: &str, masks: InputMasks| {
            let mut tape: Tape<f32> = Tape::new();
            let fwd = forward_item(
                &mut tape,
                &bundle.skill,
                &bundle.policy,
                &bundle.store,
                &bundle.vocab,
                instruction,
                &obs,
                &[0],
                0,
                &grid,
                masks,
                None,
            )
            .unwrap();
            (
                tape.data(fwd.out.coord).to_vec(),
                tape.data(fwd.out.grip).to_vec(),
            )
        };
        let blind = Condition::ObsOnly.masks();
        let a = logits_for("press the red button", blind);
        let b = logits_for("warble frumious bandersnatch", blind);
        assert_eq!(a, b, "masked logits depend on the instruction");
        let c = logits_for("press the red button", InputMasks::default());
        let d = logits_for("warble frumious bandersnatch", InputMasks::default());
        assert_ne!(c, d, "unmasked logits should react to the instruction");
    }

    #[test]
    fn reports_serialize_to_csv_table_and_json() {
        let report = EvalReport {
            seed: 3,
            episodes_per_task: 2,
            rows: vec![EvalRow {
                task: "press_button".into(),
                episodes: 2,
                successes: 1,
                max_steps: 0,
                invalid_path: 1,
                out_of_workspace: 0,
            }],
            outcomes: vec![
                EpisodeOutcome {
                    task: "press_button".into(),
                    episode: 0,
                    variation: 0,
                    success: true,
                    failure: None,
                    steps: 4,
                },
                EpisodeOutcome {
                    task: "press_button".into(),
                    episode: 1,
                    variation: 1,
                    success: false,
                    failure: Some(FailureCause::InvalidPath),
                    steps: 2,
                },
            ],
        };
        let csv = report.episode_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "task,episode,variation,success,failure,steps");
        assert_eq!(lines[1], "press_button,0,0,true,,4");
        assert_eq!(lines[2], "press_button,1,1,false,invalid_path,2");
        let table = report.text_table();
        assert!(table.contains("press_button"), "{table}");
        assert!(table.contains("50.0%"), "{table}");
        let back = EvalReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn condition_names_roundtrip_and_unknowns_are_rejected() {
        for c in Condition::ALL {
            assert_eq!(Condition::parse(c.name()).unwrap(), c);
        }
        let err = Condition::parse("telepathy").unwrap_err();
        assert!(matches!(err, AgentError::Config(_)), "{err}");
        assert!(err.to_string().contains("obs_only"), "{err}");

        let blind = Condition::ObsOnly.masks();
        assert!(!blind.skill_to_policy && !blind.lang_to_policy);
        let skill = Condition::ObsSkill.masks();
        assert!(skill.skill_to_policy && !skill.lang_to_policy);
        let lang = Condition::ObsLang.masks();
        assert!(!lang.skill_to_policy && lang.lang_to_policy);
        assert_eq!(Condition::SingleLang.train_lang(), TrainLangMode::Single);
        assert_eq!(Condition::MultiLang.train_lang(), TrainLangMode::Multi);
        assert_eq!(Condition::MultiLang.eval_lang(), LangMode::Multi);
        assert_eq!(Condition::ObsOnly.eval_lang(), LangMode::Single);
    }

    #[test]
    fn ablation_produces_one_row_per_condition() {
        let ds = tiny_dataset(1, 32);
        let train_cfg = TrainConfig {
            steps: 2,
            seed: 8,
            history: 2,
            future: 2,
            sample_freq: 1000,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let eval_cfg = EvalConfig { episodes: 1, seed: 8, ..EvalConfig::default() };
        let out = tempfile::tempdir().unwrap();
        let cameras = default_cameras(32);
        let conditions = [Condition::ObsOnly, Condition::MultiLang];
        let report = run_ablation(
            &ds,
            &tiny_model(),
            &train_cfg,
            &eval_cfg,
            &conditions,
            &cameras,
            None,
            out.path(),
        )
        .unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].condition, Condition::ObsOnly);
        assert_eq!(report.rows[1].condition, Condition::MultiLang);
        let table = report.text_table();
        assert!(table.contains("obs_only"), "{table}");
        assert!(table.contains("multi_lang"), "{table}");
        assert!(table.contains("press_button"), "{table}");
        assert!(out.path().join("obs_only").join("eval.json").is_file());
        assert!(Checkpoint::load(&out.path().join("multi_lang").join("checkpoint")).is_ok());
        let back = AblationReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn eval_config_rejects_unknown_keys() {
        let err = serde_json::from_str::<EvalConfig>(r#"{"episodes": 3, "walrus": 1}"#);
        assert!(err.is_err());
        let cfg: EvalConfig = serde_json::from_str(r#"{"episodes": 3}"#).unwrap();
        assert_eq!(cfg.episodes, 3);
        assert_eq!(cfg.lang_mode, LangMode::Single);
    }
}
