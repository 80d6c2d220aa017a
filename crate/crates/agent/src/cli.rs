//! Command-line interface: dataset generation, training, evaluation, the
//! ablation matrix, code explanation, and artifact inspection.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use voxbc_sim::{default_cameras, Camera, LangMode, SimConfig, TaskKind, ALL_TASKS};

use crate::data::{
    dataset_tasks, dataset_vocab, generate_dataset, Dataset, Episode, GenSpec, INDEX_FILE,
};
use crate::error::{AgentError, Result};
use crate::eval::{
    evaluate, run_ablation, AblationReport, Condition, EvalConfig, EvalPolicy, EvalReport,
};
use crate::explain::{skill_word_stats, WordStats};
use crate::model::{Checkpoint, ModelConfig};
use crate::train::{train, InputMasks, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "voxbc",
    version,
    about = "Desk-scale language-conditioned manipulation: generate demos, \
             train the two-level voxel policy, evaluate, ablate, explain"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate scripted-expert demonstrations into a dataset directory.
    Gen(GenArgs),
    /// Train from a dataset; optionally resume from a checkpoint.
    Train(TrainArgs),
    /// Roll out a policy and report per-task success rates.
    Eval(EvalArgs),
    /// Train and evaluate one model per input-ablation condition.
    Ablate(AblateArgs),
    /// Count instruction words per voted skill code.
    Explain(ExplainArgs),
    /// Summarize a dataset, checkpoint, or report artifact.
    Inspect(InspectArgs),
}

/// Optional TOML file with `[model]`, `[train]`, `[eval]`, and `[gen]`
/// sections. Flags override the file; the file overrides built-in defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gen: GenSpec,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| AgentError::io(path, e))?;
    toml::from_str(&text).map_err(|e| {
        // toml errors span multiple lines; errors must stay single-line
        let flat = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        AgentError::Config(format!("{}: {flat}", path.display()))
    })
}

fn parse_tasks(names: &[String]) -> Result<Vec<TaskKind>> {
    names.iter().map(|s| Ok(TaskKind::parse(s)?)).collect()
}

fn load_sim(path: Option<&Path>) -> Result<Option<SimConfig>> {
    path.map(|p| Ok(SimConfig::load(p)?)).transpose()
}

fn camera_rig(sim: Option<&SimConfig>, resolution: usize) -> Vec<Camera> {
    match sim {
        Some(cfg) => cfg.camera_rig(),
        None => default_cameras(resolution).to_vec(),
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated tasks (default: all four).
    #[arg(long, value_delimiter = ',')]
    pub tasks: Vec<String>,
    /// Demos per task.
    #[arg(long)]
    pub demos: Option<usize>,
    /// Camera image resolution.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Scene placement jitter, 0 to 0.05.
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Instruction draw per demo: single or multi.
    #[arg(long)]
    pub lang_mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scene, camera, and template overrides.
    #[arg(long)]
    pub sim_config: Option<PathBuf>,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

fn run_gen(a: GenArgs) -> Result<()> {
    let file = load_file_config(a.config.as_deref())?;
    let mut spec = file.gen;
    if !a.tasks.is_empty() {
        spec.tasks = parse_tasks(&a.tasks)?;
    }
    if let Some(v) = a.demos {
        spec.demos_per_task = v;
    }
    if let Some(v) = a.resolution {
        spec.resolution = v;
    }
    if let Some(v) = a.jitter {
        spec.jitter = v;
    }
    if let Some(m) = &a.lang_mode {
        spec.lang_mode = LangMode::parse(m)?;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if a.out.exists() && !a.force {
        let occupied =
            fs::read_dir(&a.out).map_err(|e| AgentError::io(&a.out, e))?.next().is_some();
        if occupied {
            return Err(AgentError::State(format!(
                "output directory {} is not empty; pass --force to overwrite",
                a.out.display()
            )));
        }
    }
    let sim = load_sim(a.sim_config.as_deref())?;
    let cameras = camera_rig(sim.as_ref(), spec.resolution);
    let index = generate_dataset(&spec, &cameras, sim.as_ref(), &a.out)?;
    println!("wrote {} episodes to {}", index.episodes.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints and the loss trace.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub sim_config: Option<PathBuf>,
}

fn run_train(a: TrainArgs) -> Result<()> {
    let file = load_file_config(a.config.as_deref())?;
    let mut cfg = file.train;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let ds = Dataset::load(&a.data)?;
    let sim = load_sim(a.sim_config.as_deref())?;
    let cameras = camera_rig(sim.as_ref(), ds.index.resolution);
    let start = match &a.resume {
        Some(p) => Checkpoint::load(p)?,
        None => Checkpoint::fresh(file.model, dataset_vocab(&ds, sim.as_ref())?, cfg.seed)?,
    };
    let (_trained, outcome) = train(&ds, start, &cfg, &cameras, InputMasks::default(), &a.out)?;
    match outcome.last {
        Some(last) => println!(
            "step {} loss {}; checkpoint at {}",
            last.step,
            last.total,
            outcome.final_checkpoint.display()
        ),
        None => println!("checkpoint at {}", outcome.final_checkpoint.display()),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory; required for the learned policy.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Directory for report.json and episodes.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// learned, expert, or random.
    #[arg(long, default_value = "learned")]
    pub policy: String,
    /// Evaluate under an ablation condition's masks and instruction mode.
    #[arg(long)]
    pub condition: Option<String>,
    /// Comma-separated tasks (default: all four).
    #[arg(long, value_delimiter = ',')]
    pub tasks: Vec<String>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Instruction draw per episode: single or multi.
    #[arg(long)]
    pub lang_mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Action-grid resolution for the expert and random baselines.
    #[arg(long, default_value_t = 32)]
    pub action_res: usize,
    #[arg(long)]
    pub sim_config: Option<PathBuf>,
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let file = load_file_config(a.config.as_deref())?;
    let mut cfg = file.eval;
    if let Some(v) = a.episodes {
        cfg.episodes = v;
    }
    if let Some(v) = a.jitter {
        cfg.jitter = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let condition = a.condition.as_deref().map(Condition::parse).transpose()?;
    match (&a.lang_mode, condition) {
        (Some(m), _) => cfg.lang_mode = LangMode::parse(m)?,
        (None, Some(c)) => cfg.lang_mode = c.eval_lang(),
        (None, None) => {}
    }
    let masks = condition.map(Condition::masks).unwrap_or_default();
    let tasks = if a.tasks.is_empty() { ALL_TASKS.to_vec() } else { parse_tasks(&a.tasks)? };
    let sim = load_sim(a.sim_config.as_deref())?;
    let loaded;
    let policy = match a.policy.as_str() {
        "expert" => EvalPolicy::Expert { v: a.action_res },
        "random" => EvalPolicy::Random { v: a.action_res },
        "learned" => {
            let path = a.ckpt.as_deref().ok_or_else(|| {
                AgentError::Input("--ckpt is required for the learned policy".into())
            })?;
            loaded = Checkpoint::load(path)?;
            EvalPolicy::Learned { bundle: &loaded.bundle, masks }
        }
        other => {
            return Err(AgentError::Config(format!(
                "unknown policy {other:?}; expected learned, expert, or random"
            )))
        }
    };
    let resolution = match &policy {
        EvalPolicy::Learned { bundle, .. } => bundle.cfg.skill.resolution,
        _ => a.action_res,
    };
    let cameras = camera_rig(sim.as_ref(), resolution);
    let report = evaluate(&policy, &tasks, &cfg, &cameras, sim.as_ref())?;
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| AgentError::io(out, e))?;
        report.save(&out.join("report.json"))?;
        let csv = out.join("episodes.csv");
        fs::write(&csv, report.episode_csv()).map_err(|e| AgentError::io(&csv, e))?;
    }
    print!("{}", report.text_table());
    Ok(())
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for per-condition runs and ablation.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated conditions (default: all five).
    #[arg(long, value_delimiter = ',')]
    pub conditions: Vec<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Shared by training and evaluation.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sim_config: Option<PathBuf>,
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let file = load_file_config(a.config.as_deref())?;
    let mut train_cfg = file.train;
    let mut eval_cfg = file.eval;
    if let Some(v) = a.steps {
        train_cfg.steps = v;
    }
    if let Some(v) = a.episodes {
        eval_cfg.episodes = v;
    }
    if let Some(v) = a.seed {
        train_cfg.seed = v;
        eval_cfg.seed = v;
    }
    let conditions: Vec<Condition> = if a.conditions.is_empty() {
        Condition::ALL.to_vec()
    } else {
        a.conditions.iter().map(|s| Condition::parse(s)).collect::<Result<_>>()?
    };
    let ds = Dataset::load(&a.data)?;
    let sim = load_sim(a.sim_config.as_deref())?;
    let cameras = camera_rig(sim.as_ref(), ds.index.resolution);
    fs::create_dir_all(&a.out).map_err(|e| AgentError::io(&a.out, e))?;
    let report = run_ablation(
        &ds,
        &file.model,
        &train_cfg,
        &eval_cfg,
        &conditions,
        &cameras,
        sim.as_ref(),
        &a.out,
    )?;
    report.save(&a.out.join("ablation.json"))?;
    print!("{}", report.text_table());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the word-count JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accepted for interface uniformity; explanation is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn run_explain(a: ExplainArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let ds = Dataset::load(&a.data)?;
    let stats = skill_word_stats(&ck.bundle, &ds)?;
    if let Some(out) = &a.out {
        stats.save(out)?;
    }
    print!("{}", stats.text_table());
    Ok(())
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Dataset directory, checkpoint directory, or report JSON file.
    pub path: PathBuf,
    /// Accepted for interface uniformity; inspection is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn run_inspect(a: InspectArgs) -> Result<()> {
    let p = &a.path;
    if p.join(INDEX_FILE).is_file() {
        let ds = Dataset::load(p)?;
        println!("dataset at {}", p.display());
        println!("resolution {}", ds.index.resolution);
        println!("episodes {}", ds.episodes.len());
        for task in dataset_tasks(&ds) {
            let n = ds.episodes.iter().filter(|e| e.task == task).count();
            let steps: usize =
                ds.episodes.iter().filter(|e| e.task == task).map(Episode::len).sum();
            println!("  {} x{n} ({steps} steps)", task.name());
        }
        return Ok(());
    }
    if p.join(voxbc_tensor::MANIFEST_FILE).is_file() {
        let ck = Checkpoint::load(p)?;
        println!("checkpoint at {}", p.display());
        println!("step {}", ck.step);
        let (tensors, floats) = ck
            .bundle
            .store
            .iter()
            .fold((0usize, 0usize), |(t, f), (_, arr)| (t + 1, f + arr.data().len()));
        println!("parameters {tensors} tensors, {floats} floats");
        println!("skill codes {}", ck.bundle.cfg.skill.code_k);
        println!("action grid {}", ck.bundle.cfg.policy.v);
        println!("code usage {:?}", ck.vq.usage);
        return Ok(());
    }
    if p.is_file() {
        let text = fs::read_to_string(p).map_err(|e| AgentError::io(p, e))?;
        if let Ok(report) = EvalReport::from_json(&text) {
            print!("{}", report.text_table());
            return Ok(());
        }
        if let Ok(report) = AblationReport::from_json(&text) {
            print!("{}", report.text_table());
            return Ok(());
        }
        if let Ok(stats) = WordStats::from_json(&text) {
            print!("{}", stats.text_table());
            return Ok(());
        }
        return Err(AgentError::Format(format!(
            "{} is not a recognized report file",
            p.display()
        )));
    }
    Err(AgentError::Input(format!("nothing to inspect at {}", p.display())))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Explain(a) => run_explain(a),
        Command::Inspect(a) => run_inspect(a),
    }
}
