//! Bundles both model levels with the vocabulary and persists the whole
//! training state as a named-array container checkpoint.

use crate::error::{AgentError, Result};
use crate::lang::Vocab;
use crate::policy::{Policy, PolicyConfig};
use crate::skill::{SkillConfig, SkillEncoder, VqSnapshot, VqTracker};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use voxbc_tensor::{ContainerReader, ContainerWriter, Lamb, LambConfig, ParamStore};

pub const CHECKPOINT_KIND: &str = "voxbc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const OPT_M_PREFIX: &str = "opt.m/";
const OPT_V_PREFIX: &str = "opt.v/";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub skill: SkillConfig,
    pub policy: PolicyConfig,
}

impl ModelConfig {
    /// Cross-level width agreement; per-level checks run in the constructors.
    pub fn validate(&self) -> Result<()> {
        if self.skill.code_dim != self.policy.code_dim {
            return Err(AgentError::Config(format!(
                "skill code width {} does not match policy code width {}",
                self.skill.code_dim, self.policy.code_dim
            )));
        }
        if self.skill.lang_dim != self.policy.lang_dim {
            return Err(AgentError::Config(format!(
                "skill language width {} does not match policy language width {}",
                self.skill.lang_dim, self.policy.lang_dim
            )));
        }
        if self.skill.max_tokens != crate::lang::MAX_TOKENS {
            return Err(AgentError::Config(format!(
                "token budget {} is fixed at {}",
                self.skill.max_tokens,
                crate::lang::MAX_TOKENS
            )));
        }
        Ok(())
    }
}

/// Both levels plus everything needed to run them.
pub struct Bundle {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub skill: SkillEncoder,
    pub policy: Policy,
    pub store: ParamStore<f32>,
}

impl Bundle {
    /// Fresh bundle with parameters drawn from `seed`.
    pub fn new(cfg: ModelConfig, vocab: Vocab, seed: u64) -> Result<Bundle> {
        cfg.validate()?;
        let skill = SkillEncoder::new(cfg.skill.clone(), &vocab)?;
        let policy = Policy::new(cfg.policy.clone())?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        skill.init(&mut store, &mut rng)?;
        policy.init(&mut store, &mut rng)?;
        Ok(Bundle { cfg, vocab, skill, policy, store })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    version: u32,
    model: ModelConfig,
    vocab: Vocab,
    step: u64,
    vq: VqSnapshot,
}

/// A bundle plus optimizer and codebook bookkeeping, as written to disk.
pub struct Checkpoint {
    pub bundle: Bundle,
    pub step: u64,
    pub vq: VqSnapshot,
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn fresh(cfg: ModelConfig, vocab: Vocab, seed: u64) -> Result<Checkpoint> {
        let k = cfg.skill.code_k;
        let reset_after = cfg.skill.reset_after;
        let bundle = Bundle::new(cfg, vocab, seed)?;
        Ok(Checkpoint {
            bundle,
            step: 0,
            vq: VqTracker::new(k, reset_after).snapshot(),
            moments: BTreeMap::new(),
        })
    }

    pub fn tracker(&self) -> Result<VqTracker> {
        VqTracker::from_snapshot(self.vq.clone(), self.bundle.cfg.skill.reset_after)
    }

    /// Optimizer with restored moments and step counter.
    pub fn optimizer(&self, cfg: LambConfig) -> Result<Lamb<f32>> {
        let mut lamb = Lamb::new(cfg);
        for (name, (m, v)) in &self.moments {
            lamb.restore_moments(name, m.clone(), v.clone())?;
        }
        lamb.set_step(self.step);
        Ok(lamb)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_state(
            dir,
            &self.bundle,
            self.step,
            &self.vq,
            self.moments.iter().map(|(n, (m, v))| (n.as_str(), m.as_slice(), v.as_slice())),
        )
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        Self::load_impl(dir)
    }
}

/// Writes one checkpoint directory: every parameter array, paired optimizer
/// moment arrays, and a JSON header with configs, vocabulary, and codebook
/// bookkeeping.
pub fn save_state<'m>(
    dir: &Path,
    bundle: &Bundle,
    step: u64,
    vq: &VqSnapshot,
    moments: impl Iterator<Item = (&'m str, &'m [f32], &'m [f32])>,
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: CHECKPOINT_KIND.to_string(),
        version: CHECKPOINT_VERSION,
        model: bundle.cfg.clone(),
        vocab: bundle.vocab.clone(),
        step,
        vq: vq.clone(),
    };
    let mut writer = ContainerWriter::new();
    writer.set_meta(serde_json::to_value(&meta)?);
    for (name, array) in bundle.store.iter() {
        writer.add_array(name, array)?;
    }
    for (name, m, v) in moments {
        writer.add(&format!("{OPT_M_PREFIX}{name}"), &[m.len()], m)?;
        writer.add(&format!("{OPT_V_PREFIX}{name}"), &[v.len()], v)?;
    }
    Ok(writer.write(dir)?)
}

impl Checkpoint {
    fn load_impl(dir: &Path) -> Result<Checkpoint> {
        let reader = ContainerReader::open(dir)?;
        let meta: CheckpointMeta = serde_json::from_value(reader.meta().clone())?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(AgentError::Format(format!(
                "not a checkpoint (kind `{}`)",
                meta.kind
            )));
        }
        if meta.version != CHECKPOINT_VERSION {
            return Err(AgentError::Format(format!(
                "checkpoint version {} unsupported (want {CHECKPOINT_VERSION})",
                meta.version
            )));
        }
        let mut vocab = meta.vocab;
        vocab.rebuild_index();
        // the fresh bundle defines the exact parameter set the container
        // must supply
        let mut bundle = Bundle::new(meta.model, vocab, 0)?;
        let param_names: Vec<String> = bundle.store.names().map(String::from).collect();
        for name in param_names {
            let array = reader.read::<f32>(&name)?;
            let want = bundle.store.get(&name)?.shape().to_vec();
            if array.shape() != want.as_slice() {
                return Err(AgentError::Format(format!(
                    "array {name} has shape {:?}, model wants {:?}",
                    array.shape(),
                    want
                )));
            }
            bundle.store.get_mut(&name)?.data_mut().copy_from_slice(array.data());
        }
        let mut moments = BTreeMap::new();
        for name in reader.names() {
            if let Some(param) = name.strip_prefix(OPT_M_PREFIX) {
                let v_name = format!("{OPT_V_PREFIX}{param}");
                if !reader.contains(&v_name) {
                    return Err(AgentError::Format(format!(
                        "moment array {name} has no second-moment partner"
                    )));
                }
                let m = reader.read::<f32>(name)?.into_data();
                let v = reader.read::<f32>(&v_name)?.into_data();
                let expect = bundle.store.get(param)?.len();
                if m.len() != expect || v.len() != expect {
                    return Err(AgentError::Format(format!(
                        "moments for {param} hold {} elements, parameter has {expect}",
                        m.len()
                    )));
                }
                moments.insert(param.to_string(), (m, v));
            } else if !name.starts_with(OPT_V_PREFIX) && !bundle.store.contains(name) {
                return Err(AgentError::Format(format!(
                    "container holds unknown array {name}"
                )));
            }
        }
        if meta.vq.usage.len() != bundle.cfg.skill.code_k {
            return Err(AgentError::Format(format!(
                "code usage tracks {} entries, codebook has {}",
                meta.vq.usage.len(),
                bundle.cfg.skill.code_k
            )));
        }
        Ok(Checkpoint { bundle, step: meta.step, vq: meta.vq, moments })
    }
}
