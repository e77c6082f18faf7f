//! Run configuration: every knob of a training run in one versioned JSON
//! document. Unknown keys are errors; missing keys take their defaults.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{EnvParams, Family, FamilyMix};
use crate::error::{Error, Result};
use crate::hierarchy::{HierarchyConfig, Relabel};
use crate::nets::AdamConfig;
use crate::replay::ContextWindow;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Latent-conditioned subgoal generator over a shared goal-reaching low level.
    Mghrl,
    /// Flat latent-conditioned agent on primitive actions with dense reward.
    PearlDense,
    /// Flat latent-conditioned agent, sparse reward, hindsight goal relabeling.
    HerPearlSparse,
    /// The two-level hierarchy with one shared set of parameters and no latent.
    SharedHac,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Mghrl, Variant::PearlDense, Variant::HerPearlSparse, Variant::SharedHac];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mghrl => "mghrl",
            Variant::PearlDense => "pearl_dense",
            Variant::HerPearlSparse => "her_pearl_sparse",
            Variant::SharedHac => "shared_hac",
        }
    }

    pub fn hierarchical(self) -> bool {
        matches!(self, Variant::Mghrl | Variant::SharedHac)
    }

    pub fn uses_latent(self) -> bool {
        !matches!(self, Variant::SharedHac)
    }

    pub fn dense_reward(self) -> bool {
        matches!(self, Variant::PearlDense)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentConfig {
    pub dim: usize,
    /// Context entries per posterior (N).
    pub context_size: usize,
    pub kl_weight: f64,
    pub window: ContextWindow,
    pub encoder_hidden: Vec<usize>,
    pub encoder_lr: f64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            dim: 5,
            context_size: 64,
            kl_weight: 0.1,
            window: ContextWindow::Recent,
            encoder_hidden: vec![64, 64],
            encoder_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub entropy_coef: f64,
    pub discount: f64,
    pub polyak: f64,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            entropy_coef: 0.2,
            discount: 0.98,
            polyak: 0.995,
            batch_size: 128,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AgentConfig {
    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    pub high_capacity: usize,
    pub low_capacity: usize,
    pub low_relabel: Relabel,
    pub high_relabel: Relabel,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            high_capacity: 10_000,
            low_capacity: 100_000,
            low_relabel: Relabel::Future(4),
            high_relabel: Relabel::Future(4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// High-level decisions per task per collection round (M); each round
    /// spends exactly `m · k` primitive steps.
    pub m: usize,
    /// Gradient rounds after each collection pass.
    pub steps_per_round: usize,
    pub total_env_steps: u64,
    pub eval_every: u64,
    pub adapt_episodes: usize,
    pub eval_episodes: usize,
    /// Iterations between checkpoints written by the CLI; 0 disables them.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m: 5,
            steps_per_round: 200,
            total_env_steps: 200_000,
            eval_every: 10,
            adapt_episodes: 2,
            eval_episodes: 10,
            checkpoint_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub variant: Variant,
    pub seed: u64,
    pub family_mix: FamilyMix,
    pub num_train_tasks: usize,
    pub num_test_tasks: usize,
    pub env: EnvParams,
    pub hierarchy: HierarchyConfig,
    pub latent: LatentConfig,
    pub agent: AgentConfig,
    /// Settings for the low-level learner; `agent` is used when absent.
    pub low_agent: Option<AgentConfig>,
    pub replay: ReplayConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            variant: Variant::Mghrl,
            seed: 0,
            family_mix: FamilyMix::single(Family::Reach),
            num_train_tasks: 50,
            num_test_tasks: 10,
            env: EnvParams::default(),
            hierarchy: HierarchyConfig::default(),
            latent: LatentConfig::default(),
            agent: AgentConfig::default(),
            low_agent: None,
            replay: ReplayConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(field, "must be a positive finite number"))
    }
}

fn check_agent(prefix: &str, a: &AgentConfig) -> Result<()> {
    if a.hidden.is_empty() || a.hidden.contains(&0) {
        return Err(Error::config(format!("{prefix}.hidden"), "needs at least one positive layer width"));
    }
    if !(a.entropy_coef.is_finite() && a.entropy_coef >= 0.0) {
        return Err(Error::config(format!("{prefix}.entropy_coef"), "must be >= 0"));
    }
    if !(a.discount > 0.0 && a.discount < 1.0) {
        return Err(Error::config(format!("{prefix}.discount"), "must lie in (0, 1)"));
    }
    if !(0.0..=1.0).contains(&a.polyak) {
        return Err(Error::config(format!("{prefix}.polyak"), "must lie in [0, 1]"));
    }
    if a.batch_size == 0 {
        return Err(Error::config(format!("{prefix}.batch_size"), "must be >= 1"));
    }
    for (name, lr) in [("actor_lr", a.actor_lr), ("critic_lr", a.critic_lr)] {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::config(format!("{prefix}.{name}"), "must be >= 0"));
        }
    }
    if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
        return Err(Error::config(format!("{prefix}.beta1/beta2"), "must lie in [0, 1)"));
    }
    positive(&format!("{prefix}.eps"), a.eps)
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn low_agent(&self) -> &AgentConfig {
        self.low_agent.as_ref().unwrap_or(&self.agent)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        self.family_mix
            .validate()
            .map_err(|e| Error::config("family_mix", e.to_string()))?;
        if self.num_train_tasks == 0 {
            return Err(Error::config("num_train_tasks", "must be >= 1"));
        }
        if self.num_test_tasks == 0 {
            return Err(Error::config("num_test_tasks", "must be >= 1"));
        }
        let e = &self.env;
        if e.t_max == 0 {
            return Err(Error::config("env.t_max", "must be >= 1"));
        }
        for (name, v) in [
            ("env.action_max", e.action_max),
            ("env.contact_radius", e.contact_radius),
            ("env.slide_gain", e.slide_gain),
            ("env.goal_threshold", e.goal_threshold),
        ] {
            positive(name, v)?;
        }
        if !(e.friction.is_finite() && e.friction >= 0.0) {
            return Err(Error::config("env.friction", "must be >= 0"));
        }
        self.hierarchy.validate()?;
        if self.variant.uses_latent() {
            if self.latent.dim == 0 {
                return Err(Error::config("latent.dim", "must be >= 1"));
            }
            if self.latent.context_size == 0 {
                return Err(Error::config("latent.context_size", "must be >= 1"));
            }
            if !(self.latent.kl_weight.is_finite() && self.latent.kl_weight >= 0.0) {
                return Err(Error::config("latent.kl_weight", "must be >= 0"));
            }
            if self.latent.encoder_hidden.is_empty() || self.latent.encoder_hidden.contains(&0) {
                return Err(Error::config("latent.encoder_hidden", "needs positive layer widths"));
            }
            if !(self.latent.encoder_lr.is_finite() && self.latent.encoder_lr >= 0.0) {
                return Err(Error::config("latent.encoder_lr", "must be >= 0"));
            }
        }
        check_agent("agent", &self.agent)?;
        if let Some(low) = &self.low_agent {
            check_agent("low_agent", low)?;
        }
        if self.replay.high_capacity == 0 || self.replay.low_capacity == 0 {
            return Err(Error::config("replay", "capacities must be >= 1"));
        }
        for (name, r) in [("replay.low_relabel", self.replay.low_relabel), ("replay.high_relabel", self.replay.high_relabel)] {
            if r == Relabel::Future(0) {
                return Err(Error::config(name, "future(k) needs k >= 1"));
            }
        }
        let t = &self.train;
        if t.m == 0 {
            return Err(Error::config("train.m", "must be >= 1"));
        }
        if t.total_env_steps < self.steps_per_iteration() {
            return Err(Error::config(
                "train.total_env_steps",
                format!("budget is below one iteration ({} steps)", self.steps_per_iteration()),
            ));
        }
        if t.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be >= 1"));
        }
        if t.eval_episodes == 0 {
            return Err(Error::config("train.eval_episodes", "must be >= 1"));
        }
        Ok(())
    }

    /// Primitive steps consumed by one collection pass over all train tasks.
    pub fn steps_per_iteration(&self) -> u64 {
        (self.num_train_tasks * self.train.m * self.hierarchy.k) as u64
    }

    pub fn iterations(&self) -> u64 {
        self.train.total_env_steps / self.steps_per_iteration()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Hash with the seed blanked: runs that differ only by seed share it.
    pub fn group_hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.hash()
    }

    pub fn scenario(&self) -> String {
        self.family_mix.label()
    }
}
