//! Declarative run configuration: one versioned TOML document covering the
//! maze, model, schedule, objective, buffer, rollout, optimizer, and
//! evaluation settings. Unknown keys are rejected; every run writes its
//! fully resolved configuration next to its outputs.

use serde::{Deserialize, Serialize};
use std::path::Path;

use dtm_core::error::{Error, Result};
use dtm_core::interpolant::SarLayout;
use dtm_core::model::{NeuralConfig, OptimConfig};
use dtm_core::schedule::Schedule;
use dtm_core::dtm::TimeSampling;
use dtm_core::trainer::{
    BufferConfig, ObjectiveKind, OptimizerKind, OrderPolicy, RolloutConfig, RunDtmConfig,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub maze: MazeSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub dtm: DtmSection,
    #[serde(default)]
    pub buffer: BufferSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 42,
            maze: MazeSection::default(),
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            pretrain: PretrainSection::default(),
            rollout: RolloutSection::default(),
            dtm: DtmSection::default(),
            buffer: BufferSection::default(),
            finetune: FinetuneSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MazeSection {
    pub width: usize,
    pub door_fraction: f64,
    pub seq_len: usize,
}

impl Default for MazeSection {
    fn default() -> Self {
        MazeSection { width: 15, door_fraction: 0.4, seq_len: 48 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { embed_dim: 32, hidden_dim: 128 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: String,
    pub exponent: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { kind: "linear".into(), exponent: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub corpus_size: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_every: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            corpus_size: 30_000,
            steps: 3000,
            batch_size: 64,
            learning_rate: 1e-3,
            eval_every: 250,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RolloutSection {
    pub total_steps: usize,
    pub block_size: usize,
    pub order: String,
    pub temperature: f64,
}

impl Default for RolloutSection {
    fn default() -> Self {
        RolloutSection {
            total_steps: 24,
            block_size: 12,
            order: "random".into(),
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DtmSection {
    pub control_variate: f64,
    pub h: f64,
    pub a_max: f64,
    pub draws_per_sequence: usize,
    pub objective: String,
    pub time_sampling: String,
}

impl Default for DtmSection {
    fn default() -> Self {
        DtmSection {
            control_variate: 1.0,
            h: 2.5,
            a_max: 7.5,
            draws_per_sequence: 1,
            objective: "sar".into(),
            time_sampling: "stratified".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BufferSection {
    pub capacity: usize,
    pub refresh_interval: usize,
    pub refresh_fraction: f64,
    /// Distinct training prompts cycled over rollouts.
    pub prompt_pool: usize,
}

impl Default for BufferSection {
    fn default() -> Self {
        BufferSection {
            capacity: 256,
            refresh_interval: 32,
            refresh_fraction: 0.25,
            prompt_pool: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    /// Total gradient steps across all phases; the per-phase budget is this
    /// divided by the phase count so different step sizes use matched
    /// compute.
    pub total_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// "adam" or "descent".
    pub optimizer: String,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            total_steps: 768,
            batch_size: 64,
            learning_rate: 1e-3,
            grad_clip: 2.0,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            optimizer: "adam".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub prompt_count: usize,
    pub rollouts_per_prompt: usize,
    pub temperature: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            prompt_count: 32,
            rollouts_per_prompt: 8,
            temperature: 1.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.schedule()?;
        self.order_policy()?;
        self.time_sampling()?;
        self.objective_kind_probe()?;
        if self.maze.width < 5 || self.maze.width % 2 == 0 {
            return Err(Error::Config("maze width must be odd and >= 5".into()));
        }
        if self.maze.seq_len % self.rollout.block_size != 0 {
            return Err(Error::Config(format!(
                "rollout block size {} must divide sequence length {}",
                self.rollout.block_size, self.maze.seq_len
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        match self.schedule.kind.as_str() {
            "linear" => Ok(Schedule::Linear),
            "polynomial" => Schedule::polynomial(self.schedule.exponent),
            other => Err(Error::Config(format!(
                "unknown schedule kind {other:?} (linear | polynomial)"
            ))),
        }
    }

    pub fn time_sampling(&self) -> Result<TimeSampling> {
        match self.dtm.time_sampling.as_str() {
            "uniform" => Ok(TimeSampling::Uniform),
            "stratified" => Ok(TimeSampling::Stratified),
            "hazard-stratified" => Ok(TimeSampling::HazardStratified),
            other => Err(Error::Config(format!(
                "unknown time sampling {other:?} (uniform | stratified | hazard-stratified)"
            ))),
        }
    }

    pub fn order_policy(&self) -> Result<OrderPolicy> {
        match self.rollout.order.as_str() {
            "random" => Ok(OrderPolicy::Random),
            "confidence" => Ok(OrderPolicy::Confidence),
            other => Err(Error::Config(format!(
                "unknown order policy {other:?} (random | confidence)"
            ))),
        }
    }

    fn objective_kind_probe(&self) -> Result<()> {
        match self.dtm.objective.as_str() {
            "sar" | "any-order" => Ok(()),
            other => Err(Error::Config(format!(
                "unknown objective {other:?} (sar | any-order)"
            ))),
        }
    }

    pub fn objective_kind(&self) -> Result<ObjectiveKind> {
        match self.dtm.objective.as_str() {
            "sar" => Ok(ObjectiveKind::Sar(SarLayout::new(
                self.maze.seq_len,
                self.rollout.block_size,
            )?)),
            "any-order" => Ok(ObjectiveKind::AnyOrder),
            other => Err(Error::Config(format!(
                "unknown objective {other:?} (sar | any-order)"
            ))),
        }
    }

    pub fn neural_config(&self) -> NeuralConfig {
        NeuralConfig {
            embed_dim: self.model.embed_dim,
            hidden_dim: self.model.hidden_dim,
        }
    }

    pub fn rollout_config(&self, prompts: Vec<Vec<dtm_core::seq::Token>>) -> Result<RolloutConfig> {
        Ok(RolloutConfig {
            total_steps: self.rollout.total_steps,
            block_size: self.rollout.block_size,
            order: self.order_policy()?,
            temperature: self.rollout.temperature,
            prompts,
        })
    }

    pub fn buffer_config(&self) -> BufferConfig {
        BufferConfig {
            capacity: self.buffer.capacity,
            refresh_interval: self.buffer.refresh_interval,
            refresh_fraction: self.buffer.refresh_fraction,
        }
    }

    /// Phase count for the configured (A, h) pair.
    pub fn phase_count(&self) -> usize {
        let mut phases = 0usize;
        let mut a = 0.0;
        while a < self.dtm.a_max - 1e-12 {
            a += self.dtm.h.min(self.dtm.a_max - a);
            phases += 1;
        }
        phases
    }

    /// Matched-compute per-phase budget: total steps divided by phase count.
    pub fn steps_per_phase(&self) -> Result<usize> {
        let phases = self.phase_count();
        if phases == 0 {
            return Ok(0);
        }
        if self.finetune.total_steps % phases != 0 {
            return Err(Error::Config(format!(
                "total steps {} not divisible by phase count {phases}",
                self.finetune.total_steps
            )));
        }
        Ok(self.finetune.total_steps / phases)
    }

    pub fn run_dtm_config(&self) -> Result<RunDtmConfig> {
        Ok(RunDtmConfig {
            a_max: self.dtm.a_max,
            h: self.dtm.h,
            control_variate: self.dtm.control_variate,
            steps_per_phase: self.steps_per_phase()?,
            draws_per_sequence: self.dtm.draws_per_sequence,
            objective: self.objective_kind()?,
            optimizer: match self.finetune.optimizer.as_str() {
                "adam" => OptimizerKind::Adam(OptimConfig {
                    learning_rate: self.finetune.learning_rate,
                    beta1: self.finetune.beta1,
                    beta2: self.finetune.beta2,
                    weight_decay: self.finetune.weight_decay,
                    grad_clip: self.finetune.grad_clip,
                }),
                "descent" => OptimizerKind::Descent {
                    learning_rate: self.finetune.learning_rate,
                },
                other => {
                    return Err(Error::Config(format!(
                        "unknown optimizer {other:?} (adam | descent)"
                    )))
                }
            },
            grad_clip: self.finetune.grad_clip,
            log_every: 1,
            time_sampling: self.time_sampling()?,
        })
    }
}
