//! Annealed training: frozen-reference phases over a replay buffer.
//!
//! Each phase freezes the current model as the reference `pi_a`, trains the
//! live model against the increment `a -> a + h`, then promotes it and
//! advances `a`. Rollouts are semi-autoregressive: blocks in order, a fixed
//! number of reveal rounds per block, one network call per round. Buffer
//! entries are recycled across many gradient steps because fresh interpolant
//! states need no network calls; a configurable fraction of the buffer is
//! refreshed periodically, oldest entries first.

use rayon::prelude::*;

use crate::dtm::{cdtm_loss_and_grad, sar_cdtm_loss_and_grad, DtmConfig, StepDiag, TimeSampling};
use crate::error::{Error, Result};
use crate::interpolant::SarLayout;
use crate::model::{
    clip_grad_norm, clone_frozen, params_hash, AdamOptimizer, GradientDescent, OptimConfig,
    Optimizer, PosteriorModel, TabularModel,
};
use crate::oracle::{terminal_law, ExactDistribution, RewardFn};
use crate::rng::{StreamDomain, StreamRng, Streams};
use crate::schedule::Schedule;
use crate::seq::{MaskedSequence, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderPolicy {
    /// Uniform choice of positions inside the active block.
    Random,
    /// Reveal the positions whose sampled token the model is most sure of.
    Confidence,
}

/// Semi-autoregressive rollout parameters.
#[derive(Debug, Clone)]
pub struct RolloutConfig {
    /// Total denoising steps T; the block count must divide it.
    pub total_steps: usize,
    /// Block size B; must divide the sequence length.
    pub block_size: usize,
    pub order: OrderPolicy,
    pub temperature: f64,
    /// Prompt prefixes cycled over rollouts (clean tokens fixed at the head
    /// of the sequence). Empty means unconditioned rollouts.
    pub prompts: Vec<Vec<Token>>,
}

impl RolloutConfig {
    fn validate(&self, seq_len: usize) -> Result<(usize, usize, usize)> {
        let b = self.block_size;
        if b == 0 || seq_len % b != 0 {
            return Err(Error::Config(format!(
                "block size {b} must divide sequence length {seq_len}"
            )));
        }
        let m = seq_len / b;
        if self.total_steps == 0 || self.total_steps % m != 0 {
            return Err(Error::Config(format!(
                "block count {m} must divide total steps {}",
                self.total_steps
            )));
        }
        let rounds_per_block = self.total_steps / m;
        if b % rounds_per_block != 0 {
            return Err(Error::Config(format!(
                "rounds per block {rounds_per_block} must divide block size {b}"
            )));
        }
        Ok((m, rounds_per_block, b / rounds_per_block))
    }
}

/// Store of (clean sequence, cached reward) pairs with periodic partial
/// refresh; oldest entries are evicted first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    entries: Vec<(MaskedSequence, f64)>,
    capacity: usize,
    rollouts_generated: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RolloutStats {
    pub forward_calls: u64,
}

impl ReplayBuffer {
    pub fn with_capacity(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            entries: Vec::with_capacity(capacity),
            capacity,
            rollouts_generated: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[(MaskedSequence, f64)] {
        &self.entries
    }

    pub fn mean_reward(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|(_, r)| r).sum::<f64>() / self.entries.len() as f64
    }

    /// Replaces the oldest `ceil(fraction * capacity)` entries with fresh
    /// rollouts from `pi_a` (the whole buffer when still empty).
    pub fn refresh<M: PosteriorModel, R: RewardFn + ?Sized>(
        &mut self,
        pi_a: &M,
        reward: &R,
        fraction: f64,
        cfg: &RolloutConfig,
        streams: &Streams,
    ) -> Result<RolloutStats> {
        let n_new = if self.entries.is_empty() {
            self.capacity
        } else {
            ((fraction * self.capacity as f64).ceil() as usize).clamp(1, self.capacity)
        };
        let first_index = self.rollouts_generated;
        let (fresh, stats) = rollout_batch(pi_a, reward, n_new, cfg, streams, first_index)?;
        self.rollouts_generated += n_new as u64;
        let evict = (self.entries.len() + n_new).saturating_sub(self.capacity);
        self.entries.drain(0..evict);
        self.entries.extend(fresh);
        Ok(stats)
    }
}

/// Generates a full buffer of SAR rollouts; returns the buffer and the exact
/// network call count (rounds per block times blocks, per rollout).
pub fn build_buffer<M: PosteriorModel, R: RewardFn + ?Sized>(
    pi_a: &M,
    reward: &R,
    capacity: usize,
    cfg: &RolloutConfig,
    streams: &Streams,
) -> Result<(ReplayBuffer, RolloutStats)> {
    let mut buffer = ReplayBuffer::with_capacity(capacity)?;
    let stats = buffer.refresh(pi_a, reward, 1.0, cfg, streams)?;
    Ok((buffer, stats))
}

fn rollout_batch<M: PosteriorModel, R: RewardFn + ?Sized>(
    pi_a: &M,
    reward: &R,
    n: usize,
    cfg: &RolloutConfig,
    streams: &Streams,
    first_index: u64,
) -> Result<(Vec<(MaskedSequence, f64)>, RolloutStats)> {
    cfg.validate(pi_a.seq_len())?;
    let outputs: Vec<Result<(MaskedSequence, f64, u64)>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let global = first_index + k as u64;
            let mut rng = streams.stream_pair(StreamDomain::Rollout, global, 0);
            let prompt = if cfg.prompts.is_empty() {
                None
            } else {
                Some(&cfg.prompts[(global % cfg.prompts.len() as u64) as usize][..])
            };
            let (x, calls) = sar_rollout(pi_a, cfg, prompt, &mut rng)?;
            let r = reward.reward(&x);
            Ok((x, r, calls))
        })
        .collect();
    let mut entries = Vec::with_capacity(n);
    let mut stats = RolloutStats::default();
    for out in outputs {
        let (x, r, calls) = out?;
        entries.push((x, r));
        stats.forward_calls += calls;
    }
    Ok((entries, stats))
}

/// One semi-autoregressive rollout. Blocks are generated in order; within a
/// block each round queries the model once and reveals a fixed number of
/// still-masked positions, chosen uniformly or by confidence in the sampled
/// token. Returns the clean sequence and the network call count.
pub fn sar_rollout<M: PosteriorModel>(
    pi_a: &M,
    cfg: &RolloutConfig,
    prompt: Option<&[Token]>,
    rng: &mut StreamRng,
) -> Result<(MaskedSequence, u64)> {
    use rand::Rng;
    let vocab = pi_a.vocab();
    let len = pi_a.seq_len();
    let (m, rounds_per_block, per_round) = cfg.validate(len)?;

    let mut x = MaskedSequence::fully_masked(len, &vocab);
    if let Some(p) = prompt {
        if p.len() > len {
            return Err(Error::Config("prompt longer than the sequence".into()));
        }
        for (i, &t) in p.iter().enumerate() {
            x = x.substitute(i, t, &vocab)?;
        }
    }

    let mut calls = 0u64;
    for b in 0..m {
        let block = b * cfg.block_size..(b + 1) * cfg.block_size;
        for _ in 0..rounds_per_block {
            let masked: Vec<usize> = block
                .clone()
                .filter(|&i| x.is_masked_at(i, &vocab))
                .collect();
            // The network is queried every round; rounds with nothing left to
            // reveal still count, matching the rollout's fixed step budget.
            let rows = pi_a.rows_at(&x, &masked);
            calls += 1;
            if masked.is_empty() {
                continue;
            }
            let take = per_round.min(masked.len());
            match cfg.order {
                OrderPolicy::Random => {
                    // Partial Fisher-Yates for a uniform subset.
                    let mut idx: Vec<usize> = (0..masked.len()).collect();
                    for j in 0..take {
                        let pick = j + rng.gen_range(0..idx.len() - j);
                        idx.swap(j, pick);
                    }
                    let mut chosen: Vec<usize> = idx[..take].to_vec();
                    chosen.sort_unstable();
                    for &slot in &chosen {
                        let (tok, _) = sample_row(rows.row(slot), cfg.temperature, rng);
                        x.set_unchecked(masked[slot], tok);
                    }
                }
                OrderPolicy::Confidence => {
                    let mut cands: Vec<(usize, Token, f64)> = Vec::with_capacity(masked.len());
                    for (slot, &i) in masked.iter().enumerate() {
                        let (tok, conf) = sample_row(rows.row(slot), cfg.temperature, rng);
                        cands.push((i, tok, conf));
                    }
                    cands.sort_by(|a, b| {
                        b.2.partial_cmp(&a.2)
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(a.0.cmp(&b.0))
                    });
                    for &(i, tok, _) in cands.iter().take(take) {
                        x.set_unchecked(i, tok);
                    }
                }
            }
        }
    }
    debug_assert!(x.is_clean(&vocab));
    Ok((x, calls))
}

/// Samples a token from a temperature-1 simplex row at the given
/// temperature; returns (token, temperature-1 probability of that token).
/// Temperature 0 is the argmax with ties to the lowest id.
fn sample_row(row: &[f64], temperature: f64, rng: &mut StreamRng) -> (Token, f64) {
    use rand::Rng;
    if temperature <= 0.0 {
        let mut best = 0usize;
        for (v, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = v;
            }
        }
        return (best as Token, row[best]);
    }
    if (temperature - 1.0).abs() < 1e-12 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (v, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return (v as Token, p);
            }
        }
        return ((row.len() - 1) as Token, row[row.len() - 1]);
    }
    // Reweight: p_tau(v) proportional to p(v)^(1/tau).
    let inv = 1.0 / temperature;
    let logs: Vec<f64> = row.iter().map(|&p| p.max(1e-300).ln() * inv).collect();
    let max_l = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|&l| (l - max_l).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (v, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return (v as Token, row[v]);
        }
    }
    ((row.len() - 1) as Token, row[row.len() - 1])
}

/// Uniform with-replacement minibatch.
pub fn sample_minibatch(
    buffer: &ReplayBuffer,
    batch_size: usize,
    rng: &mut StreamRng,
) -> Result<Vec<(MaskedSequence, f64)>> {
    use rand::Rng;
    if buffer.is_empty() {
        return Err(Error::Contract("cannot sample from an empty buffer".into()));
    }
    Ok((0..batch_size)
        .map(|_| buffer.entries[rng.gen_range(0..buffer.entries.len())].clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferConfig {
    pub capacity: usize,
    /// Steps between refreshes.
    pub refresh_interval: usize,
    pub refresh_fraction: f64,
}

impl Default for BufferConfig {
    fn default() -> Self {
        BufferConfig {
            capacity: 256,
            refresh_interval: 32,
            refresh_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone)]
pub enum ObjectiveKind {
    AnyOrder,
    Sar(SarLayout),
}

#[derive(Debug, Clone)]
pub enum OptimizerKind {
    Descent { learning_rate: f64 },
    Adam(OptimConfig),
}

/// Per-step log record: the trainer's CSV schema.
#[derive(Debug, Clone, Copy)]
pub struct PhaseLogRow {
    pub phase_index: usize,
    pub a: f64,
    pub step: usize,
    pub loss: f64,
    pub mean_buffer_reward: f64,
    pub grad_norm: f64,
}

/// One annealing phase's bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct PhaseSummary {
    pub phase_index: usize,
    /// Tilt level the phase moved to.
    pub a_end: f64,
    pub mean_buffer_reward: f64,
    /// Hash of the frozen reference, identical at phase start and end.
    pub frozen_hash: u64,
}

#[derive(Debug, Clone)]
pub struct RunDtmConfig {
    pub a_max: f64,
    pub h: f64,
    pub control_variate: f64,
    pub steps_per_phase: usize,
    pub draws_per_sequence: usize,
    pub objective: ObjectiveKind,
    pub optimizer: OptimizerKind,
    /// Global-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Keep every n-th step row in the log.
    pub log_every: usize,
    pub time_sampling: TimeSampling,
}

pub struct DtmRun<M> {
    pub model: M,
    pub rows: Vec<PhaseLogRow>,
    pub phases: Vec<PhaseSummary>,
    pub diagnostics: Vec<StepDiag>,
}

fn make_optimizer(kind: &OptimizerKind, num_params: usize) -> Box<dyn Optimizer> {
    match kind {
        OptimizerKind::Descent { learning_rate } => Box::new(GradientDescent::new(*learning_rate)),
        OptimizerKind::Adam(cfg) => Box::new(AdamOptimizer::new(*cfg, num_params)),
    }
}

fn phase_schedule(a_max: f64, h: f64) -> Result<Vec<(f64, f64)>> {
    if a_max < 0.0 || !a_max.is_finite() {
        return Err(Error::Config(format!(
            "terminal multiplier must be >= 0, got {a_max}"
        )));
    }
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Config(format!("annealing step must be positive, got {h}")));
    }
    let mut phases = Vec::new();
    let mut a = 0.0;
    while a < a_max - 1e-12 {
        let step = h.min(a_max - a);
        phases.push((a, step));
        a += step;
    }
    Ok(phases)
}

/// Annealed training against sampled rollouts (the practical path).
///
/// Per phase: freeze the reference, reset the optimizer, refresh the buffer
/// every `refresh_interval` steps from the frozen reference, and take
/// gradient steps on the chosen objective over minibatches. `on_phase_end`
/// sees the promoted model after each phase.
#[allow(clippy::too_many_arguments)]
pub fn run_dtm<M, R, F>(
    mut model: M,
    reward: &R,
    cfg: &RunDtmConfig,
    buffer_cfg: &BufferConfig,
    rollout_cfg: &RolloutConfig,
    batch_size: usize,
    streams: &Streams,
    mut on_phase_end: F,
) -> Result<DtmRun<M>>
where
    M: PosteriorModel + Clone,
    R: RewardFn + ?Sized,
    F: FnMut(usize, f64, &M) -> Result<()>,
{
    let phases = phase_schedule(cfg.a_max, cfg.h)?;
    if buffer_cfg.refresh_interval == 0 {
        return Err(Error::Config("refresh interval must be positive".into()));
    }
    let schedule = Schedule::Linear;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut diagnostics = Vec::new();
    let mut buffer = ReplayBuffer::with_capacity(buffer_cfg.capacity)?;
    let mut grad = vec![0.0; model.num_params()];
    let mut global_step: u64 = 0;

    for (phase_index, &(a, h_step)) in phases.iter().enumerate() {
        let frozen = clone_frozen(&model);
        let frozen_hash = params_hash(&frozen);
        let dtm_cfg = DtmConfig::new(cfg.control_variate, h_step)?
            .with_draws(cfg.draws_per_sequence)
            .with_time_sampling(cfg.time_sampling);
        let mut optimizer = make_optimizer(&cfg.optimizer, model.num_params());
        optimizer.reset();

        for step in 0..cfg.steps_per_phase {
            if step % buffer_cfg.refresh_interval == 0 {
                buffer.refresh(
                    &frozen,
                    reward,
                    buffer_cfg.refresh_fraction,
                    rollout_cfg,
                    streams,
                )?;
            }
            let mut mb_rng = streams.stream_pair(StreamDomain::Minibatch, global_step, 0);
            let batch = sample_minibatch(&buffer, batch_size, &mut mb_rng)?;
            let stats = match &cfg.objective {
                ObjectiveKind::AnyOrder => cdtm_loss_and_grad(
                    &batch,
                    Some(&frozen),
                    &model,
                    &dtm_cfg,
                    &schedule,
                    streams,
                    global_step,
                    &mut grad,
                ),
                ObjectiveKind::Sar(layout) => sar_cdtm_loss_and_grad(
                    &batch,
                    Some(&frozen),
                    &model,
                    &dtm_cfg,
                    layout,
                    &schedule,
                    streams,
                    global_step,
                    &mut grad,
                ),
            }
            .map_err(|e| match e {
                Error::DivergedLoss(msg) => Error::DivergedLoss(format!(
                    "phase {phase_index} (a = {a}) step {step}: {msg}; \
                     mean buffer reward {:.6}",
                    buffer.mean_reward()
                )),
                other => other,
            })?;
            let grad_norm = clip_grad_norm(&mut grad, cfg.grad_clip);
            optimizer.step(model.params_mut(), &grad);
            global_step += 1;

            if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps_per_phase {
                rows.push(PhaseLogRow {
                    phase_index,
                    a,
                    step,
                    loss: stats.loss,
                    mean_buffer_reward: buffer.mean_reward(),
                    grad_norm,
                });
                diagnostics.push(StepDiag {
                    tilt_level: a,
                    step,
                    loss: stats.loss,
                    grad_norm,
                    mean_weight: stats.mean_weight,
                    ess: stats.ess,
                });
            }
        }

        if params_hash(&frozen) != frozen_hash {
            return Err(Error::Internal("frozen reference changed within a phase".into()));
        }
        let a_end = a + h_step;
        summaries.push(PhaseSummary {
            phase_index,
            a_end,
            mean_buffer_reward: buffer.mean_reward(),
            frozen_hash,
        });
        on_phase_end(phase_index, a_end, &model)?;
    }

    Ok(DtmRun { model, rows, phases: summaries, diagnostics })
}

/// Annealed training with exact expectations on an enumerable space: the
/// buffer is replaced by the frozen model's exact terminal law and the loss
/// by its exact expected value. Tabular only.
pub fn run_dtm_exact<R, F>(
    mut model: TabularModel,
    reward: &R,
    cfg: &RunDtmConfig,
    clean_cap: usize,
    mut on_phase_end: F,
) -> Result<DtmRun<TabularModel>>
where
    R: RewardFn + ?Sized,
    F: FnMut(usize, f64, &TabularModel) -> Result<()>,
{
    let phases = phase_schedule(cfg.a_max, cfg.h)?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut diagnostics = Vec::new();
    let mut grad = vec![0.0; model.num_params()];

    for (phase_index, &(a, h_step)) in phases.iter().enumerate() {
        let frozen = clone_frozen(&model);
        let frozen_hash = params_hash(&frozen);
        let rho_a: ExactDistribution = terminal_law(&frozen, frozen.space().clone(), clean_cap)?;
        let mean_reward = rho_a.expectation(|x| reward.reward(x));
        let loss_rows =
            crate::dtm::expected_loss_rows(&rho_a, &frozen, reward, h_step, cfg.control_variate)?;
        let mut optimizer = make_optimizer(&cfg.optimizer, model.num_params());
        optimizer.reset();

        for step in 0..cfg.steps_per_phase {
            let loss = loss_rows.tabular_loss_and_grad(&model, &mut grad)?;
            if !loss.is_finite() {
                return Err(Error::DivergedLoss(format!(
                    "exact phase {phase_index} step {step}: loss {loss}"
                )));
            }
            let grad_norm = clip_grad_norm(&mut grad, cfg.grad_clip);
            optimizer.step(model.params_mut(), &grad);
            if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps_per_phase {
                rows.push(PhaseLogRow {
                    phase_index,
                    a,
                    step,
                    loss,
                    mean_buffer_reward: mean_reward,
                    grad_norm,
                });
                diagnostics.push(StepDiag {
                    tilt_level: a,
                    step,
                    loss,
                    grad_norm,
                    mean_weight: 0.0,
                    ess: 0.0,
                });
            }
        }

        if params_hash(&frozen) != frozen_hash {
            return Err(Error::Internal("frozen reference changed within a phase".into()));
        }
        let a_end = a + h_step;
        summaries.push(PhaseSummary {
            phase_index,
            a_end,
            mean_buffer_reward: mean_reward,
            frozen_hash,
        });
        on_phase_end(phase_index, a_end, &model)?;
    }

    Ok(DtmRun { model, rows, phases: summaries, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{tilt, StateSpace};
    use crate::seq::Vocabulary;

    fn tabular_setup(seed: u64) -> (TabularModel, ExactDistribution) {
        let space = StateSpace::new(Vocabulary::new(2).unwrap(), 3);
        let mut rng = Streams::new(seed).root();
        // Mix with uniform so no row weight is tiny.
        let random = ExactDistribution::random(space.clone(), &mut rng);
        let n = space.clean_count() as f64;
        let probs: Vec<f64> = random.probs().iter().map(|&p| 0.5 * p + 0.5 / n).collect();
        let rho = ExactDistribution::new(space, probs).unwrap();
        let model = TabularModel::from_exact(&rho).unwrap();
        (model, rho)
    }

    fn reward(x: &MaskedSequence) -> f64 {
        x.tokens().iter().map(|&t| t as f64).sum::<f64>() / x.len() as f64
    }

    #[test]
    fn zero_terminal_multiplier_returns_base_unchanged() {
        let (model, _) = tabular_setup(1);
        let before = model.params().to_vec();
        let cfg = RunDtmConfig {
            a_max: 0.0,
            h: 0.5,
            control_variate: 1.0,
            steps_per_phase: 10,
            draws_per_sequence: 1,
            objective: ObjectiveKind::AnyOrder,
            optimizer: OptimizerKind::Descent { learning_rate: 0.5 },
            grad_clip: 0.0,
            log_every: 1,
            time_sampling: TimeSampling::Uniform,
        };
        let run = run_dtm_exact(model, &reward, &cfg, 10_000, |_, _, _| Ok(())).unwrap();
        assert!(run.phases.is_empty());
        assert_eq!(run.model.params(), &before[..]);
    }

    #[test]
    fn exact_annealing_reaches_the_tilted_target() {
        let (model, rho1) = tabular_setup(2);
        let a_max = 1.0;
        let cfg = RunDtmConfig {
            a_max,
            h: 0.25,
            control_variate: 1.0,
            steps_per_phase: 6000,
            draws_per_sequence: 1,
            objective: ObjectiveKind::AnyOrder,
            optimizer: OptimizerKind::Descent { learning_rate: 6.0 },
            grad_clip: 0.0,
            log_every: 1000,
            time_sampling: TimeSampling::Uniform,
        };
        let run = run_dtm_exact(model, &reward, &cfg, 10_000, |_, _, _| Ok(())).unwrap();
        let final_law = terminal_law(&run.model, rho1.space().clone(), 10_000).unwrap();
        let target = tilt(&rho1, &reward, a_max).unwrap();
        let tv = final_law.tv(&target);
        assert!(tv < 1e-4, "tv to tilted target: {tv}");

        // Tilted mean reward is nondecreasing across phases.
        for pair in run.phases.windows(2) {
            assert!(pair[1].mean_buffer_reward >= pair[0].mean_buffer_reward - 1e-9);
        }
    }

    #[test]
    fn buffer_refresh_replaces_exact_fraction_oldest_first() {
        let (model, _) = tabular_setup(3);
        let rollout = RolloutConfig {
            total_steps: 3,
            block_size: 3,
            order: OrderPolicy::Random,
            temperature: 1.0,
            prompts: vec![],
        };
        let streams = Streams::new(9);
        let (mut buffer, stats) = build_buffer(&model, &reward, 8, &rollout, &streams).unwrap();
        assert_eq!(buffer.len(), 8);
        assert_eq!(stats.forward_calls, 8 * 3);
        let old: Vec<_> = buffer.entries().to_vec();
        buffer.refresh(&model, &reward, 0.25, &rollout, &streams).unwrap();
        assert_eq!(buffer.len(), 8);
        // ceil(0.25 * 8) = 2 oldest replaced: survivors are old[2..].
        assert_eq!(&buffer.entries()[..6], &old[2..]);
        // Rewards always match re-evaluation.
        for (x, r) in buffer.entries() {
            assert_eq!(*r, reward(x));
        }
    }

    #[test]
    fn rollouts_are_clean_and_deterministic() {
        let (model, _) = tabular_setup(4);
        let rollout = RolloutConfig {
            total_steps: 3,
            block_size: 1,
            order: OrderPolicy::Confidence,
            temperature: 1.0,
            prompts: vec![],
        };
        let streams = Streams::new(11);
        let (b1, _) = build_buffer(&model, &reward, 16, &rollout, &streams).unwrap();
        let (b2, _) = build_buffer(&model, &reward, 16, &rollout, &streams).unwrap();
        assert_eq!(b1.entries(), b2.entries());
        let vocab = model.vocab();
        for (x, _) in b1.entries() {
            assert!(x.is_clean(&vocab));
        }
    }

    #[test]
    fn zero_temperature_rollouts_are_identical() {
        // Argmax decoding: token choice and confidence-based position choice
        // are both deterministic, so every rollout coincides.
        let (model, _) = tabular_setup(5);
        let rollout = RolloutConfig {
            total_steps: 3,
            block_size: 3,
            order: OrderPolicy::Confidence,
            temperature: 0.0,
            prompts: vec![],
        };
        let streams = Streams::new(12);
        let (buffer, _) = build_buffer(&model, &reward, 8, &rollout, &streams).unwrap();
        let first = &buffer.entries()[0];
        for e in buffer.entries() {
            assert_eq!(e, first);
        }
    }

    #[test]
    fn prompt_tokens_are_fixed_in_rollouts() {
        let (model, _) = tabular_setup(8);
        let rollout = RolloutConfig {
            total_steps: 3,
            block_size: 3,
            order: OrderPolicy::Random,
            temperature: 1.0,
            prompts: vec![vec![1], vec![0]],
        };
        let streams = Streams::new(14);
        let (buffer, stats) = build_buffer(&model, &reward, 10, &rollout, &streams).unwrap();
        assert_eq!(stats.forward_calls, 10 * 3);
        for (k, (x, _)) in buffer.entries().iter().enumerate() {
            let expect = rollout.prompts[k % 2][0];
            assert_eq!(x.get(0), expect);
        }
    }

    #[test]
    fn minibatch_sampling_is_uniform() {
        let (model, _) = tabular_setup(6);
        let rollout = RolloutConfig {
            total_steps: 3,
            block_size: 3,
            order: OrderPolicy::Random,
            temperature: 1.0,
            prompts: vec![],
        };
        let streams = Streams::new(13);
        let (buffer, _) = build_buffer(&model, &reward, 8, &rollout, &streams).unwrap();
        // Chi-square over distinct sequences (the reward is a function of
        // the sequence, so grouping by sequence groups identical entries).
        let mut rng = streams.stream(StreamDomain::Minibatch, 999);
        let draws = 100_000usize;
        let mut counts: std::collections::HashMap<MaskedSequence, usize> =
            std::collections::HashMap::new();
        let mut mult: std::collections::HashMap<MaskedSequence, usize> =
            std::collections::HashMap::new();
        for (x, _) in buffer.entries() {
            *mult.entry(x.clone()).or_insert(0) += 1;
        }
        for _ in 0..draws / 50 {
            let mb = sample_minibatch(&buffer, 50, &mut rng).unwrap();
            for (x, _) in &mb {
                *counts.entry(x.clone()).or_insert(0) += 1;
            }
        }
        let total: usize = counts.values().sum();
        let mut chi2 = 0.0;
        for (x, &m) in &mult {
            let expected = total as f64 * m as f64 / buffer.len() as f64;
            let observed = *counts.get(x).unwrap_or(&0) as f64;
            chi2 += (observed - expected).powi(2) / expected;
        }
        // Well under the 1e-5 tail for <= 7 degrees of freedom.
        assert!(chi2 < 35.0, "chi2 = {chi2}");
        // Oversampling with replacement is allowed.
        assert!(sample_minibatch(&buffer, buffer.len() * 3, &mut rng).is_ok());
    }

    #[test]
    fn sampled_run_is_reproducible_and_freezes_references() {
        let (model, _) = tabular_setup(7);
        let cfg = RunDtmConfig {
            a_max: 0.5,
            h: 0.25,
            control_variate: 1.0,
            steps_per_phase: 6,
            draws_per_sequence: 2,
            objective: ObjectiveKind::Sar(SarLayout::new(3, 3).unwrap()),
            optimizer: OptimizerKind::Adam(OptimConfig {
                learning_rate: 0.05,
                weight_decay: 0.0,
                ..OptimConfig::default()
            }),
            grad_clip: 2.0,
            log_every: 1,
            time_sampling: TimeSampling::Stratified,
        };
        let buffer_cfg = BufferConfig {
            capacity: 16,
            refresh_interval: 3,
            refresh_fraction: 0.25,
        };
        let rollout = RolloutConfig {
            total_steps: 3,
            block_size: 3,
            order: OrderPolicy::Random,
            temperature: 1.0,
            prompts: vec![],
        };
        let streams = Streams::new(5);
        let run1 = run_dtm(
            model.clone(),
            &reward,
            &cfg,
            &buffer_cfg,
            &rollout,
            8,
            &streams,
            |_, _, _| Ok(()),
        )
        .unwrap();
        let run2 = run_dtm(
            model,
            &reward,
            &cfg,
            &buffer_cfg,
            &rollout,
            8,
            &streams,
            |_, _, _| Ok(()),
        )
        .unwrap();
        assert_eq!(run1.model.params(), run2.model.params());
        assert_eq!(run1.rows.len(), run2.rows.len());
        for (a, b) in run1.rows.iter().zip(&run2.rows) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
        assert_eq!(run1.phases.len(), 2);
        for p in &run1.phases {
            assert_ne!(p.frozen_hash, 0);
        }
    }
}
